//! Three-level U-Net predicting the noise component of `y_t`.

use super::{ccam_block, cross_attention, flatten_positions, init_ccam_block, init_cross_attention, unflatten_positions, BlockDims};
use crate::error::ModelError;
use crate::numerics::{Binding, ConvGeom, DenseArray, ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct UnetConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Channels at full resolution; the two coarser levels use twice this.
    pub base_channels: usize,
    /// Width of the markup rows used as condition.
    pub markup_dim: usize,
    pub attn_dim: usize,
    /// Sinusoidal timestep embedding width (even).
    pub time_dim: usize,
    /// CCAM blocks at the bottleneck.
    pub ccam_blocks: usize,
    /// Conventional cross-attention layers, split over the two decoder levels.
    pub cross_blocks: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 128,
            base_channels: 8,
            markup_dim: 64,
            attn_dim: 64,
            time_dim: 32,
            ccam_blocks: 2,
            cross_blocks: 2,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_height % 4 != 0 || self.image_width % 4 != 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(ModelError::Config(format!(
                "U-Net needs image extents divisible by 4, got {}×{}",
                self.image_height, self.image_width
            )));
        }
        if self.base_channels == 0 || self.markup_dim == 0 || self.attn_dim == 0 {
            return Err(ModelError::Config("U-Net widths must be positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(ModelError::Config(format!("time_dim must be even and positive, got {}", self.time_dim)));
        }
        Ok(())
    }

    fn channels(&self) -> [usize; 3] {
        let c = self.base_channels;
        [c, 2 * c, 2 * c]
    }

    /// Cross-attention layers on the coarser decoder level; the rest sit at
    /// full resolution.
    fn cross_at_level1(&self) -> usize {
        self.cross_blocks.div_ceil(2)
    }
}

fn init_conv(store: &mut ParamStore, seed: u64, name: &str, cout: usize, cin: usize, k: usize) {
    let std = (1.0 / (cin * k * k) as f64).sqrt();
    store.init_normal(seed, &format!("{name}.w"), &[cout, cin, k, k], std);
    store.init_zeros(&format!("{name}.b"), &[cout]);
}

/// Initialises every parameter under the `unet.` prefix.
pub fn init_unet(store: &mut ParamStore, seed: u64, cfg: &UnetConfig) -> Result<(), ModelError> {
    cfg.validate()?;
    let [c0, c1, c2] = cfg.channels();
    let e = cfg.time_dim;
    store.init_normal(seed, "unet.time.w1", &[e, e], (1.0 / e as f64).sqrt());
    store.init_zeros("unet.time.b1", &[e]);
    init_conv(store, seed, "unet.in", c0, 1, 3);
    init_conv(store, seed, "unet.enc0", c0, c0, 3);
    init_conv(store, seed, "unet.down1", c1, c0, 3);
    init_conv(store, seed, "unet.enc1", c1, c1, 3);
    init_conv(store, seed, "unet.down2", c2, c1, 3);
    init_conv(store, seed, "unet.dec1", c1, c2 + c1, 3);
    init_conv(store, seed, "unet.dec0", c0, c1 + c0, 3);
    init_conv(store, seed, "unet.out", 1, c0, 3);
    for (level, c) in [("enc0", c0), ("enc1", c1), ("mid", c2), ("dec1", c1), ("dec0", c0)] {
        store.init_normal(seed, &format!("unet.{level}.temb"), &[e, c], (1.0 / e as f64).sqrt());
    }
    let dims = |channels| BlockDims { channels, markup: cfg.markup_dim, attn: cfg.attn_dim };
    for i in 0..cfg.ccam_blocks {
        init_ccam_block(store, seed, &format!("unet.ccam{i}"), dims(c2));
    }
    for j in 0..cfg.cross_blocks {
        let c = if j < cfg.cross_at_level1() { c1 } else { c0 };
        init_cross_attention(store, seed, &format!("unet.cross{j}"), dims(c));
    }
    Ok(())
}

/// `emb[2i] = sin(t·ω_i)`, `emb[2i+1] = cos(t·ω_i)` with
/// `ω_i = 10000^(−2i/dim)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let w = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        out[2 * i] = (t as f64 * w).sin();
        out[2 * i + 1] = (t as f64 * w).cos();
    }
    out
}

fn conv(b: &mut Binding, name: &str, x: Var, stride: usize) -> Var {
    let (w, bias) = (b.p(&format!("{name}.w")), b.p(&format!("{name}.b")));
    b.tape.conv2d(x, w, bias, ConvGeom { stride, pad: 1 })
}

/// Adds the level's projection of the time embedding to every channel.
fn add_time(b: &mut Binding, level: &str, x: Var, temb: Var) -> Var {
    let s = b.tape.shape(x).to_vec();
    let proj = b.p(&format!("unet.{level}.temb"));
    let per_channel = b.tape.matmul(temb, proj);
    let per_channel = b.tape.reshape(per_channel, &[s[0]]);
    let flat = b.tape.reshape(x, &[s[0], s[1] * s[2]]);
    let shifted = b.tape.add_col(flat, per_channel);
    b.tape.reshape(shifted, &s)
}

fn attend_map(b: &mut Binding, x: Var, f: impl FnOnce(&mut Binding, Var) -> Var) -> Var {
    let s = b.tape.shape(x).to_vec();
    let flat = flatten_positions(b, x);
    let out = f(b, flat);
    unflatten_positions(b, out, s[1], s[2])
}

/// Predicts `ε̂` for a `1×H×W` noised image at step `t_step` conditioned on
/// `N×markup_dim` markup rows.
pub fn unet_eps(b: &mut Binding, cfg: &UnetConfig, y_t: Var, t_step: usize, markup: Var) -> Result<Var, ModelError> {
    let shape = b.tape.shape(y_t).to_vec();
    if shape != [1, cfg.image_height, cfg.image_width] {
        return Err(ModelError::Shape(format!(
            "U-Net input {shape:?}, expected [1, {}, {}]",
            cfg.image_height, cfg.image_width
        )));
    }
    let ms = b.tape.shape(markup);
    if ms.len() != 2 || ms[1] != cfg.markup_dim || ms[0] == 0 {
        return Err(ModelError::Shape(format!("markup condition {ms:?}, expected N×{}", cfg.markup_dim)));
    }

    let e = cfg.time_dim;
    let sin = b.constant(DenseArray::new(vec![1, e], timestep_embedding(t_step, e))?);
    let (w1, b1) = (b.p("unet.time.w1"), b.p("unet.time.b1"));
    let temb = b.tape.matmul(sin, w1);
    let temb = b.tape.add_row(temb, b1);
    let temb = b.tape.silu(temb);

    let x0 = conv(b, "unet.in", y_t, 1);
    let h = conv(b, "unet.enc0", x0, 1);
    let h = add_time(b, "enc0", h, temb);
    let h = b.tape.silu(h);
    let e0 = b.tape.add(x0, h);

    let d1 = conv(b, "unet.down1", e0, 2);
    let h = conv(b, "unet.enc1", d1, 1);
    let h = add_time(b, "enc1", h, temb);
    let h = b.tape.silu(h);
    let e1 = b.tape.add(d1, h);

    let d2 = conv(b, "unet.down2", e1, 2);
    let mut m = add_time(b, "mid", d2, temb);
    for i in 0..cfg.ccam_blocks {
        let prefix = format!("unet.ccam{i}");
        m = attend_map(b, m, |b, v| ccam_block(b, &prefix, v, markup));
    }

    let up = b.tape.upsample2x(m);
    let cat = b.tape.concat_rows(&[up, e1]);
    let h = conv(b, "unet.dec1", cat, 1);
    let h = add_time(b, "dec1", h, temb);
    let mut u1 = b.tape.silu(h);
    let split = cfg.cross_at_level1();
    for j in 0..split {
        let prefix = format!("unet.cross{j}");
        u1 = attend_map(b, u1, |b, v| cross_attention(b, &prefix, v, markup));
    }

    let up = b.tape.upsample2x(u1);
    let cat = b.tape.concat_rows(&[up, e0]);
    let h = conv(b, "unet.dec0", cat, 1);
    let h = add_time(b, "dec0", h, temb);
    let mut u0 = b.tape.silu(h);
    for j in split..cfg.cross_blocks {
        let prefix = format!("unet.cross{j}");
        u0 = attend_map(b, u0, |b, v| cross_attention(b, &prefix, v, markup));
    }
    Ok(conv(b, "unet.out", u0, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_store, Purpose, RngStream};

    fn toy() -> UnetConfig {
        UnetConfig {
            image_height: 8,
            image_width: 16,
            base_channels: 2,
            markup_dim: 3,
            attn_dim: 2,
            time_dim: 4,
            ccam_blocks: 1,
            cross_blocks: 2,
        }
    }

    fn random(shape: &[usize], seed: u64) -> DenseArray {
        let mut rng = RngStream::new(seed, Purpose::Test, 0);
        DenseArray::new(shape.to_vec(), rng.normals(shape.iter().product())).unwrap()
    }

    #[test]
    fn default_output_shape_and_determinism() {
        let cfg = UnetConfig::default();
        let mut s = ParamStore::new();
        init_unet(&mut s, 3, &cfg).unwrap();
        let run = || {
            let mut b = Binding::frozen(&s);
            let y = b.constant(random(&[1, 32, 128], 1));
            let t = b.constant(random(&[5, 64], 2));
            let out = unet_eps(&mut b, &cfg, y, 17, t).unwrap();
            b.tape.value(out).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[1, 32, 128]);
        assert!(a.is_finite());
        assert_eq!(a, run());
    }

    #[test]
    fn rejects_mismatched_input() {
        let cfg = toy();
        let mut s = ParamStore::new();
        init_unet(&mut s, 3, &cfg).unwrap();
        let mut b = Binding::frozen(&s);
        let y = b.constant(random(&[1, 8, 12], 1));
        let t = b.constant(random(&[2, 3], 2));
        assert!(matches!(unet_eps(&mut b, &cfg, y, 1, t), Err(ModelError::Shape(_))));
        assert!(UnetConfig { image_width: 18, ..toy() }.validate().is_err());
    }

    #[test]
    fn timestep_embedding_values() {
        let e = timestep_embedding(3, 4);
        assert_eq!(e[0], 3f64.sin());
        assert_eq!(e[1], 3f64.cos());
        assert!((e[2] - (0.03f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn block_counts_are_configurable() {
        let cfg = UnetConfig { ccam_blocks: 5, cross_blocks: 8, ..toy() };
        let mut s = ParamStore::new();
        init_unet(&mut s, 3, &cfg).unwrap();
        assert!(s.contains("unet.ccam4.fuse") && s.contains("unet.cross7.wo"));
        assert_eq!(s.get("unet.cross3.wo").unwrap().shape(), &[2, 4]);
        assert_eq!(s.get("unet.cross4.wo").unwrap().shape(), &[2, 2]);
        let mut b = Binding::frozen(&s);
        let y = b.constant(random(&[1, 8, 16], 1));
        let t = b.constant(random(&[2, 3], 2));
        let out = unet_eps(&mut b, &cfg, y, 4, t).unwrap();
        assert_eq!(b.tape.shape(out), &[1, 8, 16]);
    }

    #[test]
    fn gradients_on_toy_input() {
        let cfg = toy();
        let mut s = ParamStore::new();
        init_unet(&mut s, 3, &cfg).unwrap();
        // nonzero biases so every bias path carries signal
        for (name, v) in s.iter_mut() {
            if name.ends_with(".b") || name.ends_with(".bg") {
                v.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = 0.1 * (i as f64 + 1.0).sin());
            }
        }
        s.insert("markup", random(&[3, 3], 4));
        let y = random(&[1, 8, 16], 5);
        let target = random(&[1, 8, 16], 6);
        let r = grad_check_store(
            &s,
            |b: &mut Binding| -> Result<Var, ModelError> {
                let yv = b.constant(y.clone());
                let t = b.p("markup");
                let out = unet_eps(b, &cfg, yv, 7, t)?;
                let tgt = b.constant(target.clone());
                let d = b.tape.sub(out, tgt);
                let sq = b.tape.square(d);
                Ok(b.tape.mean(sq))
            },
            1e-5,
            Some(4),
            1,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
    }
}
