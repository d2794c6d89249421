//! Strided residual conv stack and the map-to-sequence projection.

use super::{EncoderConfig, CONV_STRIDES};
use crate::corpus::RenderedImage;
use crate::error::ModelError;
use crate::numerics::{Binding, ConvGeom, DenseArray, ParamStore, Var};

pub(super) fn init(store: &mut ParamStore, seed: u64, cfg: &EncoderConfig) {
    let mut cin = 1;
    for (i, &cout) in cfg.conv_channels.iter().enumerate() {
        let std = (2.0 / (9 * cin) as f64).sqrt();
        store.init_normal(seed, &format!("enc.conv{i}.w"), &[cout, cin, 3, 3], std);
        store.init_zeros(&format!("enc.conv{i}.b"), &[cout]);
        store.init_normal(seed, &format!("enc.conv{i}.skip_w"), &[cout, cin, 1, 1], (1.0 / cin as f64).sqrt());
        store.init_zeros(&format!("enc.conv{i}.skip_b"), &[cout]);
        cin = cout;
    }
    let c = cfg.conv_channels[3];
    store.init_normal(seed, "enc.m2s.w", &[cfg.d_model, c, 1, 1], (1.0 / c as f64).sqrt());
    store.init_zeros("enc.m2s.b", &[cfg.d_model]);
}

/// Four conv layers; layer `i` computes `silu(conv3x3(x)) + conv1x1(x)`,
/// both with stride `CONV_STRIDES[i]`. Output is `C×H'×W'`.
pub fn encode_image(b: &mut Binding, cfg: &EncoderConfig, img: &RenderedImage) -> Result<Var, ModelError> {
    if img.height != cfg.image_height || img.width != cfg.image_width {
        return Err(ModelError::Shape(format!(
            "image is {}×{}, encoder expects {}×{}",
            img.height, img.width, cfg.image_height, cfg.image_width
        )));
    }
    let x = b.constant(DenseArray::new(vec![1, img.height, img.width], img.pixels.clone())?);
    Ok(encode_pixels(b, x))
}

/// The conv stack applied to an arbitrary `1×H×W` tape value.
pub(crate) fn encode_pixels(b: &mut Binding, mut x: Var) -> Var {
    for (i, stride) in CONV_STRIDES.into_iter().enumerate() {
        let (w, bias) = (b.p(&format!("enc.conv{i}.w")), b.p(&format!("enc.conv{i}.b")));
        let (sw, sb) = (b.p(&format!("enc.conv{i}.skip_w")), b.p(&format!("enc.conv{i}.skip_b")));
        let main = b.tape.conv2d(x, w, bias, ConvGeom { stride, pad: 1 });
        let main = b.tape.silu(main);
        let skip = b.tape.conv2d(x, sw, sb, ConvGeom { stride, pad: 0 });
        x = b.tape.add(main, skip);
    }
    x
}

/// `1×1` conv to `D` channels, mean over the feature height, then one token
/// per feature column: `C×H'×W'` becomes `W'×D`.
pub fn map_to_sequence(b: &mut Binding, v: Var) -> Var {
    let (w, bias) = (b.p("enc.m2s.w"), b.p("enc.m2s.b"));
    let proj = b.tape.conv2d(v, w, bias, ConvGeom { stride: 1, pad: 0 });
    let h = b.tape.shape(proj)[1];
    let pooled = b.tape.sum_axis(proj, 1);
    let pooled = b.tape.scale(pooled, 1.0 / h as f64);
    b.tape.transpose(pooled)
}
