//! Finite-difference verification of every trainable loss on small,
//! randomly sized models.

use crate::ccam::UnetConfig;
use crate::corpus::{generate, MarkupDoc, RenderedImage};
use crate::diffusion::{contrastive_loss, elbo_at, image_to_signal, ClDenominator};
use crate::encoders::{align_pair, encode_markup, fa_loss, EncoderConfig};
use crate::error::ModelError;
use crate::model::{Model, ModelConfig};
use crate::numerics::{grad_check, grad_check_store, grad_check_store_richardson, DenseArray, GradReport, NumericError, Purpose, RngStream};

/// Tolerance for losses that do not pass through the U-Net.
pub const TOL_DIRECT: f64 = 1e-4;
/// Tolerance for losses evaluated through the full U-Net.
pub const TOL_UNET: f64 = 1e-3;
const EPS: f64 = 1e-5;
/// Step for the encoder stack, whose smallest gradient coordinates sit
/// near `1e-9` and need a wider difference to clear rounding.
const EPS_ENC: f64 = 1e-4;
/// Outer step of the extrapolated differences used through the U-Net.
const EPS_UNET: f64 = 1e-3;
const PROBES_PER_TENSOR: usize = 6;
const TOY_W: usize = 32;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradReport,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err <= self.tolerance
    }
}

/// A small model whose widths are drawn from `seed`, over 8×32 images.
pub fn toy_model(seed: u64, timesteps: usize) -> Result<Model, ModelError> {
    let mut rng = RngStream::new(seed, Purpose::Test, 0);
    let d = [4, 6, 8][rng.below(3)];
    let c = 2 + rng.below(2);
    let mut cfg = ModelConfig {
        encoder: EncoderConfig {
            image_height: 8,
            image_width: TOY_W,
            d_model: d,
            conv_channels: [c, c, c, c],
            ..EncoderConfig::default()
        },
        unet: UnetConfig {
            image_height: 8,
            image_width: TOY_W,
            base_channels: c,
            markup_dim: d,
            attn_dim: 4,
            time_dim: 4,
            ccam_blocks: 1,
            cross_blocks: 1,
        },
        timesteps,
        ..ModelConfig::default()
    };
    cfg.weights.num_negatives = 2;
    // The bound terms grow with pixel count while the alignment loss is
    // O(1); weighting it by the pixel count keeps its gradient resolvable by
    // finite differences against the summed loss.
    cfg.weights.lambda = 1.0;
    cfg.weights.beta_fa = (8 * TOY_W) as f64;
    Model::new(cfg)
}

/// Corpus documents paired with uniform-noise 8×32 images, which excite
/// every encoder path more evenly than sparse glyph crops.
pub fn toy_corpus(seed: u64, count: usize) -> Vec<(MarkupDoc, RenderedImage)> {
    generate(seed, count)
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let mut rng = RngStream::new(seed, Purpose::Test, 100 + i as u64);
            (d, RenderedImage::from_pixels(8, TOY_W, (0..8 * TOY_W).map(|_| rng.uniform()).collect()))
        })
        .collect()
}

fn store_err(e: NumericError) -> ModelError {
    ModelError::Numeric(e)
}

/// Runs the gradient check for the alignment loss, both contrastive
/// denominators, the single-step bound through the U-Net and the combined
/// objective with `T = 1`.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>, ModelError> {
    let mut out = Vec::new();
    let corpus = toy_corpus(seed, 4);

    let model = toy_model(seed, 1)?;
    let store = model.init_params(seed)?;
    let (doc, img) = (&corpus[0].0, &corpus[0].1);

    let mut rng = RngStream::new(seed, Purpose::Test, 1);
    let (n, d) = (2 + rng.below(5), 2 + rng.below(7));
    let c_rows = DenseArray::new(vec![n, d], rng.normals(n * d))?;
    let t_rows = DenseArray::new(vec![n, d], rng.normals(n * d))?;
    let report = grad_check(
        |tape, c| {
            let t = tape.constant(t_rows.clone());
            fa_loss(tape, c, t)
        },
        &c_rows,
        EPS,
    )
    .map_err(store_err)?;
    out.push(SuiteEntry { name: "l_fa (inputs)".into(), report, tolerance: TOL_DIRECT });

    let enc_only = {
        let mut s = crate::numerics::ParamStore::new();
        crate::encoders::init_encoders(&mut s, seed, &model.config.encoder)?;
        s
    };
    let report = grad_check_store(
        &enc_only,
        |b| align_pair(b, &model.config.encoder, doc, img).map(|a| a.l_fa),
        EPS_ENC,
        Some(PROBES_PER_TENSOR),
        seed,
    )
    .map_err(store_err)?;
    out.push(SuiteEntry { name: "l_fa (encoders)".into(), report, tolerance: TOL_DIRECT });

    let n = 3 + rng.below(6);
    let k = 1 + rng.below(4);
    let anchor = DenseArray::new(vec![1, n], rng.normals(n))?;
    let others: Vec<DenseArray> = (0..=k).map(|_| DenseArray::new(vec![1, n], rng.normals(n)).expect("shape")).collect();
    for mode in [ClDenominator::WithPositive, ClDenominator::NegativesOnly] {
        let report = grad_check(
            |tape, a| {
                let p = tape.constant(others[0].clone());
                let negs: Vec<_> = others[1..].iter().map(|x| tape.constant(x.clone())).collect();
                contrastive_loss(tape, a, p, &negs, 0.5, mode)
            },
            &anchor,
            EPS,
        )
        .map_err(store_err)?;
        let name = match mode {
            ClDenominator::WithPositive => "l_cl (with positive)",
            ClDenominator::NegativesOnly => "l_cl (negatives only)",
        };
        out.push(SuiteEntry { name: name.into(), report, tolerance: TOL_DIRECT });
    }

    let y0 = image_to_signal(img);
    let eps_noise = DenseArray::new(vec![1, 8, TOY_W], rng.normals(8 * TOY_W))?;
    let report = grad_check_store_richardson(
        &store,
        |b| {
            let cond = encode_markup(b, doc)?;
            elbo_at(b, &model.config.unet, &model.schedule, &y0, cond, 1, &eps_noise).map(|e| e.value)
        },
        EPS_UNET,
        Some(PROBES_PER_TENSOR),
        seed,
    )
    .map_err(store_err)?;
    out.push(SuiteEntry { name: "elbo (T=1, U-Net)".into(), report, tolerance: TOL_UNET });

    let item = model.draw_item(&corpus, 0, seed, 0)?;
    let report = grad_check_store_richardson(
        &store,
        |b| model.example_loss(b, &item).map(|(v, _)| v.total),
        EPS_UNET,
        Some(PROBES_PER_TENSOR),
        seed,
    )
    .map_err(store_err)?;
    out.push(SuiteEntry { name: "total_loss (T=1, U-Net)".into(), report, tolerance: TOL_UNET });
    Ok(out)
}

pub fn format_suite(entries: &[SuiteEntry]) -> String {
    let mut s = format!("{:<26} {:>12} {:>10} {:>8}  {}\n", "loss", "max rel err", "tolerance", "probed", "result");
    for e in entries {
        s.push_str(&format!(
            "{:<26} {:>12.3e} {:>10.0e} {:>8}  {}\n",
            e.name,
            e.report.max_rel_err,
            e.tolerance,
            e.report.checked,
            if e.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}
