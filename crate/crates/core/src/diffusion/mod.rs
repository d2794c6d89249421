//! Contrast-augmented denoising diffusion: schedule, bound estimates,
//! positive and negative views, the combined objective and sampling.
//!
//! Images enter the chain as signals in `[−1, 1]` (`2p − 1`) and leave it
//! through the inverse map with clipping to `[0, 1]`.

mod augment;
mod objective;
mod sample;
mod schedule;

pub use augment::{augment, box_blur, make_positive, sample_negatives, translate, INK_RETENTION, MAX_SHIFT};
pub use objective::{
    contrastive_loss, elbo_at, prior_kl, total_loss, ClDenominator, ElboTerm, EpsModel, LossBundle, LossVars,
    LossWeights, ObjectiveInputs,
};
pub use sample::ddpm_sample;
pub use schedule::{forward_sample, NoiseSchedule};

use crate::corpus::RenderedImage;
use crate::numerics::DenseArray;

/// Pixels in `[0, 1]` to a `1×H×W` signal in `[−1, 1]`.
pub fn image_to_signal(img: &RenderedImage) -> DenseArray {
    DenseArray::new(vec![1, img.height, img.width], img.pixels.iter().map(|p| 2.0 * p - 1.0).collect())
        .expect("pixel count matches extents")
}

/// Inverse of [`image_to_signal`], clipped to `[0, 1]`.
pub fn signal_to_image(y: &DenseArray) -> RenderedImage {
    let s = y.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    RenderedImage::from_pixels(h, w, y.data().iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect())
}
