//! Positive views by mild augmentation and same-batch negatives.

use crate::corpus::RenderedImage;
use crate::error::ModelError;
use crate::numerics::RngStream;

/// Largest translation per axis, in pixels.
pub const MAX_SHIFT: i64 = 2;
/// Share of ink pixels a positive view must keep.
pub const INK_RETENTION: f64 = 0.95;
const MAX_ATTEMPTS: usize = 8;

/// Shifts content by `(dx, dy)` with zero fill.
pub fn translate(img: &RenderedImage, dx: i64, dy: i64) -> RenderedImage {
    let mut out = RenderedImage::blank(img.height, img.width);
    let (h, w) = (img.height as i64, img.width as i64);
    for y in 0..h {
        let sy = y - dy;
        if !(0..h).contains(&sy) {
            continue;
        }
        for x in 0..w {
            let sx = x - dx;
            if (0..w).contains(&sx) {
                out.pixels[(y * w + x) as usize] = img.pixels[(sy * w + sx) as usize];
            }
        }
    }
    out
}

/// 3×3 mean filter; out-of-bounds neighbours count as zero.
pub fn box_blur(img: &RenderedImage) -> RenderedImage {
    let (h, w) = (img.height as i64, img.width as i64);
    let mut out = RenderedImage::blank(img.height, img.width);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for ny in (y - 1).max(0)..=(y + 1).min(h - 1) {
                for nx in (x - 1).max(0)..=(x + 1).min(w - 1) {
                    s += img.pixels[(ny * w + nx) as usize];
                }
            }
            out.pixels[(y * w + x) as usize] = s / 9.0;
        }
    }
    out
}

/// Applies one concrete augmentation draw.
pub fn augment(img: &RenderedImage, dx: i64, dy: i64, blur: bool) -> RenderedImage {
    let moved = translate(img, dx, dy);
    if blur {
        box_blur(&moved)
    } else {
        moved
    }
}

/// Random translation in `[−2, 2]²` then, with probability ½, a box blur.
/// Draws that push more than 5% of the ink off the canvas are redrawn; after
/// eight failed draws the image is returned unchanged.
pub fn make_positive(img: &RenderedImage, rng: &mut RngStream) -> RenderedImage {
    let ink = img.ink_pixels() as f64;
    for _ in 0..MAX_ATTEMPTS {
        let dx = rng.int_range(-MAX_SHIFT, MAX_SHIFT);
        let dy = rng.int_range(-MAX_SHIFT, MAX_SHIFT);
        let blur = rng.bernoulli(0.5);
        let moved = translate(img, dx, dy);
        if moved.ink_pixels() as f64 >= INK_RETENTION * ink {
            return if blur { box_blur(&moved) } else { moved };
        }
    }
    img.clone()
}

/// `k` distinct batch positions other than `anchor`.
pub fn sample_negatives(batch_len: usize, anchor: usize, k: usize, rng: &mut RngStream) -> Result<Vec<usize>, ModelError> {
    if anchor >= batch_len {
        return Err(ModelError::Config(format!("anchor {anchor} outside batch of {batch_len}")));
    }
    if k == 0 || batch_len <= k {
        return Err(ModelError::Config(format!("batch of {batch_len} cannot supply {k} negatives")));
    }
    let mut pool: Vec<usize> = (0..batch_len).filter(|&i| i != anchor).collect();
    for i in 0..k {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}
