//! Image-quality metrics: DTW over binarized column series, RMSE, windowed
//! SSIM, PSNR, ERGAS and RASE, plus directory-level evaluation.

mod eval;

pub use eval::{evaluate_set, write_csv, EvalRow, MetricReport};

use thiserror::Error;

use crate::corpus::io::to_u8;
use crate::corpus::{CorpusError, RenderedImage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("empty series")]
    Empty,
    #[error("reference image has zero mean")]
    ZeroMean,
    #[error("unmatched files: {0:?}")]
    Unmatched(Vec<String>),
    #[error(transparent)]
    Io(#[from] CorpusError),
}

/// An image read as a left-to-right sequence of column vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnSeries {
    pub height: usize,
    /// Column-major values, `len = height × columns`.
    pub data: Vec<f64>,
}

impl ColumnSeries {
    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let height = columns.first().map_or(0, Vec::len);
        assert!(columns.iter().all(|c| c.len() == height), "ragged columns");
        Self { height, data: columns.concat() }
    }

    pub fn len(&self) -> usize {
        if self.height == 0 { 0 } else { self.data.len() / self.height }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.data[i * self.height..(i + 1) * self.height]
    }

    /// The same series written back as an image.
    pub fn to_image(&self) -> RenderedImage {
        let (h, w) = (self.height, self.len());
        let mut px = vec![0.0; h * w];
        for x in 0..w {
            for (y, v) in self.column(x).iter().enumerate() {
                px[y * w + x] = *v;
            }
        }
        RenderedImage::from_pixels(h, w, px)
    }
}

pub const THRESHOLD: f64 = 0.5;

/// Pixels at or above `threshold` become 1, the rest 0.
pub fn binarize(img: &RenderedImage, threshold: f64) -> ColumnSeries {
    let mut data = Vec::with_capacity(img.pixels.len());
    for x in 0..img.width {
        for y in 0..img.height {
            data.push(if img.get(y, x) >= threshold { 1.0 } else { 0.0 });
        }
    }
    ColumnSeries { height: img.height, data }
}

fn column_cost(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimal cumulative Euclidean column cost over monotone warping paths
/// with unit steps. Not normalized by path length.
pub fn dtw(a: &ColumnSeries, b: &ColumnSeries) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty);
    }
    if a.height != b.height {
        return Err(MetricsError::Shape((a.height, a.len()), (b.height, b.len())));
    }
    let (n, m) = (a.len(), b.len());
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j - 1].min(prev[j]).min(cur[j - 1]),
            };
            cur[j] = column_cost(a.column(i), b.column(j)) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// DTW between the binarized column series of two images.
pub fn image_dtw(a: &RenderedImage, b: &RenderedImage) -> Result<f64, MetricsError> {
    dtw(&binarize(a, THRESHOLD), &binarize(b, THRESHOLD))
}

fn levels(a: &RenderedImage, b: &RenderedImage) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(MetricsError::Shape((a.height, a.width), (b.height, b.width)));
    }
    let q = |img: &RenderedImage| img.pixels.iter().map(|&p| f64::from(to_u8(p))).collect::<Vec<_>>();
    Ok((q(a), q(b)))
}

fn rmse_levels(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Root mean squared difference on the 8-bit scale.
pub fn rmse(a: &RenderedImage, b: &RenderedImage) -> Result<f64, MetricsError> {
    let (x, y) = levels(a, b)?;
    Ok(rmse_levels(&x, &y))
}

pub const PSNR_CAP: f64 = 100.0;

pub fn psnr(a: &RenderedImage, b: &RenderedImage) -> Result<f64, MetricsError> {
    Ok(psnr_from_rmse(rmse(a, b)?))
}

pub fn psnr_from_rmse(rmse: f64) -> f64 {
    if rmse == 0.0 { PSNR_CAP } else { (20.0 * (255.0 / rmse).log10()).min(PSNR_CAP) }
}

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;

fn window_starts(extent: usize) -> Vec<usize> {
    if extent <= SSIM_WINDOW {
        vec![0]
    } else {
        (0..=(extent - SSIM_WINDOW) / SSIM_STRIDE).map(|k| k * SSIM_STRIDE).collect()
    }
}

/// Mean SSIM over 8×8 windows at stride 4 (windows are clipped to images
/// smaller than 8 pixels on a side).
pub fn ssim(a: &RenderedImage, b: &RenderedImage) -> Result<f64, MetricsError> {
    let (x, y) = levels(a, b)?;
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let w = a.width;
    let (ys, xs) = (window_starts(a.height), window_starts(a.width));
    let (wh, ww) = (SSIM_WINDOW.min(a.height), SSIM_WINDOW.min(a.width));
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    for &y0 in &ys {
        for &x0 in &xs {
            let idx = || (y0..y0 + wh).flat_map(move |r| (x0..x0 + ww).map(move |c| r * w + c));
            let mx = idx().map(|i| x[i]).sum::<f64>() / n;
            let my = idx().map(|i| y[i]).sum::<f64>() / n;
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in idx() {
                let (dx, dy) = (x[i] - mx, y[i] - my);
                vx += dx * dx;
                vy += dy * dy;
                cxy += dx * dy;
            }
            let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (ys.len() * xs.len()) as f64)
}

/// Single-band ERGAS with unit resolution ratio: `100 · RMSE / μ_ref`.
pub fn ergas(reference: &RenderedImage, candidate: &RenderedImage) -> Result<f64, MetricsError> {
    let (r, c) = levels(reference, candidate)?;
    let mu = r.iter().sum::<f64>() / r.len() as f64;
    if mu == 0.0 {
        return Err(MetricsError::ZeroMean);
    }
    let bands = [(rmse_levels(&r, &c), mu)];
    let mean_sq = bands.iter().map(|(e, m)| (e / m).powi(2)).sum::<f64>() / bands.len() as f64;
    Ok(100.0 * mean_sq.sqrt())
}

/// RASE: `(100 / μ_ref) · sqrt(mean band RMSE²)`.
pub fn rase(reference: &RenderedImage, candidate: &RenderedImage) -> Result<f64, MetricsError> {
    let (r, c) = levels(reference, candidate)?;
    let mu = r.iter().sum::<f64>() / r.len() as f64;
    if mu == 0.0 {
        return Err(MetricsError::ZeroMean);
    }
    let band_rmse = [rmse_levels(&r, &c)];
    let mean_sq = band_rmse.iter().map(|e| e * e).sum::<f64>() / band_rmse.len() as f64;
    Ok(100.0 / mu * mean_sq.sqrt())
}

/// All six metrics for one (reference, candidate) pair.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct PairMetrics {
    pub dtw: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub ergas: f64,
    pub rase: f64,
}

pub fn pair_metrics(reference: &RenderedImage, candidate: &RenderedImage) -> Result<PairMetrics, MetricsError> {
    let e = rmse(reference, candidate)?;
    Ok(PairMetrics {
        dtw: image_dtw(candidate, reference)?,
        rmse: e,
        ssim: ssim(candidate, reference)?,
        psnr: psnr_from_rmse(e),
        ergas: ergas(reference, candidate)?,
        rase: rase(reference, candidate)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(vals: &[f64]) -> ColumnSeries {
        ColumnSeries { height: 1, data: vals.to_vec() }
    }

    fn constant(h: usize, w: usize, level: f64) -> RenderedImage {
        RenderedImage::from_pixels(h, w, vec![level / 255.0; h * w])
    }

    /// Minimum over every monotone unit-step path from (0,0) to (n−1,m−1).
    fn brute_force(a: &ColumnSeries, b: &ColumnSeries) -> f64 {
        fn walk(a: &ColumnSeries, b: &ColumnSeries, i: usize, j: usize, acc: f64, best: &mut f64) {
            let acc = acc + column_cost(a.column(i), b.column(j));
            if i + 1 == a.len() && j + 1 == b.len() {
                *best = best.min(acc);
                return;
            }
            if i + 1 < a.len() {
                walk(a, b, i + 1, j, acc, best);
            }
            if j + 1 < b.len() {
                walk(a, b, i, j + 1, acc, best);
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                walk(a, b, i + 1, j + 1, acc, best);
            }
        }
        let mut best = f64::INFINITY;
        walk(a, b, 0, 0, 0.0, &mut best);
        best
    }

    #[test]
    fn binarize_threshold_convention() {
        let img = |v| RenderedImage::from_pixels(2, 3, vec![v; 6]);
        assert!(binarize(&img(0.4), THRESHOLD).data.iter().all(|&v| v == 0.0));
        assert!(binarize(&img(0.5), THRESHOLD).data.iter().all(|&v| v == 1.0));
        let mixed = RenderedImage::from_pixels(2, 2, vec![0.1, 0.9, 0.6, 0.2]);
        let s = binarize(&mixed, THRESHOLD);
        assert_eq!(s.column(0), &[0.0, 1.0]);
        assert_eq!(s.column(1), &[1.0, 0.0]);
        assert_eq!(binarize(&s.to_image(), THRESHOLD), s);
    }

    #[test]
    fn dtw_hand_values() {
        assert_eq!(dtw(&series(&[0.0]), &series(&[1.0])).unwrap(), 1.0);
        assert_eq!(dtw(&series(&[1.0, 2.0, 3.0]), &series(&[1.0, 3.0])).unwrap(), 1.0);
        assert_eq!(dtw(&series(&[]), &series(&[1.0])), Err(MetricsError::Empty));
        let two_d = ColumnSeries::from_columns(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let flat = ColumnSeries::from_columns(&[vec![0.0, 0.0]]);
        assert_eq!(dtw(&two_d, &flat).unwrap(), 2f64.sqrt());
    }

    proptest! {
        #[test]
        fn dtw_equals_path_enumeration(
            (a, b) in (1usize..3).prop_flat_map(|h| {
                let col = prop::collection::vec(0.0f64..4.0, h);
                (prop::collection::vec(col.clone(), 1..=6), prop::collection::vec(col, 1..=6))
            }),
        ) {
            let (a, b) = (ColumnSeries::from_columns(&a), ColumnSeries::from_columns(&b));
            let d = dtw(&a, &b).unwrap();
            prop_assert_eq!(d, brute_force(&a, &b));
            prop_assert_eq!(d, dtw(&b, &a).unwrap());
            prop_assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn pixel_metrics_vanish_only_on_equality(
            px in prop::collection::vec(0u8..=255, 64),
            flip in 0usize..64,
        ) {
            let a = RenderedImage::from_pixels(8, 8, px.iter().map(|&v| f64::from(v) / 255.0).collect());
            let m = pair_metrics(&a, &a);
            if let Ok(m) = m {
                prop_assert_eq!(m.rmse, 0.0);
                prop_assert_eq!(m.ergas, 0.0);
                prop_assert_eq!(m.rase, 0.0);
                prop_assert_eq!(m.psnr, PSNR_CAP);
            }
            let mut b = a.clone();
            b.pixels[flip] = if px[flip] > 127 { 0.0 } else { 1.0 };
            prop_assert!(rmse(&a, &b).unwrap() > 0.0);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert_eq!(s, ssim(&b, &a).unwrap());
        }
    }

    #[test]
    fn rmse_hand_values() {
        assert_eq!(rmse(&constant(4, 4, 0.0), &constant(4, 4, 255.0)).unwrap(), 255.0);
        let half = RenderedImage::from_pixels(2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        let e = rmse(&constant(2, 2, 0.0), &half).unwrap();
        assert!((e - 255.0 / 2f64.sqrt()).abs() < 1e-12 && (e - 180.31).abs() < 0.01);
        assert!(matches!(rmse(&constant(2, 2, 0.0), &constant(2, 3, 0.0)), Err(MetricsError::Shape(..))));
    }

    #[test]
    fn psnr_values() {
        assert_eq!(psnr(&constant(3, 3, 7.0), &constant(3, 3, 7.0)).unwrap(), 100.0);
        assert_eq!(psnr_from_rmse(255.0), 0.0);
        assert!((psnr_from_rmse(25.5) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_properties() {
        let checker = RenderedImage::from_pixels(16, 16, (0..256).map(|i| ((i / 16 + i % 16 / 2) % 2) as f64).collect());
        let neg = RenderedImage::from_pixels(16, 16, checker.pixels.iter().map(|p| 1.0 - p).collect());
        assert!((ssim(&checker, &checker).unwrap() - 1.0).abs() <= 1e-12);
        assert!(ssim(&checker, &neg).unwrap() < 0.0);
        assert_eq!(ssim(&checker, &neg).unwrap(), ssim(&neg, &checker).unwrap());
        let blank = constant(16, 16, 0.0);
        assert_eq!(ssim(&blank, &blank).unwrap(), 1.0);
    }

    #[test]
    fn relative_errors() {
        let reference = constant(4, 8, 100.0);
        let shifted = constant(4, 8, 110.0);
        assert!((rase(&reference, &shifted).unwrap() - 10.0).abs() < 1e-12);
        let e = rmse(&reference, &shifted).unwrap();
        assert!((ergas(&reference, &shifted).unwrap() - 100.0 * e / 100.0).abs() < 1e-12);
        assert_eq!(rase(&constant(2, 2, 0.0), &shifted.clone()).unwrap_err(), MetricsError::Shape((2, 2), (4, 8)));
        assert_eq!(ergas(&constant(4, 8, 0.0), &shifted), Err(MetricsError::ZeroMean));
        assert_eq!(rase(&constant(4, 8, 0.0), &shifted), Err(MetricsError::ZeroMean));
    }
}
