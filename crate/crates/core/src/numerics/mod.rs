//! Dense-array math substrate: arrays, a reverse-mode tape, shared
//! probabilistic primitives, finite-difference gradient checking and
//! deterministic random streams.

mod array;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod tape;

pub use array::DenseArray;
pub use gradcheck::{grad_check, grad_check_store, grad_check_store_richardson, GradReport};
pub use params::{Binding, ParamStore};
pub use rng::{Purpose, RngStream};
pub use tape::{ConvGeom, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

/// Row-wise softmax of a rank-2 array, computed with max subtraction.
pub fn softmax_rows(m: &DenseArray) -> Result<DenseArray, NumericError> {
    let (rows, cols) = m.dims2()?;
    if let Some(pos) = m.data().iter().position(|x| !x.is_finite()) {
        return Err(NumericError::NonFinite(format!(
            "softmax input entry ({}, {}) is {}",
            pos / cols,
            pos % cols,
            m.data()[pos]
        )));
    }
    let out = tape::softmax_rows_raw(m.data(), cols, None);
    DenseArray::new(vec![rows, cols], out)
}

/// Summed KL divergence `KL(N(mu_q, var_q) ‖ N(mu_p, var_p))` over
/// elementwise-paired diagonal Gaussians.
pub fn gaussian_kl(mu_q: &[f64], var_q: &[f64], mu_p: &[f64], var_p: &[f64]) -> Result<f64, NumericError> {
    let n = mu_q.len();
    if var_q.len() != n || mu_p.len() != n || var_p.len() != n {
        return Err(NumericError::Shape("gaussian_kl arguments differ in length".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let (vq, vp) = (var_q[i], var_p[i]);
        if !(vq > 0.0 && vp > 0.0) {
            return Err(NumericError::Invalid(format!("variance must be positive, got {vq} and {vp} at {i}")));
        }
        let d = mu_p[i] - mu_q[i];
        total += 0.5 * (vq / vp + d * d / vp - 1.0 + (vp / vq).ln());
    }
    Ok(total)
}

/// Scalar convenience form of [`gaussian_kl`].
pub fn gaussian_kl_scalar(mu_q: f64, var_q: f64, mu_p: f64, var_p: f64) -> Result<f64, NumericError> {
    gaussian_kl(&[mu_q], &[var_q], &[mu_p], &[var_p])
}

/// Log-density of `N(mean, var)` at `x`.
pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&DenseArray::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&DenseArray::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap()).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let m = DenseArray::from_rows(&[vec![0.0, f64::NAN]]).unwrap();
        assert!(matches!(softmax_rows(&m), Err(NumericError::NonFinite(_))));
        let m = DenseArray::from_rows(&[vec![f64::INFINITY, 0.0]]).unwrap();
        assert!(softmax_rows(&m).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(gaussian_kl_scalar(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert!((gaussian_kl_scalar(1.0, 1.0, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let expected = (4.0 - 1.0 - 4f64.ln()) / 2.0;
        assert!((gaussian_kl_scalar(0.0, 4.0, 0.0, 1.0).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn kl_rejects_bad_variance() {
        assert!(gaussian_kl_scalar(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(gaussian_kl_scalar(0.0, 1.0, 0.0, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(row in prop::collection::vec(-1e3f64..1e3, 1..12)) {
            let m = DenseArray::from_rows(&[row]).unwrap();
            let s = softmax_rows(&m).unwrap();
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
            prop_assert!((s.sum() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(row in prop::collection::vec(-50f64..50.0, 1..8), c in -100f64..100.0) {
            let a = softmax_rows(&DenseArray::from_rows(&[row.clone()]).unwrap()).unwrap();
            let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
            let b = softmax_rows(&DenseArray::from_rows(&[shifted]).unwrap()).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn kl_nonnegative(mq in -5f64..5.0, vq in 0.01f64..10.0, mp in -5f64..5.0, vp in 0.01f64..10.0) {
            prop_assert!(gaussian_kl_scalar(mq, vq, mp, vp).unwrap() >= -1e-15);
            prop_assert!(gaussian_kl_scalar(mq, vq, mq, vq).unwrap().abs() <= 1e-12);
        }
    }
}
