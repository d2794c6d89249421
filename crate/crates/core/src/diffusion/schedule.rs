//! Linear variance schedule and the closed-form forward marginal.

use crate::error::ModelError;
use crate::numerics::DenseArray;

/// Per-step variances `β_1..β_T` with cumulative products `ᾱ_0..ᾱ_T`
/// (`ᾱ_0 = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_t` evenly spaced from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, ModelError> {
        if steps == 0 {
            return Err(ModelError::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(ModelError::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        if steps > 1 && beta_start == beta_end {
            return Err(ModelError::Config("beta must increase over the schedule".into()));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &beta {
            let prev = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `β_t` for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Variance of `q(y_{t−1} | y_t, y_0)`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Coefficients `(c_0, c_t)` of the posterior mean `c_0·y_0 + c_t·y_t`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let denom = 1.0 - self.alpha_bar(t);
        (
            self.alpha_bar(t - 1).sqrt() * self.beta(t) / denom,
            self.alpha(t).sqrt() * (1.0 - self.alpha_bar(t - 1)) / denom,
        )
    }

    /// Coefficient of `ε̂` in the reverse mean
    /// `(y_t − k·ε̂)/√α_t`, i.e. `k = β_t/√(1 − ᾱ_t)`.
    pub fn eps_coef(&self, t: usize) -> f64 {
        self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt()
    }

    pub fn check_step(&self, t: usize, allow_zero: bool) -> Result<(), ModelError> {
        let lo = if allow_zero { 0 } else { 1 };
        if t < lo || t > self.steps() {
            return Err(ModelError::Config(format!("step {t} outside {lo}..={}", self.steps())));
        }
        Ok(())
    }
}

/// `√ᾱ_t·y_0 + √(1 − ᾱ_t)·ε` for `t ∈ 0..=T`.
pub fn forward_sample(
    schedule: &NoiseSchedule,
    y0: &DenseArray,
    t: usize,
    eps: &DenseArray,
) -> Result<DenseArray, ModelError> {
    schedule.check_step(t, true)?;
    if y0.shape() != eps.shape() {
        return Err(ModelError::Shape(format!("y0 {:?} vs noise {:?}", y0.shape(), eps.shape())));
    }
    let (a, s) = (schedule.alpha_bar(t).sqrt(), (1.0 - schedule.alpha_bar(t)).sqrt());
    let data = y0.data().iter().zip(eps.data()).map(|(y, e)| a * y + s * e).collect();
    Ok(DenseArray::new(y0.shape().to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Purpose, RngStream};

    fn default() -> NoiseSchedule {
        NoiseSchedule::linear(50, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = default();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=50 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            if t > 1 {
                assert!(s.beta(t) > s.beta(t - 1));
            }
        }
        assert!((s.beta(50) - 0.02).abs() < 1e-15);
        assert_eq!(s.posterior_variance(1), 0.0);
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(5, 0.1, 0.01).is_err());
    }

    #[test]
    fn forward_sample_edges() {
        let s = default();
        let y0 = DenseArray::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let eps = DenseArray::new(vec![3], vec![1.0, 2.0, -3.0]).unwrap();
        assert_eq!(forward_sample(&s, &y0, 0, &eps).unwrap(), y0);
        let z = forward_sample(&s, &y0, 10, &DenseArray::zeros(&[3])).unwrap();
        for (a, b) in z.data().iter().zip(y0.data()) {
            assert_eq!(*a, s.alpha_bar(10).sqrt() * b);
        }
        assert!(forward_sample(&s, &y0, 51, &eps).is_err());
    }

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn terminal_variance_matches_closed_form() {
        let s = default();
        let y0 = DenseArray::scalar(0.7);
        let mut rng = RngStream::new(1, Purpose::Test, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| forward_sample(&s, &y0, 50, &DenseArray::scalar(rng.normal())).unwrap().data()[0])
            .collect();
        let (_, var) = moments(&xs);
        let expect = 1.0 - s.alpha_bar(50);
        // variance of the sample variance for a Gaussian
        let se = expect * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - expect).abs() <= 3.0 * se, "{var} vs {expect} ± {se}");
    }

    #[test]
    fn two_single_steps_compose_to_marginal() {
        let s = default();
        let y0 = 0.7;
        let mut rng = RngStream::new(2, Purpose::Test, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let y1 = s.alpha(1).sqrt() * y0 + s.beta(1).sqrt() * rng.normal();
                s.alpha(2).sqrt() * y1 + s.beta(2).sqrt() * rng.normal()
            })
            .collect();
        let (mean, var) = moments(&xs);
        let (m, v) = (s.alpha_bar(2).sqrt() * y0, 1.0 - s.alpha_bar(2));
        assert!((mean - m).abs() <= 3.0 * (v / n as f64).sqrt());
        assert!((var - v).abs() <= 3.0 * v * (2.0 / (n as f64 - 1.0)).sqrt());
    }
}
