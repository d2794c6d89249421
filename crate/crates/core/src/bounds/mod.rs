//! Tractable 1-D linear-Gaussian diffusion chains where the marginal
//! likelihood, the lower bound and the χ² upper bound can all be evaluated
//! against closed forms.

use std::f64::consts::PI;

use crate::numerics::{gaussian_kl_scalar, normal_log_pdf, NumericError, Purpose, RngStream};

/// Minimum Monte-Carlo sample count for bound estimates.
pub const MIN_SAMPLES: usize = 10_000;

/// `p(y_{t−1} | y_t) = N(scale·y_t + shift, var)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseStep {
    pub scale: f64,
    pub shift: f64,
    pub var: f64,
}

/// Forward kernels `q(y_t | y_{t−1}) = N(√(1−β_t)·y_{t−1}, β_t)` paired with
/// a linear-Gaussian generative chain.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianChain {
    pub beta: Vec<f64>,
    pub prior_mean: f64,
    pub prior_var: f64,
    /// `reverse[t − 1]` parameterises `p(y_{t−1} | y_t)`.
    pub reverse: Vec<ReverseStep>,
    /// Data distribution the exact reversal was built from.
    pub mu_star: f64,
    pub var_star: f64,
}

impl GaussianChain {
    /// Generative chain equal to the exact time reversal of the forward
    /// chain started at `N(mu_star, var_star)`, so its posterior equals the
    /// forward posterior.
    pub fn time_reversal(beta: &[f64], mu_star: f64, var_star: f64) -> Result<Self, NumericError> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) || !(var_star > 0.0) {
            return Err(NumericError::Invalid("need 0 < beta_t < 1, at least one step, var_star > 0".into()));
        }
        let (mut m, mut s) = (mu_star, var_star);
        let mut reverse = Vec::with_capacity(beta.len());
        for &b in beta {
            let sa = (1.0 - b).sqrt();
            let (m_next, s_next) = (sa * m, (1.0 - b) * s + b);
            let scale = sa * s / s_next;
            reverse.push(ReverseStep { scale, shift: m - scale * m_next, var: s * b / s_next });
            (m, s) = (m_next, s_next);
        }
        Ok(Self { beta: beta.to_vec(), prior_mean: m, prior_var: s, reverse, mu_star, var_star })
    }

    /// Adds `delta` to every reverse mean.
    pub fn with_mean_offset(mut self, delta: f64) -> Self {
        self.reverse.iter_mut().for_each(|r| r.shift += delta);
        self
    }

    /// Multiplies every reverse variance by `factor`.
    pub fn with_variance_scale(mut self, factor: f64) -> Self {
        self.reverse.iter_mut().for_each(|r| r.var *= factor);
        self
    }

    pub fn with_prior(mut self, mean: f64, var: f64) -> Self {
        self.prior_mean = mean;
        self.prior_var = var;
        self
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.beta[..t].iter().map(|b| 1.0 - b).product()
    }

    /// Mean and variance of the generative marginal `p(y_0)`.
    pub fn marginal(&self) -> (f64, f64) {
        let (mut m, mut s) = (self.prior_mean, self.prior_var);
        for r in self.reverse.iter().rev() {
            m = r.scale * m + r.shift;
            s = r.scale * r.scale * s + r.var;
        }
        (m, s)
    }

    /// `log p(y_{0:T})` for one full path `ys = [y_0, …, y_T]`.
    pub fn log_joint(&self, ys: &[f64]) -> f64 {
        let t = self.steps();
        let mut lp = normal_log_pdf(ys[t], self.prior_mean, self.prior_var);
        for (i, r) in self.reverse.iter().enumerate() {
            lp += normal_log_pdf(ys[i], r.scale * ys[i + 1] + r.shift, r.var);
        }
        lp
    }

    /// `log q(y_{1:T} | y_0)` for one full path.
    pub fn log_forward(&self, ys: &[f64]) -> f64 {
        self.beta
            .iter()
            .enumerate()
            .map(|(i, &b)| normal_log_pdf(ys[i + 1], (1.0 - b).sqrt() * ys[i], b))
            .sum()
    }

    /// Draws `y_1..y_T` from the forward chain, writing into `ys[1..]`.
    fn sample_forward(&self, ys: &mut [f64], rng: &mut RngStream) {
        for (i, &b) in self.beta.iter().enumerate() {
            ys[i + 1] = (1.0 - b).sqrt() * ys[i] + b.sqrt() * rng.normal();
        }
    }
}

/// Log-density of the chain's generative marginal at `y0`.
pub fn exact_loglik(chain: &GaussianChain, y0: f64) -> f64 {
    let (m, s) = chain.marginal();
    normal_log_pdf(y0, m, s)
}

/// Closed-form lower bound: reconstruction minus prior KL minus the
/// interior posterior KLs, each averaged over `q(y_t | y_0)` analytically.
pub fn elbo_exact(chain: &GaussianChain, y0: f64) -> Result<f64, NumericError> {
    let big_t = chain.steps();
    let ab = |t: usize| chain.alpha_bar(t);

    let r1 = chain.reverse[0];
    let (m1, v1) = (ab(1).sqrt() * y0, 1.0 - ab(1));
    let resid_mean = y0 - r1.scale * m1 - r1.shift;
    let recon = -0.5 * (2.0 * PI * r1.var).ln() - (resid_mean * resid_mean + r1.scale * r1.scale * v1) / (2.0 * r1.var);

    let prior = gaussian_kl_scalar(ab(big_t).sqrt() * y0, 1.0 - ab(big_t), chain.prior_mean, chain.prior_var)?;

    let mut interior = 0.0;
    for t in 2..=big_t {
        let b = chain.beta[t - 1];
        let denom = 1.0 - ab(t);
        let c0 = ab(t - 1).sqrt() * b / denom;
        let ct = (1.0 - b).sqrt() * (1.0 - ab(t - 1)) / denom;
        let post_var = b * (1.0 - ab(t - 1)) / denom;
        let r = chain.reverse[t - 1];
        // Δ = (c_t − scale)·y_t + c_0·y_0 − shift with y_t ~ q(y_t | y_0)
        let k = ct - r.scale;
        let mean_gap = k * ab(t).sqrt() * y0 + c0 * y0 - r.shift;
        let gap_sq = mean_gap * mean_gap + k * k * denom;
        interior += 0.5 * ((r.var / post_var).ln() + (post_var + gap_sq) / r.var - 1.0);
    }
    Ok(recon - prior - interior)
}

/// Bound values at one observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundEstimates {
    pub exact_logp: f64,
    pub elbo: f64,
    pub cubo: f64,
    pub cubo_stderr: f64,
    pub n_samples: usize,
}

/// `½ log mean(w²)` with `w = p(y_0, y_{1:T}) / q(y_{1:T} | y_0)` over `n`
/// forward paths. The standard error is the delta-method error of the
/// second moment.
pub fn cubo_estimate(chain: &GaussianChain, y0: f64, n: usize, seed: u64) -> Result<BoundEstimates, NumericError> {
    if n < MIN_SAMPLES {
        return Err(NumericError::Invalid(format!("need at least {MIN_SAMPLES} samples, got {n}")));
    }
    let mut rng = RngStream::new(seed, Purpose::MonteCarlo, 0);
    let mut ys = vec![0.0; chain.steps() + 1];
    ys[0] = y0;
    let mut two_log_w = Vec::with_capacity(n);
    for _ in 0..n {
        chain.sample_forward(&mut ys, &mut rng);
        two_log_w.push(2.0 * (chain.log_joint(&ys) - chain.log_forward(&ys)));
    }
    let shift = two_log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(NumericError::Degenerate("all importance weights vanish".into()));
    }
    let scaled: Vec<f64> = two_log_w.iter().map(|v| (v - shift).exp()).collect();
    let nf = n as f64;
    let mean = scaled.iter().sum::<f64>() / nf;
    let var = scaled.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    Ok(BoundEstimates {
        exact_logp: exact_loglik(chain, y0),
        elbo: elbo_exact(chain, y0)?,
        cubo: 0.5 * (shift + mean.ln()),
        cubo_stderr: 0.5 * (var / nf).sqrt() / mean,
        n_samples: n,
    })
}

/// Lower-bound pieces for a pair of coupled chains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointDecomposition {
    pub elbo_anchor: f64,
    pub elbo_positive: f64,
    /// Mutual information between `y_t` and `y_t'` estimated from the sample
    /// correlation of `n` coupled draws.
    pub mi_term: f64,
    pub mi_stderr: f64,
    pub joint: f64,
}

/// Runs both views through the same forward chain up to step `t` with
/// noise correlated at `rho` (`ε' = ρ·ε + √(1−ρ²)·ξ`) and splits the joint
/// bound into the two single-view bounds plus the mutual-information term
/// `−½ ln(1 − r²)`.
pub fn joint_positive_decomposition(
    chain: &GaussianChain,
    y0: f64,
    y0p: f64,
    rho: f64,
    t: usize,
    n: usize,
    seed: u64,
) -> Result<JointDecomposition, NumericError> {
    if !(0.0..1.0).contains(&rho.abs()) {
        return Err(NumericError::Invalid(format!("correlation {rho} outside (−1, 1)")));
    }
    if t == 0 || t > chain.steps() {
        return Err(NumericError::Invalid(format!("step {t} outside 1..={}", chain.steps())));
    }
    if n < MIN_SAMPLES {
        return Err(NumericError::Invalid(format!("need at least {MIN_SAMPLES} samples, got {n}")));
    }
    let (a, s) = (chain.alpha_bar(t).sqrt(), (1.0 - chain.alpha_bar(t)).sqrt());
    let mut rng = RngStream::new(seed, Purpose::MonteCarlo, 1);
    let c = (1.0 - rho * rho).sqrt();
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let e = rng.normal();
        let e2 = rho * e + c * rng.normal();
        let (x, y) = (a * y0 + s * e, a * y0p + s * e2);
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    let nf = n as f64;
    let cov = sxy / nf - (sx / nf) * (sy / nf);
    let (vx, vy) = (sxx / nf - (sx / nf).powi(2), syy / nf - (sy / nf).powi(2));
    let r = cov / (vx * vy).sqrt();
    let mi_term = -0.5 * (1.0 - r * r).ln();
    let (ea, ep) = (elbo_exact(chain, y0)?, elbo_exact(chain, y0p)?);
    Ok(JointDecomposition {
        elbo_anchor: ea,
        elbo_positive: ep,
        mi_term,
        mi_stderr: r.abs() / nf.sqrt(),
        joint: ea + ep + mi_term,
    })
}

/// A named chain and the observation it is evaluated at.
#[derive(Clone, Debug)]
pub struct ChainCase {
    pub name: &'static str,
    pub chain: GaussianChain,
    pub y0: f64,
    /// Generative posterior equals the forward posterior.
    pub posterior_exact: bool,
}

/// The fixed configurations the bound report runs over.
pub fn standard_chains() -> Vec<ChainCase> {
    let rev = |beta: &[f64], mu, var| GaussianChain::time_reversal(beta, mu, var).expect("valid chain");
    vec![
        ChainCase { name: "exact-reversal-t3", chain: rev(&[0.1, 0.2, 0.3], 0.5, 1.0), y0: 1.3, posterior_exact: true },
        ChainCase {
            name: "mean-offset-t3",
            chain: rev(&[0.1, 0.2, 0.3], 0.5, 1.0).with_mean_offset(0.3),
            y0: 0.2,
            posterior_exact: false,
        },
        ChainCase {
            name: "narrow-reverse-t4",
            chain: rev(&[0.05, 0.1, 0.15, 0.2], -0.3, 0.5).with_variance_scale(0.8),
            y0: -0.8,
            posterior_exact: false,
        },
        ChainCase {
            name: "offset-and-narrow-t5",
            chain: rev(&[0.02, 0.05, 0.1, 0.2, 0.4], 1.0, 2.0).with_mean_offset(-0.2).with_variance_scale(0.9),
            y0: 2.5,
            posterior_exact: false,
        },
        ChainCase {
            name: "standard-prior-t1",
            chain: rev(&[0.3], 0.8, 0.6).with_prior(0.0, 1.0),
            y0: 0.4,
            posterior_exact: false,
        },
        ChainCase {
            name: "far-observation-t2",
            chain: rev(&[0.2, 0.4], 0.0, 1.0).with_mean_offset(0.5),
            y0: 2.0,
            posterior_exact: false,
        },
    ]
}

/// One row of the bound report.
#[derive(Clone, Debug)]
pub struct ChainReport {
    pub name: &'static str,
    pub estimates: BoundEstimates,
    pub sandwich: bool,
}

/// Tolerance on the equality checks of the exact-posterior configuration.
pub const EXACT_TOL: f64 = 1e-10;

/// Sandwich check `elbo ≤ exact ≤ cubo + 3·stderr` for every standard
/// chain. For exact-posterior chains the lower bound must also be tight to
/// [`EXACT_TOL`].
pub fn verify_bounds(n: usize, seed: u64) -> Result<Vec<ChainReport>, NumericError> {
    standard_chains()
        .into_iter()
        .enumerate()
        .map(|(i, case)| {
            let est = cubo_estimate(&case.chain, case.y0, n, seed.wrapping_add(i as u64))?;
            let mut ok = est.elbo <= est.exact_logp + if case.posterior_exact { EXACT_TOL } else { 0.0 }
                && est.exact_logp <= est.cubo + 3.0 * est.cubo_stderr + if case.posterior_exact { EXACT_TOL } else { 0.0 };
            if case.posterior_exact {
                ok &= (est.elbo - est.exact_logp).abs() <= EXACT_TOL;
            }
            Ok(ChainReport { name: case.name, estimates: est, sandwich: ok })
        })
        .collect()
}

/// Plain-text table of a bound report.
pub fn format_report(rows: &[ChainReport]) -> String {
    let mut out = format!("{:<22} {:>14} {:>14} {:>14} {:>12}  {}\n", "chain", "elbo", "exact", "cubo", "stderr", "sandwich");
    for r in rows {
        let e = r.estimates;
        out.push_str(&format!(
            "{:<22} {:>14.8} {:>14.8} {:>14.8} {:>12.2e}  {}\n",
            r.name,
            e.elbo,
            e.exact_logp,
            e.cubo,
            e.cubo_stderr,
            if r.sandwich { "pass" } else { "FAIL" }
        ));
    }
    out
}
