//! Bound estimates and the combined training objective.

use serde::{Deserialize, Serialize};

use super::schedule::{forward_sample, NoiseSchedule};
use crate::ccam::{unet_eps, UnetConfig};
use crate::error::ModelError;
use crate::numerics::{gaussian_kl_scalar, Binding, DenseArray, Tape, Var};

/// Anything that predicts the noise in `y_t` given a markup condition.
pub trait EpsModel {
    fn predict_eps(&self, b: &mut Binding, y_t: Var, t: usize, cond: Var) -> Result<Var, ModelError>;
}

impl EpsModel for UnetConfig {
    fn predict_eps(&self, b: &mut Binding, y_t: Var, t: usize, cond: Var) -> Result<Var, ModelError> {
        unet_eps(b, self, y_t, t, cond)
    }
}

/// KL from `q(y_T | y_0)` to the standard normal prior, summed over
/// elements.
pub fn prior_kl(schedule: &NoiseSchedule, y0: &DenseArray) -> Result<f64, ModelError> {
    let t = schedule.steps();
    let (a, var) = (schedule.alpha_bar(t).sqrt(), 1.0 - schedule.alpha_bar(t));
    let mut total = 0.0;
    for &y in y0.data() {
        total += gaussian_kl_scalar(a * y, var, 0.0, 1.0)?;
    }
    Ok(total)
}

/// One sampled-step bound term.
#[derive(Clone, Debug)]
pub struct ElboTerm {
    /// The estimate `−KL_prior + T·step`.
    pub value: Var,
    /// `log p(y_0 | y_1)` at `t = 1`, otherwise `−KL_t`.
    pub step: Var,
    pub prior_kl: f64,
    pub y_t: DenseArray,
}

/// Single-step ELBO estimate at a given `t` and noise draw. The prior KL
/// is exact; the step term is scaled by `T` so that averaging over uniform
/// `t` recovers the full sum. At `t = 1` the decoder is Gaussian with
/// variance `β_1`; elsewhere both reverse Gaussians share variance `β̃_t`.
pub fn elbo_at<M: EpsModel + ?Sized>(
    b: &mut Binding,
    model: &M,
    schedule: &NoiseSchedule,
    y0: &DenseArray,
    cond: Var,
    t: usize,
    eps: &DenseArray,
) -> Result<ElboTerm, ModelError> {
    schedule.check_step(t, false)?;
    let y_t = forward_sample(schedule, y0, t, eps)?;
    let yv = b.constant(y_t.clone());
    let eps_hat = model.predict_eps(b, yv, t, cond)?;
    if b.tape.shape(eps_hat) != y0.shape() {
        return Err(ModelError::Shape(format!("model output {:?} vs image {:?}", b.tape.shape(eps_hat), y0.shape())));
    }
    let sa = schedule.alpha(t).sqrt();
    let shifted = b.tape.scale(eps_hat, -schedule.eps_coef(t) / sa);
    let base = b.constant(y_t.map(|y| y / sa));
    let model_mean = b.tape.add(base, shifted);
    let step = if t == 1 {
        let beta = schedule.beta(1);
        let target = b.constant(y0.clone());
        let diff = b.tape.sub(target, model_mean);
        let sq = b.tape.square(diff);
        let sq = b.tape.sum(sq);
        let norm = -0.5 * y0.len() as f64 * (2.0 * std::f64::consts::PI * beta).ln();
        let ll = b.tape.scale(sq, -0.5 / beta);
        b.tape.add_scalar(ll, norm)
    } else {
        let (c0, ct) = schedule.posterior_mean_coefs(t);
        let post: Vec<f64> = y0.data().iter().zip(y_t.data()).map(|(a, y)| c0 * a + ct * y).collect();
        let post = b.constant(DenseArray::new(y0.shape().to_vec(), post)?);
        let diff = b.tape.sub(post, model_mean);
        let sq = b.tape.square(diff);
        let sq = b.tape.sum(sq);
        b.tape.scale(sq, -0.5 / schedule.posterior_variance(t))
    };
    let prior = prior_kl(schedule, y0)?;
    let scaled = b.tape.scale(step, schedule.steps() as f64);
    let value = b.tape.add_scalar(scaled, -prior);
    Ok(ElboTerm { value, step, prior_kl: prior, y_t })
}

/// Denominator of the contrastive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClDenominator {
    NegativesOnly,
    #[default]
    WithPositive,
}

/// `log[e^{s⁺/τ} / (e^{s⁺/τ} + Σ_k e^{s_k/τ})]` on L2-normalised flattened
/// inputs, or without the positive in the denominator for
/// [`ClDenominator::NegativesOnly`].
pub fn contrastive_loss(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
    tau: f64,
    mode: ClDenominator,
) -> Result<Var, ModelError> {
    if negatives.is_empty() {
        return Err(ModelError::Config("contrastive loss needs at least one negative".into()));
    }
    if !(tau > 0.0) {
        return Err(ModelError::Config(format!("temperature must be positive, got {tau}")));
    }
    let unit = |tape: &mut Tape, v: Var| -> Result<Var, ModelError> {
        let n = tape.value(v).len();
        let r = tape.reshape(v, &[1, n]);
        Ok(tape.row_normalize(r)?)
    };
    let za = unit(tape, anchor)?;
    let zp = unit(tape, positive)?;
    let pos = tape.matmul_nt(za, zp);
    let pos = tape.scale(pos, 1.0 / tau);
    let mut terms = Vec::with_capacity(negatives.len() + 1);
    if mode == ClDenominator::WithPositive {
        terms.push(pos);
    }
    for &n in negatives {
        let zn = unit(tape, n)?;
        let s = tape.matmul_nt(za, zn);
        terms.push(tape.scale(s, 1.0 / tau));
    }
    let all = tape.concat_cols(&terms);
    let lse = tape.logsumexp(all);
    let pos = tape.reshape(pos, &[1]);
    Ok(tape.sub(pos, lse))
}

/// Weights of the combined objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the negative-sample upper-bound term.
    pub lambda: f64,
    /// Weight of the alignment loss.
    pub beta_fa: f64,
    pub tau: f64,
    pub num_negatives: usize,
    pub exp_clamp: f64,
    pub cl_denominator: ClDenominator,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.005, beta_fa: 0.02, tau: 0.5, num_negatives: 5, exp_clamp: 10.0, cl_denominator: ClDenominator::WithPositive }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lambda >= 0.0 && self.beta_fa >= 0.0) {
            return Err(ModelError::Config("lambda and beta_fa must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(ModelError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.num_negatives == 0 {
            return Err(ModelError::Config("num_negatives must be at least 1".into()));
        }
        if !self.exp_clamp.is_finite() {
            return Err(ModelError::Config("exp_clamp must be finite".into()));
        }
        Ok(())
    }
}

/// Scalar values of every objective component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBundle {
    pub l_fa: f64,
    pub elbo_anchor: f64,
    pub elbo_pos: f64,
    pub eubo_neg_term: f64,
    pub l_cl: f64,
    pub total: f64,
}

impl LossBundle {
    /// `β·l_fa − elbo_anchor − elbo_pos + λ·eubo_neg_term − l_cl`, evaluated
    /// in the same order as the tape.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.beta_fa * self.l_fa - self.elbo_anchor - self.elbo_pos + w.lambda * self.eubo_neg_term - self.l_cl
    }

    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("l_fa", self.l_fa),
            ("elbo_anchor", self.elbo_anchor),
            ("elbo_pos", self.elbo_pos),
            ("eubo_neg_term", self.eubo_neg_term),
            ("l_cl", self.l_cl),
            ("total", self.total),
        ]
    }
}

/// Tape handles of the objective components.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_fa: Var,
    pub elbo_anchor: Var,
    pub elbo_pos: Var,
    pub eubo_neg_term: Var,
    pub l_cl: Var,
    pub total: Var,
}

/// Inputs of one objective evaluation, all images as `1×H×W` signals.
pub struct ObjectiveInputs<'a> {
    /// Markup condition rows for the anchor.
    pub cond: Var,
    /// Alignment loss already placed on the tape.
    pub l_fa: Var,
    pub anchor: &'a DenseArray,
    pub positive: &'a DenseArray,
    pub negatives: &'a [DenseArray],
    pub t: usize,
    pub eps: &'a DenseArray,
}

/// Assembles the combined objective from one shared `(t, ε)` draw. The
/// negatives are scored under the anchor's condition.
pub fn total_loss<M: EpsModel + ?Sized>(
    b: &mut Binding,
    model: &M,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    inputs: &ObjectiveInputs,
) -> Result<(LossVars, LossBundle), ModelError> {
    weights.validate()?;
    if inputs.negatives.is_empty() {
        return Err(ModelError::Config("objective needs at least one negative".into()));
    }
    let (t, eps, cond) = (inputs.t, inputs.eps, inputs.cond);
    let ea = elbo_at(b, model, schedule, inputs.anchor, cond, t, eps)?;
    let ep = elbo_at(b, model, schedule, inputs.positive, cond, t, eps)?;
    let mut exps = Vec::with_capacity(inputs.negatives.len());
    let mut neg_noised = Vec::with_capacity(inputs.negatives.len());
    for neg in inputs.negatives {
        let en = elbo_at(b, model, schedule, neg, cond, t, eps)?;
        let twice = b.tape.scale(en.value, 2.0);
        let capped = b.tape.clamp_max(twice, weights.exp_clamp);
        exps.push(b.tape.exp(capped));
        neg_noised.push(en.y_t);
    }
    let stacked = b.tape.concat_rows(&exps);
    let eubo = b.tape.mean(stacked);

    let za = b.constant(ea.y_t.clone());
    let zp = b.constant(ep.y_t.clone());
    let zn: Vec<Var> = neg_noised.into_iter().map(|y| b.constant(y)).collect();
    let l_cl = contrastive_loss(&mut b.tape, za, zp, &zn, weights.tau, weights.cl_denominator)?;

    let total = b.tape.scale(inputs.l_fa, weights.beta_fa);
    let total = b.tape.sub(total, ea.value);
    let total = b.tape.sub(total, ep.value);
    let neg = b.tape.scale(eubo, weights.lambda);
    let total = b.tape.add(total, neg);
    let total = b.tape.sub(total, l_cl);

    let vars = LossVars { l_fa: inputs.l_fa, elbo_anchor: ea.value, elbo_pos: ep.value, eubo_neg_term: eubo, l_cl, total };
    let bundle = LossBundle {
        l_fa: b.tape.scalar(vars.l_fa),
        elbo_anchor: b.tape.scalar(vars.elbo_anchor),
        elbo_pos: b.tape.scalar(vars.elbo_pos),
        eubo_neg_term: b.tape.scalar(vars.eubo_neg_term),
        l_cl: b.tape.scalar(vars.l_cl),
        total: b.tape.scalar(vars.total),
    };
    for (what, value) in bundle.components() {
        if !value.is_finite() {
            return Err(ModelError::NonFinite { what: what.to_owned(), value });
        }
    }
    Ok((vars, bundle))
}
