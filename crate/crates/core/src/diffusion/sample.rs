//! Ancestral sampling through the learned reverse chain.

use super::objective::EpsModel;
use super::schedule::NoiseSchedule;
use super::signal_to_image;
use crate::corpus::RenderedImage;
use crate::error::ModelError;
use crate::numerics::{Binding, DenseArray, ParamStore, RngStream};

/// Starts from `y_T ~ N(0, I)` and applies the reverse mean plus
/// `√β̃_t`-scaled noise for `t = T..2`; the final step adds no noise. The
/// result is mapped back to pixel range and clipped to `[0, 1]`.
pub fn ddpm_sample<M: EpsModel + ?Sized>(
    store: &ParamStore,
    model: &M,
    schedule: &NoiseSchedule,
    cond: &DenseArray,
    height: usize,
    width: usize,
    rng: &mut RngStream,
) -> Result<RenderedImage, ModelError> {
    let n = height * width;
    let mut y = rng.normals(n);
    for t in (1..=schedule.steps()).rev() {
        let mut b = Binding::frozen(store);
        let yv = b.constant(DenseArray::new(vec![1, height, width], y.clone())?);
        let c = b.constant(cond.clone());
        let eps = model.predict_eps(&mut b, yv, t, c)?;
        let eps = b.tape.value(eps).data();
        let (k, sa) = (schedule.eps_coef(t), schedule.alpha(t).sqrt());
        for (yi, e) in y.iter_mut().zip(eps) {
            *yi = (*yi - k * e) / sa;
        }
        if t > 1 {
            let sd = schedule.posterior_variance(t).sqrt();
            for yi in y.iter_mut() {
                *yi += sd * rng.normal();
            }
        }
        if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { what: format!("sample at step {t}"), value: *bad });
        }
    }
    Ok(signal_to_image(&DenseArray::new(vec![1, height, width], y)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Purpose, Var};

    /// Predicts the noise that would have produced `y_t` from a fixed image.
    struct Oracle {
        y0: Vec<f64>,
        schedule: NoiseSchedule,
    }

    impl EpsModel for Oracle {
        fn predict_eps(&self, b: &mut Binding, y_t: Var, t: usize, _: Var) -> Result<Var, ModelError> {
            let ab = self.schedule.alpha_bar(t);
            let v = b.tape.value(y_t).clone();
            let data = v.data().iter().zip(&self.y0).map(|(y, x)| (y - ab.sqrt() * x) / (1.0 - ab).sqrt()).collect();
            Ok(b.constant(DenseArray::new(v.shape().to_vec(), data)?))
        }
    }

    #[test]
    fn oracle_model_recovers_image() {
        let schedule = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let truth: Vec<f64> = (0..32).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let model = Oracle { y0: truth.clone(), schedule: schedule.clone() };
        let store = ParamStore::new();
        let cond = DenseArray::zeros(&[1, 1]);
        let mut rng = RngStream::new(1, Purpose::Sampling, 0);
        let img = ddpm_sample(&store, &model, &schedule, &cond, 4, 8, &mut rng).unwrap();
        for (p, y) in img.pixels.iter().zip(&truth) {
            assert!((p - (y + 1.0) / 2.0).abs() < 1e-9);
        }
        let mut rng2 = RngStream::new(1, Purpose::Sampling, 0);
        assert_eq!(img, ddpm_sample(&store, &model, &schedule, &cond, 4, 8, &mut rng2).unwrap());
    }

    #[test]
    fn output_is_clipped() {
        struct Zero;
        impl EpsModel for Zero {
            fn predict_eps(&self, b: &mut Binding, y_t: Var, _: usize, _: Var) -> Result<Var, ModelError> {
                Ok(b.tape.scale(y_t, 0.0))
            }
        }
        let schedule = NoiseSchedule::linear(10, 1e-2, 0.2).unwrap();
        let mut rng = RngStream::new(2, Purpose::Sampling, 0);
        let img = ddpm_sample(&ParamStore::new(), &Zero, &schedule, &DenseArray::zeros(&[1, 1]), 8, 8, &mut rng).unwrap();
        assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(img.pixels.iter().any(|&p| p == 0.0 || p == 1.0));
    }
}
