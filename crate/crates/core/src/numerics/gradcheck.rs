//! Central-difference verification of reverse-mode gradients.

use std::fmt::Display;

use super::params::{Binding, ParamStore};
use super::rng::{Purpose, RngStream};
use super::tape::{Tape, Var};
use super::{DenseArray, NumericError};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_err: f64,
    /// Coordinate (into the flattened parameter vector) where it occurred.
    pub worst_index: usize,
    /// Name of the tensor holding `worst_index`, for store-level checks.
    pub worst_param: Option<String>,
    /// Number of coordinates compared.
    pub checked: usize,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn check_eps(eps: f64) -> Result<(), NumericError> {
    if (1e-6..=1e-3).contains(&eps) {
        Ok(())
    } else {
        Err(NumericError::Invalid(format!("finite-difference step {eps} outside [1e-6, 1e-3]")))
    }
}

fn eval_point(value: f64, at: &str) -> Result<f64, NumericError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(NumericError::NonFinite(format!("loss is {value} at {at}")))
    }
}

fn loss_err<E: Display>(e: E) -> NumericError {
    NumericError::Invalid(format!("loss evaluation failed: {e}"))
}

/// Compares the tape gradient of `loss` at `params` with central differences
/// on every coordinate.
pub fn grad_check<F, E>(loss: F, params: &DenseArray, eps: f64) -> Result<GradReport, NumericError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: Display,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let p = tape.param(params.clone());
    let out = loss(&mut tape, p).map_err(loss_err)?;
    eval_point(tape.scalar(out), "the base point")?;
    let analytic = tape.backward(out).get_or_zero(p, params.len());

    let eval = |x: &DenseArray| -> Result<f64, NumericError> {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let o = loss(&mut t, v).map_err(loss_err)?;
        Ok(t.scalar(o))
    };
    let mut report = GradReport { max_rel_err: 0.0, worst_index: 0, worst_param: None, checked: 0 };
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_point(eval(&probe)?, &format!("coordinate {i} + eps"))?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_point(eval(&probe)?, &format!("coordinate {i} - eps"))?;
        probe.data_mut()[i] = orig;
        let err = rel_err(analytic[i], (plus - minus) / (2.0 * eps));
        if err > report.max_rel_err || report.checked == 0 {
            report.max_rel_err = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Gradient check over every tensor of a parameter store. When
/// `max_per_tensor` is set, at most that many coordinates per tensor are
/// probed, chosen deterministically from `seed`.
pub fn grad_check_store<F, E>(
    store: &ParamStore,
    loss: F,
    eps: f64,
    max_per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradReport, NumericError>
where
    F: Fn(&mut Binding) -> Result<Var, E>,
    E: Display,
{
    store_check(store, loss, eps, max_per_tensor, seed, false)
}

/// As [`grad_check_store`], but each numeric derivative is the Richardson
/// combination `(4·D(ε/2) − D(ε)) / 3` of two central differences. This
/// cancels the `O(ε²)` truncation term, so a step large enough to resolve
/// tiny coordinates against a large loss stays accurate on curved ones.
pub fn grad_check_store_richardson<F, E>(
    store: &ParamStore,
    loss: F,
    eps: f64,
    max_per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradReport, NumericError>
where
    F: Fn(&mut Binding) -> Result<Var, E>,
    E: Display,
{
    check_eps(eps / 2.0)?;
    store_check(store, loss, eps, max_per_tensor, seed, true)
}

fn store_check<F, E>(
    store: &ParamStore,
    loss: F,
    eps: f64,
    max_per_tensor: Option<usize>,
    seed: u64,
    richardson: bool,
) -> Result<GradReport, NumericError>
where
    F: Fn(&mut Binding) -> Result<Var, E>,
    E: Display,
{
    check_eps(eps)?;
    let mut bind = Binding::new(store);
    let out = loss(&mut bind).map_err(loss_err)?;
    eval_point(bind.tape.scalar(out), "the base point")?;
    let grads = bind.tape.backward(out);
    let analytic = bind.param_grads(&grads);
    drop(bind);

    let eval = |s: &ParamStore| -> Result<f64, NumericError> {
        let mut b = Binding::frozen(s);
        let o = loss(&mut b).map_err(loss_err)?;
        Ok(b.tape.scalar(o))
    };

    let mut report = GradReport { max_rel_err: 0.0, worst_index: 0, worst_param: None, checked: 0 };
    let mut probe = store.clone();
    let mut offset = 0;
    let names: Vec<String> = store.names().cloned().collect();
    for (t_idx, name) in names.iter().enumerate() {
        let len = store.get(name).map_or(0, DenseArray::len);
        let coords: Vec<usize> = match max_per_tensor {
            Some(k) if k < len => {
                let mut rng = RngStream::new(seed, Purpose::Test, t_idx as u64);
                let mut all: Vec<usize> = (0..len).collect();
                for i in 0..k {
                    let j = i + rng.below(len - i);
                    all.swap(i, j);
                }
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..len).collect(),
        };
        for i in coords {
            let orig = store.get(name).expect("name from store").data()[i];
            let mut central = |h: f64| -> Result<f64, NumericError> {
                probe.get_mut(name).expect("name").data_mut()[i] = orig + h;
                let plus = eval_point(eval(&probe)?, &format!("{name}[{i}] + {h:e}"))?;
                probe.get_mut(name).expect("name").data_mut()[i] = orig - h;
                let minus = eval_point(eval(&probe)?, &format!("{name}[{i}] - {h:e}"))?;
                probe.get_mut(name).expect("name").data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = if richardson {
                let coarse = central(eps)?;
                (4.0 * central(eps / 2.0)? - coarse) / 3.0
            } else {
                central(eps)?
            };
            let err = rel_err(analytic[name][i], numeric);
            if err > report.max_rel_err || report.checked == 0 {
                report.max_rel_err = err;
                report.worst_index = offset + i;
                report.worst_param = Some(format!("{name}[{i}]"));
            }
            report.checked += 1;
        }
        offset += len;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::ConvGeom;

    fn random(shape: &[usize], seed: u64) -> DenseArray {
        let mut rng = RngStream::new(seed, Purpose::Test, 0);
        let n = shape.iter().product();
        DenseArray::new(shape.to_vec(), rng.normals(n)).unwrap()
    }

    #[test]
    fn half_squared_norm_is_exact() {
        let x = random(&[7], 1);
        let r = grad_check(
            |t: &mut Tape, p| -> Result<Var, NumericError> {
                let s = t.square(p);
                let s = t.sum(s);
                Ok(t.scale(s, 0.5))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "{r:?}");
        assert_eq!(r.checked, 7);
    }

    #[test]
    fn non_finite_perturbed_loss_is_reported() {
        // ln(x) at x = 1e-7 with eps 1e-6 steps into negative territory.
        let x = DenseArray::new(vec![1], vec![1e-7]).unwrap();
        let r = grad_check(
            |t: &mut Tape, p| -> Result<Var, NumericError> {
                let l = t.ln(p);
                Ok(t.sum(l))
            },
            &x,
            1e-6,
        );
        assert!(matches!(r, Err(NumericError::NonFinite(_))), "{r:?}");
    }

    #[test]
    fn rejects_step_outside_range() {
        let x = random(&[2], 2);
        let r = grad_check(|t: &mut Tape, p| -> Result<Var, NumericError> { Ok(t.sum(p)) }, &x, 1e-2);
        assert!(r.is_err());
    }

    /// Every tape primitive, composed into small scalar losses.
    #[test]
    fn primitives_pass() {
        type L = fn(&mut Tape, Var) -> Result<Var, NumericError>;
        let cases: Vec<(&str, Vec<usize>, L)> = vec![
            ("softmax", vec![3, 4], |t, p| {
                let s = t.softmax_rows(p);
                let w = t.constant(DenseArray::new(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect()).unwrap());
                let m = t.mul(s, w);
                Ok(t.sum(m))
            }),
            ("masked softmax", vec![2, 3], |t, p| {
                let s = t.softmax_rows_masked(p, Some(&[true, false, true]));
                let w = t.constant(DenseArray::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap());
                let m = t.mul(s, w);
                Ok(t.sum(m))
            }),
            ("matmul variants", vec![3, 3], |t, p| {
                let a = t.matmul(p, p);
                let b = t.matmul_nt(p, a);
                let c = t.matmul_tn(b, p);
                let s = t.tanh(c);
                Ok(t.sum(s))
            }),
            ("transpose + broadcast", vec![2, 3], |t, p| {
                let tr = t.transpose(p);
                let row = t.slice_rows(p, 0, 1);
                let col = t.slice_cols(p, 1, 2);
                let a = t.add_row(p, row);
                let b = t.add_col(a, col);
                let c = t.mul_row(b, row);
                let d = t.matmul(c, tr);
                let s = t.square(d);
                Ok(t.sum(s))
            }),
            ("activations", vec![5], |t, p| {
                let a = t.silu(p);
                let b = t.sigmoid(a);
                let c = t.exp(b);
                let d = t.ln(c);
                let e = t.clamp_max(d, 10.0);
                let f = t.div(e, c);
                let g = t.sub(f, p);
                let h = t.add_scalar(g, 0.3);
                let i = t.scale(h, 1.7);
                let s = t.square(i);
                Ok(t.mean(s))
            }),
            ("reductions", vec![2, 3, 2], |t, p| {
                let a = t.sum_axis(p, 1);
                let b = t.sum_axis(p, 0);
                let a2 = t.reshape(a, &[4]);
                let b2 = t.reshape(b, &[6]);
                let a3 = t.square(a2);
                let l1 = t.logsumexp(b2);
                let l2 = t.sum(a3);
                Ok(t.add(l1, l2))
            }),
            ("row normalize", vec![3, 4], |t, p| {
                let n = t.row_normalize(p)?;
                let w = t.constant(DenseArray::new(vec![3, 4], (0..12).map(|i| (i as f64).cos()).collect()).unwrap());
                let m = t.mul(n, w);
                Ok(t.sum(m))
            }),
            ("conv + upsample", vec![2, 4, 6], |t, p| {
                let w = t.constant(DenseArray::new(vec![3, 2, 3, 3], (0..54).map(|i| ((i * 7) as f64).sin()).collect()).unwrap());
                let b = t.constant(DenseArray::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap());
                let y = t.conv2d(p, w, b, ConvGeom { stride: 2, pad: 1 });
                let u = t.upsample2x(y);
                let s = t.silu(u);
                let q = t.square(s);
                Ok(t.sum(q))
            }),
            ("concat + gather", vec![4, 2], |t, p| {
                let g = t.gather_rows(p, &[3, 0, 3]);
                let r = t.concat_rows(&[g, p]);
                let c = t.concat_cols(&[r, r]);
                let s = t.tanh(c);
                let q = t.square(s);
                Ok(t.sum(q))
            }),
        ];
        for (i, (name, shape, f)) in cases.into_iter().enumerate() {
            let x = random(&shape, 10 + i as u64);
            let r = grad_check(f, &x, 1e-5).unwrap();
            assert!(r.max_rel_err <= 1e-6, "{name}: {r:?}");
        }
    }


    #[test]
    fn conv_weights_and_bias_pass() {
        let x = random(&[2, 5, 7], 30);
        let w0 = random(&[3, 2, 3, 3], 31);
        let r = grad_check(
            |t: &mut Tape, w| -> Result<Var, NumericError> {
                let xi = t.constant(x.clone());
                let b = t.slice_rows(w, 0, 1);
                let b = t.reshape(b, &[2 * 9]);
                let b = t.slice_rows(b, 0, 3);
                let y = t.conv2d(xi, w, b, ConvGeom { stride: 1, pad: 1 });
                let s = t.square(y);
                Ok(t.sum(s))
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "{r:?}");
    }

    #[test]
    fn store_check_covers_all_tensors() {
        let mut store = ParamStore::new();
        store.init_normal(5, "a", &[3, 2], 1.0);
        store.init_normal(5, "b", &[2], 1.0);
        let r = grad_check_store(
            &store,
            |g: &mut Binding| -> Result<Var, NumericError> {
                let a = g.p("a");
                let b = g.p("b");
                let y = g.tape.add_row(a, b);
                let y = g.tape.tanh(y);
                Ok(g.tape.sum(y))
            },
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert_eq!(r.checked, 8);
        assert!(r.max_rel_err <= 1e-6, "{r:?}");
    }

    #[test]
    fn richardson_removes_cubic_truncation() {
        let mut store = ParamStore::new();
        store.insert("x", DenseArray::new(vec![1], vec![0.7]).unwrap());
        let loss = |g: &mut Binding| -> Result<Var, NumericError> {
            let x = g.p("x");
            let c = g.tape.square(x);
            let c = g.tape.mul(c, x);
            Ok(g.tape.sum(c))
        };
        // Central differences of x³ carry an error of exactly ε², which the
        // extrapolation cancels.
        let plain = grad_check_store(&store, loss, 1e-3, None, 0).unwrap();
        let rich = grad_check_store_richardson(&store, loss, 1e-3, None, 0).unwrap();
        assert!(plain.max_rel_err > 5e-7, "{plain:?}");
        assert!(rich.max_rel_err < 1e-9, "{rich:?}");
        assert!(grad_check_store_richardson(&store, loss, 1.5e-6, None, 0).is_err());
    }
}
