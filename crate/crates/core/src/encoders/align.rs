//! Cross attention from markup tokens onto the visual sequence, and the
//! fine-grained alignment loss.

use crate::numerics::{Binding, DenseArray, NumericError, ParamStore, Tape, Var};

pub(super) fn init(store: &mut ParamStore, seed: u64, d: usize) {
    let std = (1.0 / d as f64).sqrt();
    for name in ["enc.cam.wq", "enc.cam.wk", "enc.cam.wv"] {
        store.init_normal(seed, name, &[d, d], std);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CamOutput {
    /// Aligned features, `N×D`.
    pub c: Var,
    /// Attention weights, `N×M`; rows sum to one.
    pub weights: Var,
}

/// `softmax(t W_q (h W_k)ᵀ / √D) · h W_v`, single head.
pub fn cam(b: &mut Binding, t: Var, h: Var) -> CamOutput {
    let (wq, wk, wv) = (b.p("enc.cam.wq"), b.p("enc.cam.wk"), b.p("enc.cam.wv"));
    let d = b.tape.shape(wk)[1];
    let q = b.tape.matmul(t, wq);
    let k = b.tape.matmul(h, wk);
    let v = b.tape.matmul(h, wv);
    let logits = b.tape.matmul_nt(q, k);
    let logits = b.tape.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = b.tape.softmax_rows(logits);
    let c = b.tape.matmul(weights, v);
    CamOutput { c, weights }
}

/// `1 + (1/N) Σ_ij W_ij cos(c_i, t_j)` with `W_ii = −1` and
/// `W_ij = 1/(N−1)` off the diagonal (zero when `N = 1`). Rows with norm
/// below `1e-12` are rejected.
pub fn fa_loss(tape: &mut Tape, c: Var, t: Var) -> Result<Var, NumericError> {
    let (n, d) = tape.value(c).dims2()?;
    if tape.value(t).dims2()? != (n, d) {
        return Err(NumericError::Shape(format!("fa_loss: c is {n}×{d}, t is {:?}", tape.shape(t))));
    }
    let cn = tape.row_normalize(c)?;
    let tn = tape.row_normalize(t)?;
    let cos = tape.matmul_nt(cn, tn);
    let off = if n > 1 { 1.0 / (n - 1) as f64 } else { 0.0 };
    let mut w = vec![off; n * n];
    for i in 0..n {
        w[i * n + i] = -1.0;
    }
    let weighted = tape.mul_const(cos, &DenseArray::new(vec![n, n], w)?);
    let s = tape.sum(weighted);
    let s = tape.scale(s, 1.0 / n as f64);
    Ok(tape.add_scalar(s, 1.0))
}
