//! Bidirectional LSTM over the visual token sequence.

use crate::numerics::{Binding, ParamStore, Var};

pub(super) fn init(store: &mut ParamStore, seed: u64, prefix: &str, d: usize) {
    let h = d / 2;
    for dir in ["fwd", "bwd"] {
        store.init_normal(seed, &format!("{prefix}.{dir}.wx"), &[d, 4 * h], (1.0 / d as f64).sqrt());
        store.init_normal(seed, &format!("{prefix}.{dir}.wh"), &[h, 4 * h], (1.0 / h as f64).sqrt());
        // gate order i, f, g, o; forget gate starts open
        let mut bias = vec![0.0; 4 * h];
        bias[h..2 * h].fill(1.0);
        store.insert(
            format!("{prefix}.{dir}.b"),
            crate::numerics::DenseArray::new(vec![4 * h], bias).expect("bias shape"),
        );
    }
}

/// Runs one direction and returns its hidden states in position order.
fn run(b: &mut Binding, xs: Var, prefix: &str, reverse: bool) -> Var {
    let wx = b.p(&format!("{prefix}.wx"));
    let wh = b.p(&format!("{prefix}.wh"));
    let bias = b.p(&format!("{prefix}.b"));
    let m = b.tape.shape(xs)[0];
    let h = b.tape.shape(wh)[0];
    let gx = b.tape.matmul(xs, wx);
    let gx = b.tape.add_row(gx, bias);
    let mut state: Option<(Var, Var)> = None;
    let mut outs = vec![None; m];
    let order: Vec<usize> = if reverse { (0..m).rev().collect() } else { (0..m).collect() };
    for pos in order {
        let mut g = b.tape.slice_rows(gx, pos, pos + 1);
        if let Some((hp, _)) = state {
            let rec = b.tape.matmul(hp, wh);
            g = b.tape.add(g, rec);
        }
        let i = b.tape.slice_cols(g, 0, h);
        let i = b.tape.sigmoid(i);
        let f = b.tape.slice_cols(g, h, 2 * h);
        let f = b.tape.sigmoid(f);
        let c_in = b.tape.slice_cols(g, 2 * h, 3 * h);
        let c_in = b.tape.tanh(c_in);
        let o = b.tape.slice_cols(g, 3 * h, 4 * h);
        let o = b.tape.sigmoid(o);
        let mut c = b.tape.mul(i, c_in);
        if let Some((_, cp)) = state {
            let keep = b.tape.mul(f, cp);
            c = b.tape.add(c, keep);
        }
        let tc = b.tape.tanh(c);
        let hn = b.tape.mul(o, tc);
        outs[pos] = Some(hn);
        state = Some((hn, c));
    }
    let rows: Vec<Var> = outs.into_iter().map(|o| o.expect("every position visited")).collect();
    b.tape.concat_rows(&rows)
}

/// `M×D` to `M×D`: row `m` is `[forward_m, backward_m]`, each of width `D/2`.
pub fn bidir_context(b: &mut Binding, vs: Var) -> Var {
    bidir_context_with(b, vs, "enc.lstm")
}

pub(crate) fn bidir_context_with(b: &mut Binding, vs: Var, prefix: &str) -> Var {
    let fwd = run(b, vs, &format!("{prefix}.fwd"), false);
    let bwd = run(b, vs, &format!("{prefix}.bwd"), true);
    b.tape.concat_cols(&[fwd, bwd])
}
