//! Context-aware cross attention over visual feature maps, and the U-Net
//! noise estimator that hosts it.
//!
//! A block runs self-attention over the flattened feature positions, then
//! two parallel branches whose queries are those same positions: character
//! attention over the markup tokens, and context attention whose queries
//! come from a global-context relation matrix and whose keys and values
//! span the visual positions and the projected markup tokens together. The
//! branch outputs are summed, projected back to the channel width and added
//! to the self-attention output.

mod unet;

pub use unet::{init_unet, timestep_embedding, unet_eps, UnetConfig};

use crate::numerics::{Binding, ParamStore, Var};

/// Attention output plus its row-stochastic weight matrix.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub out: Var,
    pub weights: Var,
}

/// Widths shared by every attention layer of one block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockDims {
    /// Channel width of the visual stream.
    pub channels: usize,
    /// Width of markup token rows.
    pub markup: usize,
    /// `d_q = d_k = d_v`.
    pub attn: usize,
}

fn init_linear(store: &mut ParamStore, seed: u64, name: &str, fan_in: usize, fan_out: usize) {
    store.init_normal(seed, name, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
}

/// Parameters of one CCAM block under `prefix`.
pub fn init_ccam_block(store: &mut ParamStore, seed: u64, prefix: &str, dims: BlockDims) {
    let BlockDims { channels: c, markup: dm, attn: d } = dims;
    for (name, fi, fo) in [
        ("sa.wq", c, d),
        ("sa.wk", c, d),
        ("sa.wv", c, d),
        ("sa.wo", d, c),
        ("cha.wq", c, d),
        ("cha.wk", dm, d),
        ("cha.wv", dm, d),
        ("coa.wg", c, c),
        ("coa.wr", c, d),
        ("coa.wt", dm, c),
        ("coa.wk", c, d),
        ("coa.wv", c, d),
        ("fuse", d, c),
    ] {
        init_linear(store, seed, &format!("{prefix}.{name}"), fi, fo);
    }
    store.init_normal(seed, &format!("{prefix}.coa.ctx"), &[c, 1], (1.0 / c as f64).sqrt());
    store.init_zeros(&format!("{prefix}.coa.bg"), &[c]);
}

/// Parameters of a conventional cross-attention layer under `prefix`.
pub fn init_cross_attention(store: &mut ParamStore, seed: u64, prefix: &str, dims: BlockDims) {
    let BlockDims { channels: c, markup: dm, attn: d } = dims;
    init_linear(store, seed, &format!("{prefix}.wq"), c, d);
    init_linear(store, seed, &format!("{prefix}.wk"), dm, d);
    init_linear(store, seed, &format!("{prefix}.wv"), dm, d);
    init_linear(store, seed, &format!("{prefix}.wo"), d, c);
}

fn attend(b: &mut Binding, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Attended {
    let d = b.tape.shape(k)[1];
    let logits = b.tape.matmul_nt(q, k);
    let logits = b.tape.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = b.tape.softmax_rows_masked(logits, mask);
    Attended { out: b.tape.matmul(weights, v), weights }
}

/// `C×H×W` to `HW×C`.
pub fn flatten_positions(b: &mut Binding, x: Var) -> Var {
    let s = b.tape.shape(x).to_vec();
    let r = b.tape.reshape(x, &[s[0], s[1] * s[2]]);
    b.tape.transpose(r)
}

/// `HW×C` back to `C×H×W`.
pub fn unflatten_positions(b: &mut Binding, x: Var, h: usize, w: usize) -> Var {
    let c = b.tape.shape(x)[1];
    let t = b.tape.transpose(x);
    b.tape.reshape(t, &[c, h, w])
}

/// Single-head self-attention over `HW×C` positions with output projection
/// and residual: `v + softmax(q kᵀ/√d) v W_v W_o`.
pub fn self_attention(b: &mut Binding, prefix: &str, v: Var) -> Attended {
    let (wq, wk, wv, wo) = (
        b.p(&format!("{prefix}.sa.wq")),
        b.p(&format!("{prefix}.sa.wk")),
        b.p(&format!("{prefix}.sa.wv")),
        b.p(&format!("{prefix}.sa.wo")),
    );
    let q = b.tape.matmul(v, wq);
    let k = b.tape.matmul(v, wk);
    let val = b.tape.matmul(v, wv);
    let a = attend(b, q, k, val, None);
    let proj = b.tape.matmul(a.out, wo);
    Attended { out: b.tape.add(v, proj), weights: a.weights }
}

/// Visual positions attend over markup tokens: `HW×d`. `mask[j] == false`
/// removes token `j`.
pub fn character_attention(b: &mut Binding, prefix: &str, v_sa: Var, t: Var, mask: Option<&[bool]>) -> Attended {
    let (wq, wk, wv) = (
        b.p(&format!("{prefix}.cha.wq")),
        b.p(&format!("{prefix}.cha.wk")),
        b.p(&format!("{prefix}.cha.wv")),
    );
    let q = b.tape.matmul(v_sa, wq);
    let k = b.tape.matmul(t, wk);
    let val = b.tape.matmul(t, wv);
    attend(b, q, k, val, mask)
}

/// Relation matrix and the queries derived from it.
#[derive(Clone, Copy, Debug)]
pub struct Relation {
    /// `HW×C`, row `i` is `v_i ⊙ (g W_g + b_g)`.
    pub r: Var,
    /// `1×HW` context pooling weights.
    pub pool: Var,
    /// `HW×d` queries `R Ψ_R`.
    pub q: Var,
}

/// Global-context pooling `g = Σ_j softmax_j(v_j · w) v_j`, per-position
/// interaction with the transformed descriptor, then the query projection.
pub fn relation_queries(b: &mut Binding, prefix: &str, v: Var) -> Relation {
    let (ctx, wg, bg, wr) = (
        b.p(&format!("{prefix}.coa.ctx")),
        b.p(&format!("{prefix}.coa.wg")),
        b.p(&format!("{prefix}.coa.bg")),
        b.p(&format!("{prefix}.coa.wr")),
    );
    let logits = b.tape.matmul(v, ctx);
    let logits = b.tape.transpose(logits);
    let pool = b.tape.softmax_rows(logits);
    let g = b.tape.matmul(pool, v);
    let tg = b.tape.matmul(g, wg);
    let tg = b.tape.add_row(tg, bg);
    let r = b.tape.mul_row(v, tg);
    let q = b.tape.matmul(r, wr);
    Relation { r, pool, q }
}

/// Queries `q` attend over the stacked rows `[v; t W_t]` (`HW + N` rows).
/// `mask` covers those stacked rows in that order.
pub fn context_attention(b: &mut Binding, prefix: &str, q: Var, v: Var, t: Var, mask: Option<&[bool]>) -> Attended {
    let (wt, wk, wv) = (
        b.p(&format!("{prefix}.coa.wt")),
        b.p(&format!("{prefix}.coa.wk")),
        b.p(&format!("{prefix}.coa.wv")),
    );
    let tp = b.tape.matmul(t, wt);
    let phi = b.tape.concat_rows(&[v, tp]);
    let k = b.tape.matmul(phi, wk);
    let val = b.tape.matmul(phi, wv);
    attend(b, q, k, val, mask)
}

/// One CCAM block on `HW×C` positions: `v_sa + (ChA + CoA) W_fuse`.
pub fn ccam_block(b: &mut Binding, prefix: &str, v_in: Var, t: Var) -> Var {
    let v_sa = self_attention(b, prefix, v_in).out;
    let cha = character_attention(b, prefix, v_sa, t, None).out;
    let rel = relation_queries(b, prefix, v_sa);
    let coa = context_attention(b, prefix, rel.q, v_sa, t, None).out;
    let both = b.tape.add(cha, coa);
    let fuse = b.p(&format!("{prefix}.fuse"));
    let fused = b.tape.matmul(both, fuse);
    b.tape.add(v_sa, fused)
}

/// Conventional cross attention with residual: `x + softmax(q kᵀ/√d) v W_o`
/// where queries come from `x` and keys/values from the markup.
pub fn cross_attention(b: &mut Binding, prefix: &str, x: Var, t: Var) -> Var {
    let (wq, wk, wv, wo) = (
        b.p(&format!("{prefix}.wq")),
        b.p(&format!("{prefix}.wk")),
        b.p(&format!("{prefix}.wv")),
        b.p(&format!("{prefix}.wo")),
    );
    let q = b.tape.matmul(x, wq);
    let k = b.tape.matmul(t, wk);
    let val = b.tape.matmul(t, wv);
    let a = attend(b, q, k, val, None);
    let proj = b.tape.matmul(a.out, wo);
    b.tape.add(x, proj)
}
