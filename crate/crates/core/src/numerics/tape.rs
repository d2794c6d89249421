//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward evaluation as a node
//! holding its output value. [`Tape::backward`] walks the nodes in reverse
//! and accumulates vector-Jacobian products into [`Gradients`]. Nodes that do
//! not depend on any differentiable leaf are never visited on the way back.
//!
//! A tape is single-use and owned by one evaluation; it is `Send` but not
//! shared.
//!
//! Shape mismatches inside the tape are programming errors and panic with the
//! offending shapes. Data-dependent failures (degenerate norms, non-finite
//! inputs) surface as [`NumericError`].

use super::array::{gemm, DenseArray};
use super::NumericError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over a single `C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_extent(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    ClampMax(Var, f64),
    SumAll(Var),
    SumAxis { x: Var, outer: usize, extent: usize, inner: usize },
    LogSumExp(Var),
    RowNormalize { x: Var, norms: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64>, kernel: usize },
    Upsample2x(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, idx: Vec<usize> },
}

struct Node {
    value: DenseArray,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every differentiable node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` when `v` does not influence the
    /// output through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn same_shape(a: &DenseArray, b: &DenseArray, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

fn zip_map(a: &DenseArray, b: &DenseArray, f: impl Fn(f64, f64) -> f64) -> DenseArray {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    DenseArray::from_parts(a.shape().to_vec(), data)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction. Entries whose `mask` column is
/// `false` receive probability exactly zero.
pub(crate) fn softmax_rows_raw(data: &[f64], cols: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let keep = |j: usize| mask.map_or(true, |m| m[j]);
        let max = (0..cols).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..cols {
            if keep(j) {
                let e = (row[j] - max).exp();
                dst[j] = e;
                total += e;
            }
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, geom: ConvGeom) -> (Vec<f64>, usize, usize) {
    let ho = geom.out_extent(h, k);
    let wo = geom.out_extent(w, k);
    let l = ho * wo;
    let mut cols = vec![0.0; c * k * k * l];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, geom: ConvGeom, ho: usize, wo: usize, dx: &mut [f64]) {
    let l = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseArray, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: DenseArray) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on shape {:?}", val.shape());
        val.data()[0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "add");
        let out = zip_map(va, vb, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "sub");
        let out = zip_map(va, vb, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "mul");
        let out = zip_map(va, vb, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "div");
        let out = zip_map(va, vb, |x, y| x / y);
        self.push(out, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &DenseArray) -> Var {
        let va = self.value(a);
        same_shape(va, c, "mul_const");
        let out = zip_map(va, c, |x, y| x * y);
        self.push(out, Op::MulConst(a, c.data().to_vec()), &[a])
    }

    /// Adds a length-`n` vector to every row of an `m×n` array.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (m, n) = self.value(x).dims2().expect("add_row lhs");
        assert_eq!(self.value(b).len(), n, "add_row: bias length");
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        self.push(DenseArray::from_parts(vec![m, n], out), Op::AddRow(x, b), &[x, b])
    }

    /// Adds a length-`m` vector to every column of an `m×n` array.
    pub fn add_col(&mut self, x: Var, b: Var) -> Var {
        let (m, n) = self.value(x).dims2().expect("add_col lhs");
        assert_eq!(self.value(b).len(), m, "add_col: bias length");
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (row, bb) in out.chunks_mut(n).zip(&bias) {
            for o in row.iter_mut() {
                *o += bb;
            }
        }
        self.push(DenseArray::from_parts(vec![m, n], out), Op::AddCol(x, b), &[x, b])
    }

    /// Multiplies every row of an `m×n` array elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let (m, n) = self.value(x).dims2().expect("mul_row lhs");
        assert_eq!(self.value(g).len(), n, "mul_row: gate length");
        let gate = self.value(g).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, gg) in row.iter_mut().zip(&gate) {
                *o *= gg;
            }
        }
        self.push(DenseArray::from_parts(vec![m, n], out), Op::MulRow(x, g), &[x, g])
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = self.value(a).dims2().expect("matmul lhs");
        let (br, bc) = self.value(b).dims2().expect("matmul rhs");
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul: inner extents {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), ta, self.value(b).data(), tb, 0.0, &mut out);
        self.push(
            DenseArray::from_parts(vec![m, n], out),
            Op::MatMul { a, b, ta, tb, m, k, n },
            &[a, b],
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true, false)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose2().expect("transpose");
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape).expect("reshape");
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Row-wise softmax of a rank-2 array.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_rows_masked(a, None)
    }

    /// Row-wise softmax where columns with `mask[j] == false` are excluded
    /// (probability exactly zero, no gradient).
    pub fn softmax_rows_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let (m, n) = self.value(a).dims2().expect("softmax lhs");
        if let Some(mk) = mask {
            assert_eq!(mk.len(), n, "softmax mask length");
            assert!(mk.iter().any(|&k| k), "softmax mask removes every column");
        }
        let out = softmax_rows_raw(self.value(a).data(), n, mask);
        self.push(DenseArray::from_parts(vec![m, n], out), Op::Softmax(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    /// `min(x, cap)`; the gradient is zero wherever the cap is active.
    pub fn clamp_max(&mut self, a: Var, cap: f64) -> Var {
        let out = self.value(a).map(|x| x.min(cap));
        self.push(out, Op::ClampMax(a, cap), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = DenseArray::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out one axis; the result drops that axis (a rank-1 input yields
    /// shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert!(axis < shape.len(), "sum_axis: axis {axis} out of range for {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut new_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        self.push(DenseArray::from_parts(new_shape, out), Op::SumAxis { x: a, outer, extent, inner }, &[a])
    }

    /// `log Σ exp(x)` over every element, computed stably.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = d.iter().map(|x| (x - max).exp()).sum();
        self.push(DenseArray::scalar(max + s.ln()), Op::LogSumExp(a), &[a])
    }

    /// Scales each row of a rank-2 array to unit L2 norm. Rows with norm
    /// below `1e-12` are rejected.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var, NumericError> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for (i, row) in src.chunks(n).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm >= 1e-12) {
                return Err(NumericError::Degenerate(format!("row {i} has norm {norm:e}")));
            }
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = x / norm;
            }
            norms.push(norm);
        }
        Ok(self.push(DenseArray::from_parts(vec![m, n], out), Op::RowNormalize { x: a, norms }, &[a]))
    }

    /// 2-D convolution of a `C×H×W` input with `O×C×k×k` weights and a
    /// length-`O` bias, producing `O×H'×W'`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let [c, h, wd] = xs[..] else { panic!("conv2d input must be C×H×W, got {xs:?}") };
        let [o, wc, k, k2] = ws[..] else { panic!("conv2d weight must be O×C×k×k, got {ws:?}") };
        assert!(wc == c && k == k2, "conv2d: weight {ws:?} vs input {xs:?}");
        assert_eq!(self.value(b).len(), o, "conv2d bias length");
        let (cols, ho, wo) = im2col(self.value(x).data(), c, h, wd, k, geom);
        let l = ho * wo;
        let mut out = vec![0.0; o * l];
        for (row, &bias) in out.chunks_mut(l).zip(self.value(b).data()) {
            row.fill(bias);
        }
        gemm(o, c * k * k, l, 1.0, self.value(w).data(), false, &cols, false, 1.0, &mut out);
        self.push(
            DenseArray::from_parts(vec![o, ho, wo], out),
            Op::Conv2d { x, w, b, geom, cols, kernel: k },
            &[x, w, b],
        )
    }

    /// Nearest-neighbour 2× upsampling of a `C×H×W` array.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let [c, h, w] = xs[..] else { panic!("upsample2x expects C×H×W, got {xs:?}") };
        let src = self.value(x).data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ci * 2 * h + y) * 2 * w + xx] = src[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(DenseArray::from_parts(vec![c, 2 * h, 2 * w], out), Op::Upsample2x(x), &[x])
    }

    /// Concatenates along the leading axis. Trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(&s[1..], &tail[..], "concat_rows: trailing shape mismatch");
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(DenseArray::from_parts(shape, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Concatenates rank-2 arrays side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (m, _) = self.value(parts[0]).dims2().expect("concat_cols");
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).dims2().expect("concat_cols");
                assert_eq!(r, m, "concat_cols: row count mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(DenseArray::from_parts(vec![m, total], data), Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        assert!(start < end && end <= s[0], "slice_rows {start}..{end} of {s:?}");
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = end - start;
        self.push(DenseArray::from_parts(shape, data), Op::SliceRows { x, start }, &[x])
    }

    /// Columns `start..end` of a rank-2 array.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.value(x).dims2().expect("slice_cols");
        assert!(start < end && end <= n, "slice_cols {start}..{end} of width {n}");
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.push(DenseArray::from_parts(vec![m, end - start], data), Op::SliceCols { x, start }, &[x])
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let (v, d) = self.value(table).dims2().expect("gather_rows");
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < v, "gather_rows: index {i} out of {v}");
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            DenseArray::from_parts(vec![idx.len(), d], data),
            Op::GatherRows { table, idx: idx.to_vec() },
            &[table],
        )
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward from non-scalar {:?}", self.shape(out));
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            // an exactly-zero adjoint contributes nothing upstream
            if g.iter().any(|&x| x != 0.0) {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(dst) = self.acc(grads, v) {
                        dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(dst) = self.acc(grads, *a) {
                    dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(dst) = self.acc(grads, *b) {
                    dst.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                if let Some(dst) = self.acc(grads, *a) {
                    for ((d, x), y) in dst.iter_mut().zip(g).zip(val(*b)) {
                        *d += x * y;
                    }
                }
                if let Some(dst) = self.acc(grads, *b) {
                    for ((d, x), y) in dst.iter_mut().zip(g).zip(val(*a)) {
                        *d += x * y;
                    }
                }
            }
            Op::Div(a, b) => {
                if let Some(dst) = self.acc(grads, *a) {
                    for ((d, x), y) in dst.iter_mut().zip(g).zip(val(*b)) {
                        *d += x / y;
                    }
                }
                if let Some(dst) = self.acc(grads, *b) {
                    let out = node.value.data();
                    for (((d, x), y), o) in dst.iter_mut().zip(g).zip(val(*b)).zip(out) {
                        *d -= x * o / y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(dst) = self.acc(grads, *a) {
                    dst.iter_mut().zip(g).for_each(|(d, x)| *d += x * s);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(dst) = self.acc(grads, *a) {
                    dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::MulConst(a, c) => {
                if let Some(dst) = self.acc(grads, *a) {
                    for ((d, x), y) in dst.iter_mut().zip(g).zip(c) {
                        *d += x * y;
                    }
                }
            }
            Op::AddRow(x, b) => {
                let n = self.nodes[b.0].value.len();
                if let Some(dst) = self.acc(grads, *x) {
                    dst.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(dst) = self.acc(grads, *b) {
                    for row in g.chunks(n) {
                        dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::AddCol(x, b) => {
                let n = node.value.shape()[1];
                if let Some(dst) = self.acc(grads, *x) {
                    dst.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(dst) = self.acc(grads, *b) {
                    for (d, row) in dst.iter_mut().zip(g.chunks(n)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
            }
            Op::MulRow(x, gate) => {
                let n = self.nodes[gate.0].value.len();
                let gv = val(*gate);
                if let Some(dst) = self.acc(grads, *x) {
                    for (drow, grow) in dst.chunks_mut(n).zip(g.chunks(n)) {
                        for ((d, v), s) in drow.iter_mut().zip(grow).zip(gv) {
                            *d += v * s;
                        }
                    }
                }
                if let Some(dst) = self.acc(grads, *gate) {
                    for (xrow, grow) in val(*x).chunks(n).zip(g.chunks(n)) {
                        for ((d, v), xv) in dst.iter_mut().zip(grow).zip(xrow) {
                            *d += v * xv;
                        }
                    }
                }
            }
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n, ta, tb) = (*m, *k, *n, *ta, *tb);
                if self.nodes[a.0].needs_grad {
                    let bv = val(*b);
                    let dst = self.acc(grads, *a).expect("needs grad");
                    if ta {
                        // stored a is k×m: d = op(b) · gᵀ
                        gemm(k, n, m, 1.0, bv, tb, g, true, 1.0, dst);
                    } else {
                        gemm(m, n, k, 1.0, g, false, bv, !tb, 1.0, dst);
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let av = val(*a);
                    let dst = self.acc(grads, *b).expect("needs grad");
                    if tb {
                        // stored b is n×k: d = gᵀ · op(a)
                        gemm(n, m, k, 1.0, g, true, av, ta, 1.0, dst);
                    } else {
                        gemm(k, m, n, 1.0, av, !ta, g, false, 1.0, dst);
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2().expect("transpose");
                if let Some(dst) = self.acc(grads, *a) {
                    // output is r×c, input c×r
                    for i in 0..r {
                        for j in 0..c {
                            dst[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                if let Some(dst) = self.acc(grads, *a) {
                    for ((drow, grow), yrow) in dst.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Silu(a) => {
                if let Some(dst) = self.acc(grads, *a) {
                    for ((d, gv), &x) in dst.iter_mut().zip(g).zip(val(*a)) {
                        let s = sigmoid(x);
                        *d += gv * s * (1.0 + x * (1.0 - s));
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(dst) = self.acc(grads, *a) {
                    for ((d, gv), y) in dst.iter_mut().zip(g).zip(node.value.data()) {
                        *d += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(dst) = self.acc(grads, *a) {
                    for ((d, gv), y) in dst.iter_mut().zip(g).zip(node.value.data()) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(dst) = self.acc(grads, *a) {
                    for ((d, gv), y) in dst.iter_mut().zip(g).zip(node.value.data()) {
                        *d += gv * y;
                    }
                }
            }
            Op::Ln(a) => {
                if let Some(dst) = self.acc(grads, *a) {
                    for ((d, gv), x) in dst.iter_mut().zip(g).zip(val(*a)) {
                        *d += gv / x;
                    }
                }
            }
            Op::Square(a) => {
                if let Some(dst) = self.acc(grads, *a) {
                    for ((d, gv), x) in dst.iter_mut().zip(g).zip(val(*a)) {
                        *d += 2.0 * gv * x;
                    }
                }
            }
            Op::ClampMax(a, cap) => {
                if let Some(dst) = self.acc(grads, *a) {
                    for ((d, gv), x) in dst.iter_mut().zip(g).zip(val(*a)) {
                        if *x < *cap {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(dst) = self.acc(grads, *a) {
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis { x, outer, extent, inner } => {
                if let Some(dst) = self.acc(grads, *x) {
                    for o in 0..*outer {
                        for e in 0..*extent {
                            let base = (o * extent + e) * inner;
                            for i in 0..*inner {
                                dst[base + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                let y = node.value.data()[0];
                if let Some(dst) = self.acc(grads, *a) {
                    for (d, x) in dst.iter_mut().zip(val(*a)) {
                        *d += g[0] * (x - y).exp();
                    }
                }
            }
            Op::RowNormalize { x, norms } => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                if let Some(dst) = self.acc(grads, *x) {
                    for (i, norm) in norms.iter().enumerate() {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dst[i * n + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols, kernel } => {
                let xs = self.nodes[x.0].value.shape();
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let os = node.value.shape();
                let (o, ho, wo) = (os[0], os[1], os[2]);
                let l = ho * wo;
                let ckk = c * kernel * kernel;
                if let Some(dst) = self.acc(grads, *b) {
                    for (d, row) in dst.iter_mut().zip(g.chunks(l)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
                if let Some(dst) = self.acc(grads, *w) {
                    gemm(o, l, ckk, 1.0, g, false, cols, true, 1.0, dst);
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![0.0; ckk * l];
                    gemm(ckk, o, l, 1.0, val(*w), true, g, false, 0.0, &mut dcols);
                    let dst = self.acc(grads, *x).expect("needs grad");
                    col2im(&dcols, c, h, wd, *kernel, *geom, ho, wo, dst);
                }
            }
            Op::Upsample2x(x) => {
                let xs = self.nodes[x.0].value.shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                if let Some(dst) = self.acc(grads, *x) {
                    for ci in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(ci * h + y / 2) * w + xx / 2] += g[(ci * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(dst) = self.acc(grads, p) {
                        dst.iter_mut().zip(&g[off..off + len]).for_each(|(d, v)| *d += v);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let (m, w) = self.nodes[p.0].value.dims2().expect("concat_cols");
                    if let Some(dst) = self.acc(grads, p) {
                        for i in 0..m {
                            for j in 0..w {
                                dst[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let inner: usize = node.value.shape()[1..].iter().product();
                if let Some(dst) = self.acc(grads, *x) {
                    let base = start * inner;
                    dst[base..base + g.len()].iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, w) = node.value.dims2().expect("slice_cols");
                let n = self.nodes[x.0].value.shape()[1];
                if let Some(dst) = self.acc(grads, *x) {
                    for i in 0..m {
                        for j in 0..w {
                            dst[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let d = self.nodes[table.0].value.shape()[1];
                if let Some(dst) = self.acc(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            dst[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
        }
    }
}
