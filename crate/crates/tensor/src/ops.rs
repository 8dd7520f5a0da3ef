//! Forward primitives and their vector-Jacobian products.

use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisLayout {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisLayout {
    fn of(op: &'static str, shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op,
                axis,
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    #[inline]
    fn at(&self, o: usize, i: usize, j: usize) -> usize {
        (o * self.len + i) * self.inner + j
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Bcast {
    None,
    Lhs,
    Rhs,
}

pub(crate) enum Op {
    MatMul { m: usize, k: usize, n: usize },
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    Div(Bcast),
    AddRow { cols: usize },
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Neg,
    Scale(f64),
    AddScalar,
    LogSigmoid,
    LogSoftmax(AxisLayout),
    Softmax(AxisLayout),
    LayerNorm { cols: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { ids: Vec<usize>, dim: usize },
    Concat { outer: usize, inner: usize, lens: Vec<usize> },
    SumAll,
    SumAxis(AxisLayout),
    MeanAxis(AxisLayout),
    VarAxis(AxisLayout),
    Clamp { lo: f64, hi: f64 },
    Reshape,
    Transpose { rows: usize, cols: usize },
    SliceRows { start: usize, row_len: usize },
    SliceCols { cols: usize, start: usize, end: usize },
    GatherRows { cols: usize, idx: Vec<usize> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::MatMul { .. } => "matmul",
            Op::Add(_) => "add",
            Op::Sub(_) => "sub",
            Op::Mul(_) => "mul",
            Op::Div(_) => "div",
            Op::AddRow { .. } => "add_row",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::LogSigmoid => "log_sigmoid",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Concat { .. } => "concat",
            Op::SumAll => "sum",
            Op::SumAxis(_) => "sum_axis",
            Op::MeanAxis(_) => "mean_axis",
            Op::VarAxis(_) => "var_axis",
            Op::Clamp { .. } => "clamp",
            Op::Reshape => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
        }
    }

    /// Gradients w.r.t. each input, `None` where the input needs none.
    pub(crate) fn backward(&self, out: &[f64], g: &[f64], inputs: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let need = |i: usize| inputs[i].requires_grad();
        match self {
            Op::MatMul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let a = inputs[0].data();
                let b = inputs[1].data();
                let ga = need(0).then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &b, true, &mut ga, false);
                    ga
                });
                let gb = need(1).then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &a, true, g, false, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }
            Op::Add(bc) => vec![
                need(0).then(|| reduce_bcast(g, *bc == Bcast::Lhs)),
                need(1).then(|| reduce_bcast(g, *bc == Bcast::Rhs)),
            ],
            Op::Sub(bc) => vec![
                need(0).then(|| reduce_bcast(g, *bc == Bcast::Lhs)),
                need(1).then(|| {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    reduce_bcast(&neg, *bc == Bcast::Rhs)
                }),
            ],
            Op::Mul(bc) => {
                let a = inputs[0].data();
                let b = inputs[1].data();
                let ga = need(0).then(|| {
                    let full: Vec<f64> = (0..g.len()).map(|i| g[i] * pick(&b, i)).collect();
                    reduce_bcast(&full, *bc == Bcast::Lhs)
                });
                let gb = need(1).then(|| {
                    let full: Vec<f64> = (0..g.len()).map(|i| g[i] * pick(&a, i)).collect();
                    reduce_bcast(&full, *bc == Bcast::Rhs)
                });
                vec![ga, gb]
            }
            Op::Div(bc) => {
                let a = inputs[0].data();
                let b = inputs[1].data();
                let ga = need(0).then(|| {
                    let full: Vec<f64> = (0..g.len()).map(|i| g[i] / pick(&b, i)).collect();
                    reduce_bcast(&full, *bc == Bcast::Lhs)
                });
                let gb = need(1).then(|| {
                    let full: Vec<f64> = (0..g.len())
                        .map(|i| {
                            let bv = pick(&b, i);
                            -g[i] * pick(&a, i) / (bv * bv)
                        })
                        .collect();
                    reduce_bcast(&full, *bc == Bcast::Rhs)
                });
                vec![ga, gb]
            }
            Op::AddRow { cols } => {
                let grow = need(1).then(|| {
                    let mut r = vec![0.0; *cols];
                    for row in g.chunks(*cols) {
                        r.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    r
                });
                vec![need(0).then(|| g.to_vec()), grow]
            }
            Op::Relu => {
                let x = inputs[0].data();
                vec![Some(g.iter().zip(x.iter()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::Sigmoid => vec![Some(g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect())],
            Op::Exp => vec![Some(g.iter().zip(out).map(|(g, y)| g * y).collect())],
            Op::Ln => {
                let x = inputs[0].data();
                vec![Some(g.iter().zip(x.iter()).map(|(g, x)| g / x).collect())]
            }
            Op::Neg => vec![Some(g.iter().map(|g| -g).collect())],
            Op::Scale(c) => vec![Some(g.iter().map(|g| g * c).collect())],
            Op::AddScalar => vec![Some(g.to_vec())],
            Op::LogSigmoid => {
                let x = inputs[0].data();
                vec![Some(g.iter().zip(x.iter()).map(|(g, &x)| g * sigmoid(-x)).collect())]
            }
            Op::LogSoftmax(l) => {
                let mut gx = vec![0.0; g.len()];
                for o in 0..l.outer {
                    for j in 0..l.inner {
                        let s: f64 = (0..l.len).map(|i| g[l.at(o, i, j)]).sum();
                        for i in 0..l.len {
                            let p = l.at(o, i, j);
                            gx[p] = g[p] - out[p].exp() * s;
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Softmax(l) => {
                let mut gx = vec![0.0; g.len()];
                for o in 0..l.outer {
                    for j in 0..l.inner {
                        let s: f64 = (0..l.len).map(|i| g[l.at(o, i, j)] * out[l.at(o, i, j)]).sum();
                        for i in 0..l.len {
                            let p = l.at(o, i, j);
                            gx[p] = out[p] * (g[p] - s);
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::LayerNorm { cols, xhat, rstd } => {
                let cols = *cols;
                let gamma = inputs[1].data();
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; cols];
                let mut gbeta = vec![0.0; cols];
                for (r, rs) in rstd.iter().enumerate() {
                    let row = r * cols..(r + 1) * cols;
                    let (gr, xr) = (&g[row.clone()], &xhat[row.clone()]);
                    let mut mean_gx = 0.0;
                    let mut mean_gxx = 0.0;
                    for c in 0..cols {
                        ggamma[c] += gr[c] * xr[c];
                        gbeta[c] += gr[c];
                        let gxh = gr[c] * gamma[c];
                        mean_gx += gxh;
                        mean_gxx += gxh * xr[c];
                    }
                    mean_gx /= cols as f64;
                    mean_gxx /= cols as f64;
                    for c in 0..cols {
                        let gxh = gr[c] * gamma[c];
                        gx[row.start + c] = rs * (gxh - mean_gx - xr[c] * mean_gxx);
                    }
                }
                vec![need(0).then_some(gx), need(1).then_some(ggamma), need(2).then_some(gbeta)]
            }
            Op::Embedding { ids, dim } => {
                let mut gt = vec![0.0; inputs[0].numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * dim..(r + 1) * dim];
                    gt[id * dim..(id + 1) * dim].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                vec![Some(gt)]
            }
            Op::Concat { outer, inner, lens } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(lens.len());
                for (t, &len) in lens.iter().enumerate() {
                    if need(t) {
                        let mut gi = vec![0.0; outer * len * inner];
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                        }
                        grads.push(Some(gi));
                    } else {
                        grads.push(None);
                    }
                    offset += len;
                }
                grads
            }
            Op::SumAll => vec![Some(vec![g[0]; inputs[0].numel()])],
            Op::SumAxis(l) | Op::MeanAxis(l) => {
                let scale = if matches!(self, Op::MeanAxis(_)) { 1.0 / l.len as f64 } else { 1.0 };
                let mut gx = vec![0.0; l.outer * l.len * l.inner];
                for o in 0..l.outer {
                    for i in 0..l.len {
                        for j in 0..l.inner {
                            gx[l.at(o, i, j)] = g[o * l.inner + j] * scale;
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::VarAxis(l) => {
                let x = inputs[0].data();
                let n = l.len as f64;
                let mut gx = vec![0.0; x.len()];
                for o in 0..l.outer {
                    for j in 0..l.inner {
                        let mean = (0..l.len).map(|i| x[l.at(o, i, j)]).sum::<f64>() / n;
                        let go = g[o * l.inner + j];
                        for i in 0..l.len {
                            let p = l.at(o, i, j);
                            gx[p] = go * 2.0 * (x[p] - mean) / n;
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Clamp { lo, hi } => {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Transpose { rows, cols } => vec![Some(transpose(*cols, *rows, g))],
            Op::SliceRows { start, row_len } => {
                let mut gx = vec![0.0; inputs[0].numel()];
                let off = start * row_len;
                gx[off..off + g.len()].copy_from_slice(g);
                vec![Some(gx)]
            }
            Op::SliceCols { cols, start, end } => {
                let w = end - start;
                let mut gx = vec![0.0; inputs[0].numel()];
                for (r, row) in g.chunks(w).enumerate() {
                    gx[r * cols + start..r * cols + end].copy_from_slice(row);
                }
                vec![Some(gx)]
            }
            Op::GatherRows { cols, idx } => {
                let mut gx = vec![0.0; inputs[0].numel()];
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * cols + c] = g[r];
                }
                vec![Some(gx)]
            }
        }
    }
}

#[inline]
fn pick(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn reduce_bcast(g: &[f64], to_scalar: bool) -> Vec<f64> {
    if to_scalar {
        vec![g.iter().sum()]
    } else {
        g.to_vec()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Invalid {
            op,
            msg: format!("expected a 2-d tensor, got shape {s:?}"),
        }),
    }
}

impl Tensor {
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), op, vec![self.clone()])
    }

    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        mk: fn(Bcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (bc, shape) = if self.shape() == other.shape() {
            (Bcast::None, self.shape().to_vec())
        } else if other.numel() == 1 {
            (Bcast::Rhs, self.shape().to_vec())
        } else if self.numel() == 1 {
            (Bcast::Lhs, other.shape().to_vec())
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        };
        let a = self.data();
        let b = other.data();
        let data = (0..numel(&shape)).map(|i| f(pick(&a, i), pick(&b, i))).collect();
        drop((a, b));
        Ok(Tensor::from_op(data, shape, mk(bc), vec![self.clone(), other.clone()]))
    }

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let ((m, k), (k2, n)) = match (self.shape(), other.shape()) {
            ([m, k], [k2, n]) => ((*m, *k), (*k2, *n)),
            _ => return Err(mismatch()),
        };
        if k != k2 {
            return Err(mismatch());
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), false, &other.data(), false, &mut c, false);
        Ok(Tensor::from_op(c, vec![m, n], Op::MatMul { m, k, n }, vec![self.clone(), other.clone()]))
    }

    /// Elementwise sum; either side may be a single-element tensor.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    /// `[m,n] + [n]`, the row broadcast used for biases.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (_, cols) = require_2d("add_row", self)?;
        if row.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let r = row.data();
        let data = self
            .data()
            .chunks(cols)
            .flat_map(|x| x.iter().zip(r.iter()).map(|(a, b)| a + b))
            .collect();
        drop(r);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::AddRow { cols }, vec![self.clone(), row.clone()]))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, sigmoid)
    }

    /// `log σ(x)`, evaluated without overflow for large |x|.
    pub fn log_sigmoid(&self) -> Tensor {
        self.unary(Op::LogSigmoid, |x| x.min(0.0) - (-x.abs()).exp().ln_1p())
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(Op::Ln, f64::ln)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(c), |x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar, |x| x + c)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(Op::Clamp { lo, hi }, |x| x.clamp(lo, hi))
    }

    /// Max-shifted log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let l = AxisLayout::of("log_softmax", self.shape(), axis)?;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..l.outer {
            for j in 0..l.inner {
                let max = (0..l.len).map(|i| x[l.at(o, i, j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..l.len).map(|i| (x[l.at(o, i, j)] - max).exp()).sum::<f64>().ln();
                for i in 0..l.len {
                    y[l.at(o, i, j)] = x[l.at(o, i, j)] - lse;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(y, self.shape().to_vec(), Op::LogSoftmax(l), vec![self.clone()]))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let l = AxisLayout::of("softmax", self.shape(), axis)?;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..l.outer {
            for j in 0..l.inner {
                let max = (0..l.len).map(|i| x[l.at(o, i, j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..l.len {
                    let e = (x[l.at(o, i, j)] - max).exp();
                    y[l.at(o, i, j)] = e;
                    z += e;
                }
                for i in 0..l.len {
                    y[l.at(o, i, j)] /= z;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(y, self.shape().to_vec(), Op::Softmax(l), vec![self.clone()]))
    }

    /// Layer normalization over the last axis of a 2-d tensor with gain and
    /// bias vectors; population variance.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = require_2d("layer_norm", self)?;
        for p in [gamma, beta] {
            if p.shape() != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let x = self.data();
        let (g, b) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                y[r * cols + c] = h * g[c] + b[c];
            }
        }
        drop((x, g, b));
        Ok(Tensor::from_op(
            y,
            vec![rows, cols],
            Op::LayerNorm { cols, xhat, rstd },
            vec![self.clone(), gamma.clone(), beta.clone()],
        ))
    }

    /// Row lookup: `table[V,d]` with ids → `[len(ids), d]`.
    pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (vocab, dim) = require_2d("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Index {
                op: "embedding",
                index: bad,
                extent: vocab,
            });
        }
        let t = table.data();
        let data = ids.iter().flat_map(|&i| t[i * dim..(i + 1) * dim].iter().copied()).collect();
        drop(t);
        Ok(Tensor::from_op(
            data,
            vec![ids.len(), dim],
            Op::Embedding { ids: ids.to_vec(), dim },
            vec![table.clone()],
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = AxisLayout::of("concat", first.shape(), axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let same_rank = p.ndim() == first.ndim();
            let compatible = same_rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            lens.push(p.shape()[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let (outer, inner) = (base.outer, base.inner);
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for (p, &len) in parts.iter().zip(&lens) {
            let src = p.data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                data[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        Ok(Tensor::from_op(data, shape, Op::Concat { outer, inner, lens }, parts.to_vec()))
    }

    /// Sum of all elements → scalar (shape `[]`).
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![], Op::SumAll, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    fn reduce_axis(&self, name: &'static str, axis: usize, mk: fn(AxisLayout) -> Op) -> Result<Tensor> {
        let l = AxisLayout::of(name, self.shape(), axis)?;
        if l.len == 0 {
            return Err(TensorError::Invalid {
                op: name,
                msg: "reduction over an empty axis".into(),
            });
        }
        let x = self.data();
        let n = l.len as f64;
        let mut y = vec![0.0; l.outer * l.inner];
        let op = mk(l);
        for o in 0..l.outer {
            for j in 0..l.inner {
                let s: f64 = (0..l.len).map(|i| x[l.at(o, i, j)]).sum();
                y[o * l.inner + j] = match op {
                    Op::SumAxis(_) => s,
                    Op::MeanAxis(_) => s / n,
                    _ => {
                        let mean = s / n;
                        (0..l.len).map(|i| (x[l.at(o, i, j)] - mean).powi(2)).sum::<f64>() / n
                    }
                };
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(y, shape, op, vec![self.clone()]))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis("sum_axis", axis, Op::SumAxis)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis("mean_axis", axis, Op::MeanAxis)
    }

    /// Population variance (divides by the axis length).
    pub fn var_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis("var_axis", axis, Op::VarAxis)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (rows, cols) = require_2d("transpose", self)?;
        let data = transpose(rows, cols, &self.data());
        Ok(Tensor::from_op(data, vec![cols, rows], Op::Transpose { rows, cols }, vec![self.clone()]))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let rows = *self.shape().first().ok_or(TensorError::Invalid {
            op: "slice_rows",
            msg: "scalar input".into(),
        })?;
        if start > end || end > rows {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{end} out of bounds for shape {:?}", self.shape()),
            });
        }
        let row_len: usize = self.shape()[1..].iter().product();
        let data = self.data()[start * row_len..end * row_len].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = end - start;
        Ok(Tensor::from_op(data, shape, Op::SliceRows { start, row_len }, vec![self.clone()]))
    }

    /// Columns `start..end` of a 2-d tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = require_2d("slice_cols", self)?;
        if start > end || end > cols {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{end} out of bounds for shape {:?}", self.shape()),
            });
        }
        let x = self.data();
        let data = (0..rows).flat_map(|r| x[r * cols + start..r * cols + end].iter().copied()).collect();
        drop(x);
        Ok(Tensor::from_op(
            data,
            vec![rows, end - start],
            Op::SliceCols { cols, start, end },
            vec![self.clone()],
        ))
    }

    /// `out[r] = self[r, idx[r]]` for a 2-d tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (rows, cols) = require_2d("gather_rows", self)?;
        if idx.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&c| c >= cols) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                extent: cols,
            });
        }
        let x = self.data();
        let data = idx.iter().enumerate().map(|(r, &c)| x[r * cols + c]).collect();
        drop(x);
        Ok(Tensor::from_op(
            data,
            vec![rows],
            Op::GatherRows { cols, idx: idx.to_vec() },
            vec![self.clone()],
        ))
    }
}
