//! Reverse-mode differentiation over a closed set of tensor operations.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! records in reverse and returns the gradient of a scalar output with
//! respect to every node that needs one. Nodes built only from constants
//! never receive gradients, which is how frozen parameters are handled.

use super::tensor::{
    self, dot, gelu, gelu_grad, matmul, matmul_nt, matmul_tn, moments,
    softmax_in_place,
};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Recip(Var),
    ExpClamp { x: Var, lo: f64, hi: f64 },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    SegmentMean { x: Var, seg: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        q_len: usize,
        kv_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots.get_mut(v.0).and_then(Option::take)
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_nt(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a length-`D` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(row);
        let d = xv.cols();
        if rv.len() != d {
            return Err(Error::dim("add_row", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        if d > 0 {
            for r in out.data_mut().chunks_mut(d) {
                for (o, b) in r.iter_mut().zip(rv.data()) {
                    *o += b;
                }
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Multiplies `x` by a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::dim("scale_by", self.value(x).shape(), sv.shape()));
        }
        let out = self.value(x).scale(sv.data()[0]);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::ScaleBy(x, s), ng))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / v);
        let ng = self.ng(x);
        self.push(out, Op::Recip(x), ng)
    }

    /// `clamp(exp(x), lo, hi)`; the gradient is zero where the clamp is active.
    pub fn exp_clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.exp().clamp(lo, hi));
        let ng = self.ng(x);
        self.push(out, Op::ExpClamp { x, lo, hi }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let gv = self.value(gain);
        let bv = self.value(bias);
        if gv.len() != d || bv.len() != d {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..rows {
            let row = xv.row(r);
            let (mean, rs) = moments(row, eps);
            rstd[r] = rs;
            let orow = out.row_mut(r);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                orow[j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = tensor::softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let out = tensor::log_softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmaxRows(x), ng)
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for (i, row) in out.data_mut().chunks_mut(d.max(1)).enumerate() {
            let n = dot(row, row).sqrt();
            if !(n > 1e-12) {
                return Err(Error::DegenerateEmbedding { row: i, norm: n });
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, ng))
    }

    /// Means over consecutive groups of `seg` rows: `[B·seg × D] → [B × D]`.
    pub fn segment_mean(&mut self, x: Var, seg: usize) -> Result<Var> {
        let xv = self.value(x);
        if seg == 0 || xv.rows() % seg != 0 {
            return Err(Error::dim("segment_mean", xv.shape(), &[seg]));
        }
        let d = xv.cols();
        let b = xv.rows() / seg;
        let mut out = Tensor::zeros(&[b, d]);
        let inv = 1.0 / seg as f64;
        for i in 0..b {
            let orow = out.row_mut(i);
            for s in 0..seg {
                for (o, v) in orow.iter_mut().zip(xv.row(i * seg + s)) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SegmentMean { x, seg }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&tensors)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in &index {
            if i >= xv.rows() {
                return Err(Error::dim("gather_rows", xv.shape(), &[i]));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::matrix(index.len(), d, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows { x, index }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` holds `B` groups of `q_len` rows; `k` and `v` hold `B` groups of
    /// `kv_len` rows. Each group attends only within itself; the model
    /// dimension is split into `heads` contiguous slices.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_len: usize,
        kv_len: usize,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.cols() != d || kv.shape() != vv.shape() {
            return Err(Error::dim("attention", qv.shape(), kv.shape()));
        }
        if kv_len == 0 {
            return Err(Error::EmptySequence("attention"));
        }
        if heads == 0 || d % heads != 0 || q_len == 0 || qv.rows() % q_len != 0 {
            return Err(Error::dim("attention", qv.shape(), &[q_len, heads]));
        }
        let batch = qv.rows() / q_len;
        if kv.rows() != batch * kv_len {
            return Err(Error::dim("attention", qv.shape(), kv.shape()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * q_len * kv_len];
        let mut out = Tensor::zeros(qv.shape());
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let od = out.data_mut();
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for n in 0..q_len {
                    let qrow = (b * q_len + n) * d + off;
                    let p0 = ((b * heads + h) * q_len + n) * kv_len;
                    let prow = &mut probs[p0..p0 + kv_len];
                    for (l, p) in prow.iter_mut().enumerate() {
                        let krow = (b * kv_len + l) * d + off;
                        *p = dot(&qd[qrow..qrow + dh], &kd[krow..krow + dh]) * scale;
                    }
                    softmax_in_place(prow);
                    for (l, &p) in prow.iter().enumerate() {
                        let vrow = (b * kv_len + l) * d + off;
                        for j in 0..dh {
                            od[qrow + j] += p * vd[vrow + j];
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                q_len,
                kv_len,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Gradients of the scalar `output` with respect to every node that
    /// needs one.
    pub fn backward(&self, output: Var) -> Result<Grads> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::dim("backward", out.shape(), &[1]));
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = slots[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut slots)?;
            slots[idx] = Some(g);
        }
        Ok(Grads { slots })
    }

    fn propagate(&self, node: &Node, g: &Tensor, slots: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.ng(v) {
                return;
            }
            match &mut slots[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, matmul_nt(g, self.value(*b))?);
                }
                if self.ng(*b) {
                    acc(*b, matmul_tn(self.value(*a), g)?);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(*a) {
                    acc(*a, matmul(g, self.value(*b))?);
                }
                if self.ng(*b) {
                    acc(*b, matmul_tn(g, self.value(*a))?);
                }
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                if self.ng(*row) {
                    let d = g.cols();
                    let mut col = vec![0.0; d];
                    for r in g.data().chunks(d.max(1)) {
                        for (c, v) in col.iter_mut().zip(r) {
                            *c += v;
                        }
                    }
                    acc(*row, Tensor::new(self.value(*row).shape().to_vec(), col)?);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.zip_map(self.value(*b), |p, q| p * q)?);
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(self.value(*a), |p, q| p * q)?);
                }
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).data()[0];
                if self.ng(*x) {
                    acc(*x, g.scale(sv));
                }
                if self.ng(*s) {
                    let d = dot(g.data(), self.value(*x).data());
                    acc(*s, Tensor::new(self.value(*s).shape().to_vec(), vec![d])?);
                }
            }
            Op::Recip(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| -gv / (xv * xv))?),
            Op::ExpClamp { x, lo, hi } => {
                let dx = g.zip_map(self.value(*x), |gv, xv| {
                    let e = xv.exp();
                    if e >= *lo && e <= *hi {
                        gv * e
                    } else {
                        0.0
                    }
                })?;
                acc(*x, dx);
            }
            Op::Gelu(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| gv * gelu_grad(xv))?),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = g.cols();
                let gv = self.value(*gain).data();
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(g.shape());
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dh, hr) / d as f64;
                        let out = dx.row_mut(r);
                        for j in 0..d {
                            out[j] = rstd[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                    acc(*x, dx);
                }
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..g.rows() {
                        for j in 0..d {
                            dg[j] += g.row(r)[j] * xhat[r * d + j];
                            db[j] += g.row(r)[j];
                        }
                    }
                    acc(*gain, Tensor::new(self.value(*gain).shape().to_vec(), dg)?);
                    acc(*bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let d = y.cols();
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let s = dot(g.row(r), y.row(r));
                    let out = dx.row_mut(r);
                    for j in 0..d {
                        out[j] = y.row(r)[j] * (g.row(r)[j] - s);
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let d = y.cols();
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let s: f64 = g.row(r).iter().sum();
                    let out = dx.row_mut(r);
                    for j in 0..d {
                        out[j] = g.row(r)[j] - y.row(r)[j].exp() * s;
                    }
                }
                acc(*x, dx);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let d = y.cols();
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let s = dot(g.row(r), y.row(r));
                    let out = dx.row_mut(r);
                    for j in 0..d {
                        out[j] = (g.row(r)[j] - y.row(r)[j] * s) / norms[r];
                    }
                }
                acc(*x, dx);
            }
            Op::SegmentMean { x, seg } => {
                let xs = self.value(*x).shape();
                let mut dx = Tensor::zeros(xs);
                let inv = 1.0 / *seg as f64;
                for r in 0..dx.rows() {
                    let src = g.row(r / seg);
                    for (o, v) in dx.row_mut(r).iter_mut().zip(src) {
                        *o = v * inv;
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let d = g.cols();
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.rows();
                    if self.ng(p) {
                        let slice = g.data()[start * d..(start + n) * d].to_vec();
                        acc(p, Tensor::new(pv.shape().to_vec(), slice)?);
                    }
                    start += n;
                }
            }
            Op::GatherRows { x, index } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (r, &i) in index.iter().enumerate() {
                    for (o, v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Attention {
                q,
                k,
                v,
                q_len,
                kv_len,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let batch = qv.rows() / q_len;
                let mut dq = Tensor::zeros(qv.shape());
                let mut dk = Tensor::zeros(kv.shape());
                let mut dv = Tensor::zeros(vv.shape());
                let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
                let mut dp = vec![0.0; *kv_len];
                for b in 0..batch {
                    for h in 0..*heads {
                        let off = h * dh;
                        for n in 0..*q_len {
                            let qrow = (b * q_len + n) * d + off;
                            let p0 = ((b * heads + h) * q_len + n) * kv_len;
                            let prow = &probs[p0..p0 + kv_len];
                            let grow = &gd[qrow..qrow + dh];
                            for l in 0..*kv_len {
                                let vrow = (b * kv_len + l) * d + off;
                                dp[l] = dot(grow, &vd[vrow..vrow + dh]);
                                let dvr = &mut dv.data_mut()[vrow..vrow + dh];
                                for j in 0..dh {
                                    dvr[j] += prow[l] * grow[j];
                                }
                            }
                            let s = dot(&dp, prow);
                            for l in 0..*kv_len {
                                let ds = prow[l] * (dp[l] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = (b * kv_len + l) * d + off;
                                let dqr = &mut dq.data_mut()[qrow..qrow + dh];
                                for j in 0..dh {
                                    dqr[j] += ds * kd[krow + j];
                                }
                                let dkr = &mut dk.data_mut()[krow..krow + dh];
                                for j in 0..dh {
                                    dkr[j] += ds * qd[qrow + j];
                                }
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::RngStream;

    /// Central-difference check of `build` with respect to every input leaf.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let eval = |inp: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inp.iter().map(|x| t.constant(x.clone())).collect();
            let o = build(&mut t, &vs);
            t.value(o).data()[0]
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            for e in 0..input.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (analytic.data()[e] - fd).abs() / fd.abs().max(1.0);
                worst = worst.max(err);
            }
        }
        worst
    }

    fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Var {
        let shape = t.value(x).shape().to_vec();
        let w = RngStream::new(seed).normal_tensor(&shape, 1.0);
        let w = t.constant(w);
        let p = t.mul(x, w).unwrap();
        t.sum(p)
    }

    #[test]
    fn matmul_and_transpose_grads() {
        let mut rng = RngStream::new(10);
        let a = rng.normal_tensor(&[3, 4], 1.0);
        let b = rng.normal_tensor(&[4, 2], 1.0);
        let c = rng.normal_tensor(&[5, 4], 1.0);
        let err = check(vec![a, b, c], |t, v| {
            let ab = t.matmul(v[0], v[1]).unwrap();
            let nt = t.matmul_nt(v[0], v[2]).unwrap();
            let tr = t.transpose(nt);
            let s1 = weighted_sum(t, ab, 1);
            let s2 = weighted_sum(t, tr, 2);
            t.add(s1, s2).unwrap()
        });
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = RngStream::new(11);
        let x = rng.normal_tensor(&[3, 4], 1.0);
        let r = rng.normal_tensor(&[4], 1.0);
        let s = Tensor::scalar(0.3);
        let err = check(vec![x, r, s], |t, v| {
            let a = t.add_row(v[0], v[1]).unwrap();
            let g = t.gelu(a);
            let m = t.mul(g, v[0]).unwrap();
            let e = t.exp_clamp(v[2], 0.01, 10.0);
            let inv = t.recip(e);
            let sc = t.scale_by(m, inv).unwrap();
            let sc = t.scale(sc, 0.7);
            weighted_sum(t, sc, 3)
        });
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn norm_and_softmax_grads() {
        let mut rng = RngStream::new(12);
        let x = rng.normal_tensor(&[4, 6], 1.5);
        let gain = rng.normal_tensor(&[6], 1.0);
        let bias = rng.normal_tensor(&[6], 1.0);
        let err = check(vec![x, gain, bias], |t, v| {
            let ln = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let sm = t.softmax_rows(ln);
            let ls = t.log_softmax_rows(v[0]);
            let nr = t.normalize_rows(ln).unwrap();
            let a = weighted_sum(t, sm, 4);
            let b = weighted_sum(t, ls, 5);
            let c = weighted_sum(t, nr, 6);
            let ab = t.add(a, b).unwrap();
            t.add(ab, c).unwrap()
        });
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn structural_grads() {
        let mut rng = RngStream::new(13);
        let x = rng.normal_tensor(&[6, 3], 1.0);
        let y = rng.normal_tensor(&[2, 3], 1.0);
        let err = check(vec![x, y], |t, v| {
            let c = t.concat_rows(&[v[0], v[1]]).unwrap();
            let g = t.gather_rows(c, vec![7, 0, 0, 3, 6, 2]).unwrap();
            let m = t.segment_mean(g, 3).unwrap();
            let me = t.mean(c);
            let a = weighted_sum(t, m, 7);
            t.add(a, me).unwrap()
        });
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn attention_grads_and_forward() {
        let mut rng = RngStream::new(14);
        let q = rng.normal_tensor(&[4, 8], 1.0);
        let k = rng.normal_tensor(&[6, 8], 1.0);
        let v = rng.normal_tensor(&[6, 8], 1.0);
        let err = check(vec![q.clone(), k.clone(), v.clone()], |t, vs| {
            let a = t.attention(vs[0], vs[1], vs[2], 2, 3, 2).unwrap();
            weighted_sum(t, a, 8)
        });
        assert!(err < 1e-8, "{err}");

        // Single-head, single-group attention agrees with the plain kernel.
        let mut t = Tape::new();
        let (qa, ka, va) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let out = t.attention(qa, ka, va, 4, 6, 1).unwrap();
        let want = tensor::scaled_dot_attention(&q, &k, &v).unwrap();
        for (a, b) in t.value(out).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0));
        let x = t.leaf(Tensor::scalar(3.0), true);
        let p = t.mul(c, x).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }
}
