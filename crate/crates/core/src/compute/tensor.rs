use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// Most of the crate treats tensors as matrices: the last axis is the
/// column axis and every leading axis folds into rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            self.shape.iter().rev().skip(1).product()
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks equally-shaped matrices along the row axis.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::dim("vstack", &parts[0].shape, &p.shape));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    /// Rounds every value through `f32`, the on-disk precision.
    pub fn round_to_f32(&self) -> Tensor {
        self.map(|v| v as f32 as f64)
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::dim(op, &t.shape, &[]));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `a[M×K] · b[K×P]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, p) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * p];
    matmul_into(&a.data, &b.data, &mut out, m, k, p);
    Tensor::matrix(m, p, out)
}

/// `a[M×K] · b[P×K]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul_nt", a)?;
    let (p, k2) = require_matrix("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let ar = &a.data[i * k..(i + 1) * k];
        for j in 0..p {
            out[i * p + j] = dot(ar, &b.data[j * k..(j + 1) * k]);
        }
    }
    Tensor::matrix(m, p, out)
}

/// `a[K×M]ᵀ · b[K×P]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = require_matrix("matmul_tn", a)?;
    let (k2, p) = require_matrix("matmul_tn", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * p];
    for r in 0..k {
        let ar = &a.data[r * m..(r + 1) * m];
        let br = &b.data[r * p..(r + 1) * p];
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, p, out)
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    if c > 0 {
        for row in out.data.chunks_mut(c) {
            softmax_in_place(row);
        }
    }
    out
}

/// Row-wise log-softmax (log-sum-exp with max subtraction).
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    if c > 0 {
        for row in out.data.chunks_mut(c) {
            log_softmax_in_place(row);
        }
    }
    out
}

/// Normalizes every trailing `D`-vector to zero mean and unit variance
/// (biased variance), then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim("layer_norm", &x.shape, gain.shape()));
    }
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_mut(d) {
        let (mean, rstd) = moments(row, eps);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gain.data[j] + bias.data[j];
        }
    }
    Ok(out)
}

/// Mean and reciprocal standard deviation of a row. A zero-variance row
/// with `eps == 0` yields `rstd = 0` so it collapses onto the bias.
pub(crate) fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    let rstd = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    (mean, rstd)
}

/// Single-head `softmax(q·kᵀ/√D)·v`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, d) = require_matrix("scaled_dot_attention", q)?;
    let (l, dk) = require_matrix("scaled_dot_attention", k)?;
    let (lv, dv) = require_matrix("scaled_dot_attention", v)?;
    if dk != d || dv != d || lv != l {
        return Err(Error::dim("scaled_dot_attention", &q.shape, &k.shape));
    }
    if l == 0 {
        return Err(Error::EmptySequence("scaled_dot_attention"));
    }
    let scores = matmul_nt(q, k)?.scale(1.0 / (d as f64).sqrt());
    matmul(&softmax_rows(&scores), v)
}

/// Scales each row to unit Euclidean norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    let c = out.cols();
    if c == 0 {
        return Ok(out);
    }
    for (i, row) in out.data.chunks_mut(c).enumerate() {
        let norm = dot(row, row).sqrt();
        if !(norm > 1e-12) {
            return Err(Error::DegenerateEmbedding { row: i, norm });
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::RngStream;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, p) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, p]);
        for i in 0..m {
            for j in 0..p {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a.at(i, kk) * b.at(kk, j);
                }
                out.data_mut()[i * p + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let z = matmul(
            &Tensor::from_rows(&[vec![1.0, 2.0]]),
            &Tensor::from_rows(&[vec![0.0], vec![0.0]]),
        )
        .unwrap();
        assert_eq!(z.data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(3);
        let a = rng.normal_tensor(&[3, 4], 1.0);
        let b = rng.normal_tensor(&[4, 2], 1.0);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        for ((x, y), w) in nt.data().iter().zip(tn.data()).zip(want.data()) {
            assert!((x - w).abs() < 1e-12 && (y - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]));
        for v in s.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let s = softmax_rows(&Tensor::from_rows(&[vec![1.0, 0.0]]));
        let e = std::f64::consts::E;
        assert!((s.at(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((s.at(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((s.at(0, 0) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut rng = RngStream::new(9);
        for _ in 0..50 {
            let x = rng.normal_tensor(&[3, 5], 3.0);
            let shift = rng.normal() * 50.0;
            let a = softmax_rows(&x);
            let b = softmax_rows(&x.map(|v| v + shift));
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() < 1e-12);
            }
            for i in 0..3 {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let c = layer_norm(&Tensor::full(&[1, 3], 7.0), &one, &zero, 1e-5).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        let bias = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 5.0, -2.0]]);
        let b = layer_norm(&x, &zero, &bias, 1e-5).unwrap();
        assert_eq!(b.data(), bias.data());

        let y = layer_norm(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]), &one, &zero, 0.0).unwrap();
        let r = 1.5f64.sqrt();
        for (g, w) in y.data().iter().zip([-r, 0.0, r]) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = RngStream::new(5);
        let x = rng.normal_tensor(&[6, 16], 10.0);
        let y = layer_norm(&x, &Tensor::full(&[16], 1.0), &Tensor::zeros(&[16]), 1e-5).unwrap();
        for i in 0..6 {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / 16.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_examples() {
        let mut rng = RngStream::new(1);
        let q = rng.normal_tensor(&[2, 4], 1.0);
        let k = rng.normal_tensor(&[1, 4], 1.0);
        let v = rng.normal_tensor(&[1, 4], 1.0);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(out.row(0), v.row(0));
        assert_eq!(out.row(1), v.row(0));

        let k = Tensor::from_rows(&vec![vec![0.3, -0.1, 0.2, 0.5]; 3]);
        let v = rng.normal_tensor(&[3, 4], 1.0);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for j in 0..4 {
            let avg = (v.at(0, j) + v.at(1, j) + v.at(2, j)) / 3.0;
            assert!((out.at(0, j) - avg).abs() < 1e-12);
        }

        let err = scaled_dot_attention(&q, &Tensor::zeros(&[0, 4]), &Tensor::zeros(&[0, 4]));
        assert!(matches!(err, Err(Error::EmptySequence(_))));
    }

    #[test]
    fn attention_matches_scalar_oracle() {
        let mut rng = RngStream::new(77);
        let q = rng.normal_tensor(&[2, 4], 1.0);
        let k = rng.normal_tensor(&[3, 4], 1.0);
        let v = rng.normal_tensor(&[3, 4], 1.0);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for n in 0..2 {
            let scores: Vec<f64> = (0..3)
                .map(|l| (0..4).map(|d| q.at(n, d) * k.at(l, d)).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for d in 0..4 {
                let want: f64 = (0..3).map(|l| scores[l].exp() / z * v.at(l, d)).sum();
                assert!((out.at(n, d) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let y = l2_normalize(&Tensor::from_rows(&[vec![3.0, 4.0]])).unwrap();
        assert!((y.at(0, 0) - 0.6).abs() < 1e-15 && (y.at(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&y).unwrap(), y);
        let mut rng = RngStream::new(2);
        let z = l2_normalize(&rng.normal_tensor(&[20, 7], 3.0)).unwrap();
        for i in 0..20 {
            assert!((dot(z.row(i), z.row(i)).sqrt() - 1.0).abs() < 1e-10);
        }
        assert!(matches!(
            l2_normalize(&Tensor::zeros(&[1, 3])),
            Err(Error::DegenerateEmbedding { row: 0, .. })
        ));
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
