//! Symmetric contrastive loss with soft self-similarity targets, and the
//! cross-entropy objective used by the VQA head.
//!
//! For a batch of `K` matched pairs with unit embeddings `a_i`, `b_i`:
//!
//! ```text
//! s_ij   = <a_i, b_j>
//! l_ij   = -log softmax_j(s_i· / tau)          (a -> b)
//! l'_ji  = -log softmax_i(s_·j / tau)          (b -> a)
//! t_ij   = softmax_j((<a_i,a_j> + <b_i,b_j>) / 2tau)
//! L      = 1/(2K) * sum_ij (t_ij l_ij + t'_ji l'_ji)
//! ```
//!
//! The b -> a matrices are kept in "query = b" orientation, so both target
//! matrices returned by [`soft_targets`] are row-stochastic.

use crate::compute::{log_softmax_rows, matmul_nt, softmax_rows, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
pub const TAU_INIT: f64 = 0.07;

/// Learned temperature, stored as `log_tau` and clamped on use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    pub log_tau: f64,
}

impl Temperature {
    pub fn new(tau: f64) -> Self {
        Self { log_tau: tau.ln() }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp().clamp(TAU_MIN, TAU_MAX)
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::new(TAU_INIT)
    }
}

/// Options for the contrastive objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LossOptions {
    /// Let gradients flow through the soft targets. Off by default: the
    /// targets act as constants.
    pub target_grad: bool,
}

/// Cosine similarities between two sets of unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub row_modality: String,
    pub col_modality: String,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.values.rows()
    }

    pub fn transpose(&self) -> SimilarityMatrix {
        SimilarityMatrix {
            values: self.values.transpose(),
            row_modality: self.col_modality.clone(),
            col_modality: self.row_modality.clone(),
        }
    }
}

pub fn pairwise_cosine(a: &Tensor, b: &Tensor) -> Result<SimilarityMatrix> {
    if a.rows() != b.rows() {
        return Err(Error::Batch(format!(
            "row counts differ: {} vs {}",
            a.rows(),
            b.rows()
        )));
    }
    Ok(SimilarityMatrix {
        values: matmul_nt(a, b)?,
        row_modality: String::new(),
        col_modality: String::new(),
    })
}

/// `-log softmax_rows(s / tau)`.
pub fn infonce_rowwise(s: &Tensor, tau: f64) -> Tensor {
    log_softmax_rows(&s.scale(1.0 / tau)).scale(-1.0)
}

/// Soft targets from intra-modality similarities: `T` (normalized over the
/// second index, rows of `a`) and the reverse-direction matrix (rows of `b`).
pub fn soft_targets(s_aa: &Tensor, s_bb: &Tensor, tau: f64) -> Result<(Tensor, Tensor)> {
    let sum = s_aa.add(s_bb)?;
    let forward = softmax_rows(&sum.scale(0.5 / tau));
    let reverse = softmax_rows(&s_aa.transpose().add(&s_bb.transpose())?.scale(0.5 / tau));
    Ok((forward, reverse))
}

fn check_batch(a: &Tensor, b: &Tensor) -> Result<usize> {
    if a.shape().len() != 2 || a.shape() != b.shape() {
        return Err(Error::Batch(format!(
            "embedding shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let k = a.rows();
    if k == 0 {
        return Err(Error::Batch("empty batch".into()));
    }
    Ok(k)
}

/// Value of the symmetric soft-target contrastive loss.
pub fn alignment_loss(a: &Tensor, b: &Tensor, tau: Temperature) -> Result<f64> {
    let k = check_batch(a, b)?;
    let t = tau.tau();
    let s = pairwise_cosine(a, b)?.values;
    let forward = infonce_rowwise(&s, t);
    let reverse = infonce_rowwise(&s.transpose(), t);
    let (tf, tr) = soft_targets(&matmul_nt(a, a)?, &matmul_nt(b, b)?, t)?;
    let total = tf.zip_map(&forward, |p, q| p * q)?.sum() + tr.zip_map(&reverse, |p, q| p * q)?.sum();
    Ok(total / (2.0 * k as f64))
}

/// The same loss recorded on a tape. `a` and `b` must already be unit-norm
/// rows; `log_tau` is a one-element node.
pub fn alignment_loss_graph(
    tape: &mut Tape,
    a: Var,
    b: Var,
    log_tau: Var,
    opts: LossOptions,
) -> Result<Var> {
    let k = check_batch(tape.value(a), tape.value(b))?;
    let tau = tape.exp_clamp(log_tau, TAU_MIN, TAU_MAX);
    let inv_tau = tape.recip(tau);

    let s = tape.matmul_nt(a, b)?;
    let st = tape.transpose(s);
    let fwd_logits = tape.scale_by(s, inv_tau)?;
    let rev_logits = tape.scale_by(st, inv_tau)?;
    let fwd_logp = tape.log_softmax_rows(fwd_logits);
    let rev_logp = tape.log_softmax_rows(rev_logits);

    let (tf, tr) = if opts.target_grad {
        let saa = tape.matmul_nt(a, a)?;
        let sbb = tape.matmul_nt(b, b)?;
        let sum = tape.add(saa, sbb)?;
        let sum_t = tape.transpose(sum);
        let half = tape.scale(sum, 0.5);
        let half_t = tape.scale(sum_t, 0.5);
        let zf = tape.scale_by(half, inv_tau)?;
        let zr = tape.scale_by(half_t, inv_tau)?;
        (tape.softmax_rows(zf), tape.softmax_rows(zr))
    } else {
        let av = tape.value(a);
        let bv = tape.value(b);
        let t = tape.value(tau).data()[0];
        let (tf, tr) = soft_targets(&matmul_nt(av, av)?, &matmul_nt(bv, bv)?, t)?;
        (tape.constant(tf), tape.constant(tr))
    };

    let wf = tape.mul(tf, fwd_logp)?;
    let wr = tape.mul(tr, rev_logp)?;
    let sf = tape.sum(wf);
    let sr = tape.sum(wr);
    let total = tape.add(sf, sr)?;
    Ok(tape.scale(total, -1.0 / (2.0 * k as f64)))
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::Batch(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Batch("empty batch".into()));
    }
    let v = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
        return Err(Error::Label {
            label: bad,
            classes: v,
        });
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let lp = log_softmax_rows(logits);
    let total: f64 = labels.iter().enumerate().map(|(i, &l)| -lp.at(i, l)).sum();
    Ok(total / labels.len() as f64)
}

pub fn cross_entropy_graph(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lv = tape.value(logits);
    check_labels(lv, labels)?;
    let mut onehot = Tensor::zeros(lv.shape());
    let v = lv.cols();
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * v + l] = 1.0;
    }
    let lp = tape.log_softmax_rows(logits);
    let mask = tape.constant(onehot);
    let picked = tape.mul(lp, mask)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / labels.len() as f64))
}
