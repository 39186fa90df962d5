//! The network: modality tokens, fusion operators, the universal projection
//! (a pre-norm transformer), per-modality alignment layers, pooling, and the
//! VQA prediction head.
//!
//! All forward passes run on a [`Graph`]; inference simply never calls
//! backward. Sequences are processed in batches stacked along the row axis,
//! and every operation is row- or group-local, so an embedding does not
//! depend on which other samples shared its batch.

use std::fmt;
use std::str::FromStr;

use crate::compute::{Graph, ParamStore, Parameter, RngStream, Tensor, Var};
use crate::error::{Error, Result};
use crate::loss::TAU_INIT;
use crate::{Embeddings, TokenSequence};

pub const LOG_TAU: &str = "log_tau";
const LN_EPS: f64 = 1e-5;
const ENCODE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Addition,
    Concatenation,
    CrossAttention,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Addition => "addition",
            FusionMode::Concatenation => "concatenation",
            FusionMode::CrossAttention => "cross_attention",
        }
    }

    pub(crate) fn code(&self) -> u8 {
        match self {
            FusionMode::Addition => 0,
            FusionMode::Concatenation => 1,
            FusionMode::CrossAttention => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FusionMode::Addition),
            1 => Some(FusionMode::Concatenation),
            2 => Some(FusionMode::CrossAttention),
            _ => None,
        }
    }

    /// Output sequence length for `n` modality tokens and `l` inputs.
    pub fn output_len(&self, n: usize, l: usize) -> usize {
        match self {
            FusionMode::Addition => l,
            FusionMode::Concatenation => n + l,
            FusionMode::CrossAttention => n,
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "addition" => Ok(FusionMode::Addition),
            "concatenation" => Ok(FusionMode::Concatenation),
            "cross_attention" => Ok(FusionMode::CrossAttention),
            other => Err(Error::Config(format!(
                "unknown fusion mode '{other}' (expected addition, concatenation or cross_attention)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    FirstToken,
}

impl Pooling {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::FirstToken => "first_token",
        }
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "first_token" => Ok(Pooling::FirstToken),
            other => Err(Error::Config(format!("unknown pooling '{other}'"))),
        }
    }
}

/// Shape of the universal projection and how modality tokens are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Modality tokens per modality (N).
    pub tokens: usize,
    pub fusion: FusionMode,
    pub pooling: Pooling,
}

impl Default for UpConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl UpConfig {
    pub fn desk() -> Self {
        Self {
            depth: 2,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            tokens: 1,
            fusion: FusionMode::Addition,
            pooling: Pooling::Mean,
        }
    }

    /// Four blocks over 768-dimensional tokens.
    pub fn full_scale() -> Self {
        Self {
            depth: 4,
            dim: 768,
            heads: 12,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be at least 1".into()));
        }
        if self.tokens == 0 {
            return Err(Error::Config("need at least one modality token".into()));
        }
        if self.fusion == FusionMode::Addition && self.tokens != 1 {
            return Err(Error::Config(format!(
                "addition fusion needs exactly one modality token, got {}",
                self.tokens
            )));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Scalar parameter count of the projection alone.
    pub fn up_param_count(&self) -> usize {
        let d = self.dim;
        let h = self.mlp_hidden();
        let block = 4 * d // two layer norms
            + 4 * (d * d + d) // q, k, v, output projections
            + (d * h + h) + (h * d + d);
        self.depth * block + 2 * d
    }
}

/// Aligned modalities, in alignment order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModalityRegistry {
    aligned: Vec<String>,
    stage1: Option<(String, String)>,
}

impl ModalityRegistry {
    pub fn aligned(&self) -> &[String] {
        &self.aligned
    }

    pub fn stage1_pair(&self) -> Option<(&str, &str)> {
        self.stage1.as_ref().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn is_aligned(&self, m: &str) -> bool {
        self.aligned.iter().any(|a| a == m)
    }

    pub fn is_stage1(&self, m: &str) -> bool {
        matches!(&self.stage1, Some((a, b)) if a == m || b == m)
    }

    pub fn is_empty(&self) -> bool {
        self.aligned.is_empty()
    }

    pub fn set_stage1(&mut self, a: &str, b: &str) -> Result<()> {
        if !self.aligned.is_empty() {
            return Err(Error::Precondition(format!(
                "registry already holds {:?}",
                self.aligned
            )));
        }
        if a == b {
            return Err(Error::Config(format!("stage-1 modalities must differ, got '{a}' twice")));
        }
        self.aligned = vec![a.to_string(), b.to_string()];
        self.stage1 = Some((a.to_string(), b.to_string()));
        Ok(())
    }

    pub fn add(&mut self, m: &str) -> Result<()> {
        if self.is_aligned(m) {
            return Err(Error::Duplicate(m.to_string()));
        }
        self.aligned.push(m.to_string());
        Ok(())
    }

    pub(crate) fn from_parts(aligned: Vec<String>, stage1: Option<(String, String)>) -> Self {
        Self { aligned, stage1 }
    }

    pub(crate) fn lookup_error(&self, m: &str) -> Error {
        Error::UnknownModality {
            name: m.to_string(),
            known: self.aligned.clone(),
        }
    }
}

/// Answer vocabulary of the VQA head; index `i` is logit `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionHead {
    vocabulary: Vec<String>,
}

impl PredictionHead {
    pub fn new(vocabulary: Vec<String>) -> Result<Self> {
        if vocabulary.is_empty() {
            return Err(Error::Config("prediction head needs a non-empty vocabulary".into()));
        }
        let mut sorted = vocabulary.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != vocabulary.len() {
            return Err(Error::Config("vocabulary contains duplicate answers".into()));
        }
        Ok(Self { vocabulary })
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn len(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocabulary.is_empty()
    }

    pub fn index_of(&self, answer: &str) -> Result<usize> {
        self.vocabulary
            .iter()
            .position(|a| a == answer)
            .ok_or_else(|| Error::Vocabulary(answer.to_string()))
    }

    pub fn answer(&self, index: usize) -> &str {
        &self.vocabulary[index]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainingMeta {
    pub step: u64,
    pub seed: u64,
    pub loss: f64,
}

/// Every learnable parameter plus the configuration and registry they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: UpConfig,
    pub params: ParamStore,
    pub registry: ModalityRegistry,
    pub head: Option<PredictionHead>,
    pub meta: TrainingMeta,
}

pub fn token_name(m: &str) -> String {
    format!("token.{m}")
}

pub fn al_prefix(m: &str) -> String {
    format!("al.{m}.")
}

fn block_prefix(i: usize) -> String {
    format!("up.block{i}.")
}

fn linear_init(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> Parameter {
    Parameter::new(
        rng.normal_tensor(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()),
        true,
    )
}

fn bias(n: usize) -> Parameter {
    Parameter::new(Tensor::zeros(&[n]), false)
}

impl ModelState {
    /// A fresh projection with randomly initialized weights and no modalities.
    pub fn new(config: UpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::derive(seed, "up");
        let mut params = ParamStore::new();
        let d = config.dim;
        let h = config.mlp_hidden();
        for i in 0..config.depth {
            let p = block_prefix(i);
            for ln in ["ln1", "ln2"] {
                params.insert(format!("{p}{ln}.gain"), Parameter::new(Tensor::full(&[d], 1.0), false));
                params.insert(format!("{p}{ln}.bias"), bias(d));
            }
            for w in ["q", "k", "v", "o"] {
                params.insert(format!("{p}attn.w{w}"), linear_init(&mut rng, d, d));
                params.insert(format!("{p}attn.b{w}"), bias(d));
            }
            params.insert(format!("{p}mlp.w1"), linear_init(&mut rng, d, h));
            params.insert(format!("{p}mlp.b1"), bias(h));
            params.insert(format!("{p}mlp.w2"), linear_init(&mut rng, h, d));
            params.insert(format!("{p}mlp.b2"), bias(d));
        }
        params.insert("up.final_ln.gain", Parameter::new(Tensor::full(&[d], 1.0), false));
        params.insert("up.final_ln.bias", bias(d));
        params.insert(
            LOG_TAU,
            Parameter::new(Tensor::scalar(TAU_INIT.ln()), false),
        );
        params.round_to_f32();
        Ok(Self {
            config,
            params,
            registry: ModalityRegistry::default(),
            head: None,
            meta: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
        })
    }

    pub fn log_tau(&self) -> f64 {
        self.params
            .get(LOG_TAU)
            .map(|p| p.value.data()[0])
            .unwrap_or(TAU_INIT.ln())
    }

    pub fn set_log_tau(&mut self, v: f64) -> Result<()> {
        self.params.get_mut(LOG_TAU)?.value.data_mut()[0] = v;
        Ok(())
    }

    pub fn has_token(&self, m: &str) -> bool {
        self.params.contains(&token_name(m))
    }

    pub fn has_alignment_layer(&self, m: &str) -> bool {
        self.params.contains(&format!("{}w1", al_prefix(m)))
    }

    /// Adds (or replaces) a randomly initialized modality token.
    pub fn init_token(&mut self, m: &str, seed: u64) {
        let mut rng = RngStream::derive(seed, &token_name(m));
        let t = rng.normal_tensor(&[self.config.tokens, self.config.dim], 1.0).round_to_f32();
        self.params.insert(token_name(m), Parameter::new(t, true));
    }

    /// Adds a randomly initialized alignment layer of hidden width `hidden`.
    pub fn init_alignment_layer(&mut self, m: &str, hidden: usize, seed: u64) -> Result<()> {
        if hidden == 0 {
            return Err(Error::Config("alignment layer hidden width must be positive".into()));
        }
        let mut rng = RngStream::derive(seed, &al_prefix(m));
        let d = self.config.dim;
        let p = al_prefix(m);
        let mut w1 = linear_init(&mut rng, d, hidden);
        let mut w2 = linear_init(&mut rng, hidden, d);
        w1.value = w1.value.round_to_f32();
        w2.value = w2.value.round_to_f32();
        self.params.insert(format!("{p}w1"), w1);
        self.params.insert(format!("{p}b1"), bias(hidden));
        self.params.insert(format!("{p}w2"), w2);
        self.params.insert(format!("{p}b2"), bias(d));
        Ok(())
    }

    /// Installs an alignment layer that reproduces its input exactly
    /// (up to rounding): hidden width `2D`, using `gelu(u) - gelu(-u) = u`.
    pub fn set_identity_alignment_layer(&mut self, m: &str) {
        let d = self.config.dim;
        let mut w1 = Tensor::zeros(&[d, 2 * d]);
        let mut w2 = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            w1.data_mut()[i * 2 * d + i] = 1.0;
            w1.data_mut()[i * 2 * d + d + i] = -1.0;
            w2.data_mut()[i * d + i] = 1.0;
            w2.data_mut()[(d + i) * d + i] = -1.0;
        }
        let p = al_prefix(m);
        self.params.insert(format!("{p}w1"), Parameter::new(w1, true));
        self.params.insert(format!("{p}b1"), bias(2 * d));
        self.params.insert(format!("{p}w2"), Parameter::new(w2, true));
        self.params.insert(format!("{p}b2"), bias(d));
    }

    pub fn init_head(&mut self, head: PredictionHead, seed: u64) {
        let mut rng = RngStream::derive(seed, "head");
        let v = head.len();
        let mut w = linear_init(&mut rng, self.config.dim, v);
        w.value = w.value.round_to_f32();
        self.params.insert("head.weight", w);
        self.params.insert("head.bias", bias(v));
        self.head = Some(head);
    }

    /// Scalar counts per parameter group.
    pub fn param_report(&self) -> Vec<(String, usize)> {
        let mut out = vec![("up".to_string(), self.params.scalar_count_with_prefix("up."))];
        for m in self.registry.aligned() {
            out.push((token_name(m), self.params.scalar_count_with_prefix(&token_name(m))));
            if self.has_alignment_layer(m) {
                out.push((format!("al.{m}"), self.params.scalar_count_with_prefix(&al_prefix(m))));
            }
        }
        if self.head.is_some() {
            out.push(("head".into(), self.params.scalar_count_with_prefix("head.")));
        }
        out.push((LOG_TAU.into(), 1));
        out
    }
}

/// `batch` sequences of `len` rows stacked in one `[batch·len, D]` node.
#[derive(Debug, Clone, Copy)]
pub struct SeqBatch {
    pub var: Var,
    pub batch: usize,
    pub len: usize,
}

/// Stacks equally shaped sequences into one graph input.
pub fn stack_input(g: &mut Graph, seqs: &[&TokenSequence]) -> Result<SeqBatch> {
    let first = seqs.first().ok_or(Error::Batch("no sequences to stack".into()))?;
    let (len, dim) = (first.rows(), first.cols());
    if len == 0 {
        return Err(Error::EmptySequence("stack_input"));
    }
    for s in seqs {
        if s.shape().len() != 2 || s.rows() != len || s.cols() != dim {
            return Err(Error::dim("stack_input", first.shape(), s.shape()));
        }
    }
    let stacked = Tensor::vstack(seqs)?;
    Ok(SeqBatch {
        var: g.input(stacked),
        batch: seqs.len(),
        len,
    })
}

fn linear(g: &mut Graph, x: Var, w: &str, b: &str) -> Result<Var> {
    let wv = g.param(w)?;
    let bv = g.param(b)?;
    let y = g.tape.matmul(x, wv)?;
    g.tape.add_row(y, bv)
}

/// Fuses a modality token (`[N, D]` node) with every sequence of the batch.
pub fn fuse_graph(g: &mut Graph, token: Var, x: SeqBatch, mode: FusionMode) -> Result<SeqBatch> {
    if x.len == 0 {
        return Err(Error::EmptySequence("fuse"));
    }
    let tv = g.value(token);
    let n = tv.rows();
    let d = tv.cols();
    let xd = g.value(x.var).cols();
    if d != xd {
        return Err(Error::dim("fuse", tv.shape(), g.value(x.var).shape()));
    }
    match mode {
        FusionMode::Addition => {
            if n != 1 {
                return Err(Error::Config(format!(
                    "addition fusion needs exactly one modality token, got {n}"
                )));
            }
            let var = g.tape.add_row(x.var, token)?;
            Ok(SeqBatch { var, ..x })
        }
        FusionMode::Concatenation => {
            let both = g.tape.concat_rows(&[token, x.var])?;
            let mut index = Vec::with_capacity(x.batch * (n + x.len));
            for b in 0..x.batch {
                index.extend(0..n);
                index.extend((0..x.len).map(|l| n + b * x.len + l));
            }
            let var = g.tape.gather_rows(both, index)?;
            Ok(SeqBatch {
                var,
                batch: x.batch,
                len: n + x.len,
            })
        }
        FusionMode::CrossAttention => {
            let index = (0..x.batch).flat_map(|_| 0..n).collect();
            let q = g.tape.gather_rows(token, index)?;
            let var = g.tape.attention(q, x.var, x.var, n, x.len, 1)?;
            Ok(SeqBatch {
                var,
                batch: x.batch,
                len: n,
            })
        }
    }
}

/// Pre-norm transformer blocks followed by a final layer norm.
pub fn up_graph(g: &mut Graph, cfg: &UpConfig, x: SeqBatch) -> Result<SeqBatch> {
    let d = g.value(x.var).cols();
    if d != cfg.dim {
        return Err(Error::Config(format!(
            "universal projection expects dimension {}, got {d}",
            cfg.dim
        )));
    }
    let mut h = x.var;
    for i in 0..cfg.depth {
        let p = block_prefix(i);
        let gain = g.param(&format!("{p}ln1.gain"))?;
        let bias = g.param(&format!("{p}ln1.bias"))?;
        let n1 = g.tape.layer_norm(h, gain, bias, LN_EPS)?;
        let q = linear(g, n1, &format!("{p}attn.wq"), &format!("{p}attn.bq"))?;
        let k = linear(g, n1, &format!("{p}attn.wk"), &format!("{p}attn.bk"))?;
        let v = linear(g, n1, &format!("{p}attn.wv"), &format!("{p}attn.bv"))?;
        let a = g.tape.attention(q, k, v, x.len, x.len, cfg.heads)?;
        let o = linear(g, a, &format!("{p}attn.wo"), &format!("{p}attn.bo"))?;
        h = g.tape.add(h, o)?;

        let gain = g.param(&format!("{p}ln2.gain"))?;
        let bias = g.param(&format!("{p}ln2.bias"))?;
        let n2 = g.tape.layer_norm(h, gain, bias, LN_EPS)?;
        let m = linear(g, n2, &format!("{p}mlp.w1"), &format!("{p}mlp.b1"))?;
        let m = g.tape.gelu(m);
        let m = linear(g, m, &format!("{p}mlp.w2"), &format!("{p}mlp.b2"))?;
        h = g.tape.add(h, m)?;
    }
    let gain = g.param("up.final_ln.gain")?;
    let bias = g.param("up.final_ln.bias")?;
    let var = g.tape.layer_norm(h, gain, bias, LN_EPS)?;
    Ok(SeqBatch { var, ..x })
}

/// Two-layer per-token MLP of modality `m`.
pub fn al_graph(g: &mut Graph, m: &str, x: SeqBatch) -> Result<SeqBatch> {
    let p = al_prefix(m);
    let w1 = format!("{p}w1");
    if !g.store().contains(&w1) {
        return Err(Error::Config(format!("modality '{m}' has no alignment layer")));
    }
    let d_in = g.store().get(&w1)?.value.rows();
    if g.value(x.var).cols() != d_in {
        return Err(Error::Config(format!(
            "alignment layer '{m}' expects dimension {d_in}, got {}",
            g.value(x.var).cols()
        )));
    }
    let h = linear(g, x.var, &w1, &format!("{p}b1"))?;
    let h = g.tape.gelu(h);
    let var = linear(g, h, &format!("{p}w2"), &format!("{p}b2"))?;
    Ok(SeqBatch { var, ..x })
}

/// One vector per sequence; unit-normalized when `normalize` is set.
pub fn pool_graph(g: &mut Graph, x: SeqBatch, pooling: Pooling, normalize: bool) -> Result<Var> {
    if x.len == 0 {
        return Err(Error::EmptySequence("pool"));
    }
    let pooled = match pooling {
        Pooling::Mean => g.tape.segment_mean(x.var, x.len)?,
        Pooling::FirstToken => g.tape.gather_rows(x.var, (0..x.batch).map(|b| b * x.len).collect())?,
    };
    if normalize {
        g.tape.normalize_rows(pooled)
    } else {
        Ok(pooled)
    }
}

/// Which alignment layer the encoder applies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AlChoice {
    /// Apply the modality's own layer unless it is a stage-1 modality.
    Auto,
    /// Apply the named modality's layer regardless.
    Use(String),
    Skip,
}

/// What [`encode_graph`] did, for tracing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodeTrace {
    pub alignment_layer: Option<String>,
    pub fusion: FusionMode,
    pub fused_len: usize,
}

/// Features → (alignment layer) → fusion with the modality token →
/// universal projection → normalized pooled embedding `[B, D]`.
pub fn encode_graph(
    g: &mut Graph,
    state: &ModelState,
    m: &str,
    x: SeqBatch,
    al: &AlChoice,
) -> Result<(Var, EncodeTrace)> {
    if !state.registry.is_aligned(m) || !state.has_token(m) {
        return Err(state.registry.lookup_error(m));
    }
    let layer = match al {
        AlChoice::Auto if state.registry.is_stage1(m) => None,
        AlChoice::Auto => {
            if !state.has_alignment_layer(m) {
                return Err(Error::Config(format!(
                    "modality '{m}' was aligned after stage 1 but has no alignment layer"
                )));
            }
            Some(m.to_string())
        }
        AlChoice::Use(name) => Some(name.clone()),
        AlChoice::Skip => None,
    };
    let x = match &layer {
        Some(name) => al_graph(g, name, x)?,
        None => x,
    };
    let token = g.param(&token_name(m))?;
    let fused = fuse_graph(g, token, x, state.config.fusion)?;
    let out = up_graph(g, &state.config, fused)?;
    let emb = pool_graph(g, out, state.config.pooling, true)?;
    Ok((
        emb,
        EncodeTrace {
            alignment_layer: layer,
            fusion: state.config.fusion,
            fused_len: fused.len,
        },
    ))
}

/// Logits `[B, V]` from an image batch and a question batch.
pub fn vqa_graph(
    g: &mut Graph,
    state: &ModelState,
    image_modality: &str,
    question_modality: &str,
    image: SeqBatch,
    question: SeqBatch,
) -> Result<Var> {
    if state.head.is_none() {
        return Err(Error::Config("model has no prediction head".into()));
    }
    if image.batch != question.batch {
        return Err(Error::Batch(format!(
            "{} images for {} questions",
            image.batch, question.batch
        )));
    }
    let ti = g.param(&token_name(image_modality))?;
    let tq = g.param(&token_name(question_modality))?;
    let fi = fuse_graph(g, ti, image, state.config.fusion)?;
    let fq = fuse_graph(g, tq, question, state.config.fusion)?;
    let both = g.tape.concat_rows(&[fi.var, fq.var])?;
    let offset = fi.batch * fi.len;
    let mut index = Vec::with_capacity(fi.batch * (fi.len + fq.len));
    for b in 0..fi.batch {
        index.extend((0..fi.len).map(|l| b * fi.len + l));
        index.extend((0..fq.len).map(|l| offset + b * fq.len + l));
    }
    let joint = SeqBatch {
        var: g.tape.gather_rows(both, index)?,
        batch: fi.batch,
        len: fi.len + fq.len,
    };
    let out = up_graph(g, &state.config, joint)?;
    let pooled = pool_graph(g, out, Pooling::Mean, false)?;
    linear(g, pooled, "head.weight", "head.bias")
}

// Single-sequence conveniences over the graph functions.

/// Fuses one token tensor `[N, D]` with one sequence `[L, D]`.
pub fn fuse(token: &Tensor, x: &TokenSequence, mode: FusionMode) -> Result<TokenSequence> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    if x.rows() == 0 {
        return Err(Error::EmptySequence("fuse"));
    }
    let xb = stack_input(&mut g, &[x])?;
    let t = g.input(token.clone());
    let out = fuse_graph(&mut g, t, xb, mode)?;
    Ok(g.value(out.var).clone())
}

pub fn up_forward(state: &ModelState, fused: &TokenSequence) -> Result<TokenSequence> {
    let mut g = Graph::new(&state.params);
    let x = stack_input(&mut g, &[fused])?;
    let out = up_graph(&mut g, &state.config, x)?;
    Ok(g.value(out.var).clone())
}

pub fn al_forward(state: &ModelState, m: &str, x: &TokenSequence) -> Result<TokenSequence> {
    let mut g = Graph::new(&state.params);
    let xb = stack_input(&mut g, &[x])?;
    let out = al_graph(&mut g, m, xb)?;
    Ok(g.value(out.var).clone())
}

/// Mean over tokens, then unit-normalize. Returns a `[D]` vector.
pub fn pool_embed(x_hat: &TokenSequence) -> Result<Tensor> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let xb = stack_input(&mut g, &[x_hat])?;
    let out = pool_graph(&mut g, xb, Pooling::Mean, true)?;
    let v = g.value(out).clone();
    let d = v.cols();
    v.reshape(vec![d])
}

/// Embeds one sequence; the result has shape `[1, D]`.
pub fn encode(state: &ModelState, m: &str, x: &TokenSequence) -> Result<Embeddings> {
    encode_traced(state, m, x).map(|(e, _)| e)
}

pub fn encode_traced(state: &ModelState, m: &str, x: &TokenSequence) -> Result<(Embeddings, EncodeTrace)> {
    let mut g = Graph::new(&state.params);
    let xb = stack_input(&mut g, &[x])?;
    let (e, trace) = encode_graph(&mut g, state, m, xb, &AlChoice::Auto)?;
    Ok((g.value(e).clone(), trace))
}

/// Embeds many sequences of one modality; one row per input.
pub fn encode_batch(state: &ModelState, m: &str, xs: &[TokenSequence]) -> Result<Embeddings> {
    if xs.is_empty() {
        return Ok(Tensor::zeros(&[0, state.config.dim]));
    }
    let mut parts = Vec::new();
    for chunk in xs.chunks(ENCODE_CHUNK) {
        let mut g = Graph::new(&state.params);
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let xb = stack_input(&mut g, &refs)?;
        let (e, _) = encode_graph(&mut g, state, m, xb, &AlChoice::Auto)?;
        parts.push(g.value(e).clone());
    }
    Tensor::vstack(&parts.iter().collect::<Vec<_>>())
}

/// Logits for one (image, question) pair; shape `[V]`.
pub fn vqa_forward(
    state: &ModelState,
    image_modality: &str,
    question_modality: &str,
    image: &TokenSequence,
    question: &TokenSequence,
) -> Result<Tensor> {
    let logits = vqa_logits(state, image_modality, question_modality, &[image.clone()], &[question.clone()])?;
    let v = logits.cols();
    logits.reshape(vec![v])
}

pub fn vqa_logits(
    state: &ModelState,
    image_modality: &str,
    question_modality: &str,
    images: &[TokenSequence],
    questions: &[TokenSequence],
) -> Result<Tensor> {
    let mut parts = Vec::new();
    for (ic, qc) in images.chunks(ENCODE_CHUNK).zip(questions.chunks(ENCODE_CHUNK)) {
        let mut g = Graph::new(&state.params);
        let ib = stack_input(&mut g, &ic.iter().collect::<Vec<_>>())?;
        let qb = stack_input(&mut g, &qc.iter().collect::<Vec<_>>())?;
        let l = vqa_graph(&mut g, state, image_modality, question_modality, ib, qb)?;
        parts.push(g.value(l).clone());
    }
    if images.len() != questions.len() {
        return Err(Error::Batch(format!(
            "{} images for {} questions",
            images.len(),
            questions.len()
        )));
    }
    Tensor::vstack(&parts.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::{grad_check, l2_normalize};
    use crate::loss::{alignment_loss_graph, cross_entropy_graph, LossOptions};

    fn small(fusion: FusionMode) -> UpConfig {
        UpConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            tokens: if fusion == FusionMode::Addition { 1 } else { 2 },
            fusion,
            pooling: Pooling::Mean,
        }
    }

    fn state_with(fusion: FusionMode) -> ModelState {
        let mut s = ModelState::new(small(fusion), 3).unwrap();
        s.registry.set_stage1("image", "text").unwrap();
        s.init_token("image", 1);
        s.init_token("text", 2);
        s
    }

    #[test]
    fn fusion_examples() {
        let mut rng = RngStream::new(1);
        let x = rng.normal_tensor(&[4, 6], 1.0);
        assert_eq!(fuse(&Tensor::zeros(&[1, 6]), &x, FusionMode::Addition).unwrap(), x);

        let tok = rng.normal_tensor(&[1, 6], 1.0);
        let c = fuse(&tok, &x, FusionMode::Concatenation).unwrap();
        assert_eq!(c.rows(), 5);
        assert_eq!(c.row(0), tok.row(0));
        assert_eq!(c.row(3), x.row(2));

        let single = rng.normal_tensor(&[1, 6], 1.0);
        let ca = fuse(&tok, &single, FusionMode::CrossAttention).unwrap();
        assert_eq!(ca, single);

        let two = rng.normal_tensor(&[2, 6], 1.0);
        assert!(matches!(fuse(&two, &x, FusionMode::Addition), Err(Error::Config(_))));
        assert!(matches!(
            fuse(&tok, &Tensor::zeros(&[0, 6]), FusionMode::Concatenation),
            Err(Error::EmptySequence(_))
        ));
    }

    #[test]
    fn fusion_output_lengths() {
        let mut rng = RngStream::new(2);
        for _ in 0..20 {
            let n = 1 + rng.below(4);
            let l = 1 + rng.below(7);
            let x = rng.normal_tensor(&[l, 4], 1.0);
            let t = rng.normal_tensor(&[n, 4], 1.0);
            for mode in [FusionMode::Concatenation, FusionMode::CrossAttention] {
                assert_eq!(fuse(&t, &x, mode).unwrap().rows(), mode.output_len(n, l));
            }
            let t1 = rng.normal_tensor(&[1, 4], 1.0);
            assert_eq!(fuse(&t1, &x, FusionMode::Addition).unwrap().rows(), l);
        }
    }

    #[test]
    fn up_preserves_shape_and_is_deterministic() {
        let mut s = state_with(FusionMode::Addition);
        s.params.set_frozen_all(true);
        let mut rng = RngStream::new(4);
        for l in [1, 5, 17] {
            let x = rng.normal_tensor(&[l, 8], 1.0);
            let a = up_forward(&s, &x).unwrap();
            assert_eq!(a.shape(), x.shape());
            let b = up_forward(&s, &x).unwrap();
            assert_eq!(a, b);
        }
        assert!(matches!(
            up_forward(&s, &Tensor::zeros(&[2, 4])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn up_gradients() {
        let mut s = state_with(FusionMode::Concatenation);
        let x = RngStream::new(5).normal_tensor(&[3, 8], 1.0);
        let err = grad_check(&mut s.params, 1e-5, |g| {
            let xb = stack_input(g, &[&x])?;
            let out = up_graph(g, &small(FusionMode::Concatenation), xb)?;
            Ok(g.tape.mean(out.var))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn param_count_formula() {
        for cfg in [small(FusionMode::Addition), UpConfig::desk(), UpConfig::full_scale()] {
            let s = ModelState::new(cfg, 0).unwrap();
            assert_eq!(s.params.scalar_count_with_prefix("up."), cfg.up_param_count());
        }
        // depth 2, D 64, H 256: 2 * (256 + 4*4160 + (16384 + 256) + (16384 + 64)) + 128
        assert_eq!(UpConfig::desk().up_param_count(), 100_096);
    }

    #[test]
    fn alignment_layer_examples() {
        let mut s = state_with(FusionMode::Addition);
        s.init_alignment_layer("audio", 8, 9).unwrap();
        for (_, p) in s.params.iter_mut().filter(|(n, _)| n.starts_with("al.audio.")) {
            p.value.data_mut().fill(0.0);
        }
        let x = RngStream::new(6).normal_tensor(&[3, 8], 1.0);
        assert!(al_forward(&s, "audio", &x).unwrap().data().iter().all(|&v| v == 0.0));

        s.init_alignment_layer("audio", 8, 9).unwrap();
        let y = al_forward(&s, "audio", &x).unwrap();
        let perm = [2, 0, 1];
        let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
        let py = al_forward(&s, "audio", &px).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            assert_eq!(py.row(r), y.row(i));
        }

        let err = grad_check(&mut s.params, 1e-5, |g| {
            let xb = stack_input(g, &[&x])?;
            let out = al_graph(g, "audio", xb)?;
            let sq = g.tape.mul(out.var, out.var)?;
            Ok(g.tape.mean(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
        assert!(matches!(
            al_forward(&s, "audio", &Tensor::zeros(&[2, 3])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pooling_examples() {
        let p = pool_embed(&Tensor::from_rows(&[vec![3.0, 4.0]])).unwrap();
        assert!((p.data()[0] - 0.6).abs() < 1e-15 && (p.data()[1] - 0.8).abs() < 1e-15);
        let twice = pool_embed(&Tensor::from_rows(&[vec![3.0, 4.0], vec![3.0, 4.0]])).unwrap();
        assert_eq!(p, twice);
        let x = RngStream::new(7).normal_tensor(&[4, 5], 1.0);
        let got = pool_embed(&x).unwrap();
        let mean: Vec<f64> = (0..5).map(|j| (0..4).map(|i| x.at(i, j)).sum::<f64>() / 4.0).collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (g, m) in got.data().iter().zip(&mean) {
            assert!((g - m / norm).abs() < 1e-12);
        }
        assert!(pool_embed(&Tensor::zeros(&[0, 5])).is_err());
    }

    #[test]
    fn encode_applies_alignment_layer_only_after_stage1() {
        let mut s = state_with(FusionMode::Addition);
        let x = RngStream::new(8).normal_tensor(&[4, 8], 1.0);
        let (e, trace) = encode_traced(&s, "image", &x).unwrap();
        assert_eq!(trace.alignment_layer, None);
        let n: f64 = e.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-10);

        s.registry.add("audio").unwrap();
        s.init_token("audio", 5);
        assert!(matches!(encode(&s, "audio", &x), Err(Error::Config(_))));
        s.set_identity_alignment_layer("audio");
        let (ea, trace) = encode_traced(&s, "audio", &x).unwrap();
        assert_eq!(trace.alignment_layer.as_deref(), Some("audio"));

        // Same token, no alignment layer: the identity layer must not matter.
        let mut g = Graph::new(&s.params);
        let xb = stack_input(&mut g, &[&x]).unwrap();
        let (raw, _) = encode_graph(&mut g, &s, "audio", xb, &AlChoice::Skip).unwrap();
        for (a, b) in ea.data().iter().zip(g.value(raw).data()) {
            assert!((a - b).abs() < 1e-12);
        }

        assert!(matches!(
            encode(&s, "video", &x),
            Err(Error::UnknownModality { .. })
        ));
    }

    #[test]
    fn modality_token_changes_output() {
        let s = state_with(FusionMode::Addition);
        let x = RngStream::new(9).normal_tensor(&[4, 8], 1.0);
        let a = encode(&s, "image", &x).unwrap();
        let b = encode(&s, "text", &x).unwrap();
        let diff: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        assert!(diff > 1e-6);
    }

    #[test]
    fn batched_encoding_matches_single() {
        let s = state_with(FusionMode::CrossAttention);
        let mut rng = RngStream::new(10);
        let xs: Vec<Tensor> = (0..5).map(|_| rng.normal_tensor(&[3, 8], 1.0)).collect();
        let batch = encode_batch(&s, "text", &xs).unwrap();
        for (i, x) in xs.iter().enumerate() {
            assert_eq!(encode(&s, "text", x).unwrap().row(0), batch.row(i));
        }
    }

    #[test]
    fn alignment_loss_gradients_through_model() {
        for fusion in [FusionMode::Addition, FusionMode::Concatenation, FusionMode::CrossAttention] {
            let mut s = state_with(fusion);
            let mut rng = RngStream::new(11);
            let xa: Vec<Tensor> = (0..4).map(|_| rng.normal_tensor(&[3, 8], 1.0)).collect();
            let xb: Vec<Tensor> = (0..4).map(|_| rng.normal_tensor(&[2, 8], 1.0)).collect();
            let st = s.clone();
            s.set_log_tau((0.3f64).ln()).unwrap();
            let err = grad_check(&mut s.params, 1e-5, |g| {
                let a = stack_input(g, &xa.iter().collect::<Vec<_>>())?;
                let b = stack_input(g, &xb.iter().collect::<Vec<_>>())?;
                let (ea, _) = encode_graph(g, &st, "image", a, &AlChoice::Auto)?;
                let (eb, _) = encode_graph(g, &st, "text", b, &AlChoice::Auto)?;
                let lt = g.param(LOG_TAU)?;
                alignment_loss_graph(&mut g.tape, ea, eb, lt, LossOptions { target_grad: true })
            })
            .unwrap();
            assert!(err < 1e-4, "{fusion}: {err}");
        }
    }

    #[test]
    fn stop_gradient_targets_match_frozen_target_differences() {
        use crate::loss::soft_targets;
        let mut s = state_with(FusionMode::Addition);
        let mut rng = RngStream::new(15);
        let xa: Vec<Tensor> = (0..3).map(|_| rng.normal_tensor(&[2, 8], 1.0)).collect();
        let xb: Vec<Tensor> = (0..3).map(|_| rng.normal_tensor(&[2, 8], 1.0)).collect();
        let st = s.clone();
        let ea = encode_batch(&st, "image", &xa).unwrap();
        let eb = encode_batch(&st, "text", &xb).unwrap();
        let tau = st.log_tau().exp();
        let (tf, tr) = soft_targets(
            &crate::compute::matmul_nt(&ea, &ea).unwrap(),
            &crate::compute::matmul_nt(&eb, &eb).unwrap(),
            tau,
        )
        .unwrap();
        let analytic = {
            let mut g = Graph::new(&st.params);
            let a = stack_input(&mut g, &xa.iter().collect::<Vec<_>>()).unwrap();
            let b = stack_input(&mut g, &xb.iter().collect::<Vec<_>>()).unwrap();
            let (ea, _) = encode_graph(&mut g, &st, "image", a, &AlChoice::Auto).unwrap();
            let (eb, _) = encode_graph(&mut g, &st, "text", b, &AlChoice::Auto).unwrap();
            let lt = g.param(LOG_TAU).unwrap();
            let loss = alignment_loss_graph(&mut g.tape, ea, eb, lt, LossOptions::default()).unwrap();
            g.backward(loss).unwrap()
        };
        // Finite differences of the loss with the targets held at their current values.
        let err = grad_check(&mut s.params, 1e-5, |g| {
            let a = stack_input(g, &xa.iter().collect::<Vec<_>>())?;
            let b = stack_input(g, &xb.iter().collect::<Vec<_>>())?;
            let (ea, _) = encode_graph(g, &st, "image", a, &AlChoice::Auto)?;
            let (eb, _) = encode_graph(g, &st, "text", b, &AlChoice::Auto)?;
            let lt = g.param(LOG_TAU)?;
            let tau = g.tape.exp_clamp(lt, crate::loss::TAU_MIN, crate::loss::TAU_MAX);
            let inv = g.tape.recip(tau);
            let sim = g.tape.matmul_nt(ea, eb)?;
            let simt = g.tape.transpose(sim);
            let f = g.tape.scale_by(sim, inv)?;
            let r = g.tape.scale_by(simt, inv)?;
            let f = g.tape.log_softmax_rows(f);
            let r = g.tape.log_softmax_rows(r);
            let tfv = g.input(tf.clone());
            let trv = g.input(tr.clone());
            let wf = g.tape.mul(tfv, f)?;
            let wr = g.tape.mul(trv, r)?;
            let sf = g.tape.sum(wf);
            let sr = g.tape.sum(wr);
            let t = g.tape.add(sf, sr)?;
            Ok(g.tape.scale(t, -1.0 / 6.0))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
        for (name, grad) in analytic.iter() {
            let fd_side = &s.params.get(name).unwrap().grad;
            for (x, y) in grad.data().iter().zip(fd_side.data()) {
                assert!((x - y).abs() < 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn vqa_head_examples() {
        let mut s = state_with(FusionMode::Addition);
        s.init_head(PredictionHead::new((0..10).map(|i| format!("a{i}")).collect()).unwrap(), 1);
        let mut rng = RngStream::new(12);
        let img = rng.normal_tensor(&[3, 8], 1.0);
        let q = rng.normal_tensor(&[2, 8], 1.0);
        let logits = vqa_forward(&s, "image", "text", &img, &q).unwrap();
        assert_eq!(logits.len(), 10);

        s.params.get_mut("head.weight").unwrap().value.data_mut().fill(0.0);
        for (i, v) in s.params.get_mut("head.bias").unwrap().value.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let logits = vqa_forward(&s, "image", "text", &img, &q).unwrap();
        assert_eq!(logits.data(), &(0..10).map(|i| i as f64).collect::<Vec<_>>()[..]);

        assert!(PredictionHead::new(vec![]).is_err());
    }

    #[test]
    fn vqa_gradients_respect_freeze() {
        let mut s = state_with(FusionMode::Concatenation);
        s.init_head(PredictionHead::new(vec!["yes".into(), "no".into(), "cat".into()]).unwrap(), 2);
        s.params.set_frozen_prefix("token.", true);
        let mut rng = RngStream::new(13);
        let imgs: Vec<Tensor> = (0..3).map(|_| rng.normal_tensor(&[2, 8], 1.0)).collect();
        let qs: Vec<Tensor> = (0..3).map(|_| rng.normal_tensor(&[2, 8], 1.0)).collect();
        let st = s.clone();
        let err = grad_check(&mut s.params, 1e-5, |g| {
            let ib = stack_input(g, &imgs.iter().collect::<Vec<_>>())?;
            let qb = stack_input(g, &qs.iter().collect::<Vec<_>>())?;
            let logits = vqa_graph(g, &st, "image", "text", ib, qb)?;
            cross_entropy_graph(&mut g.tape, logits, &[0, 2, 1])
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
        for (n, p) in s.params.iter().filter(|(n, _)| n.starts_with("token.")) {
            assert!(p.grad.data().iter().all(|&v| v == 0.0), "{n}");
        }
    }

    #[test]
    fn normalized_embeddings_stay_unit() {
        let s = state_with(FusionMode::Concatenation);
        let mut rng = RngStream::new(14);
        let xs: Vec<Tensor> = (0..6).map(|_| rng.normal_tensor(&[4, 8], 3.0)).collect();
        let e = encode_batch(&s, "image", &xs).unwrap();
        let renorm = l2_normalize(&e).unwrap();
        for (a, b) in e.data().iter().zip(renorm.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
