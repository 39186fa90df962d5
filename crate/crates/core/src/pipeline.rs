//! Training procedures, the optimizer, and checkpoints.
//!
//! - [`train_stage1`] fits the universal projection and two modality tokens
//!   on one paired dataset.
//! - [`train_stage2`] freezes everything already trained and fits only an
//!   alignment layer and token for one new modality, paired with an aligned
//!   bridge modality.
//! - [`train_vqa`] fits the projection, tokens, and a prediction head with
//!   cross-entropy.

use std::fs;
use std::path::Path;

use crate::compute::{Graph, ParamStore, Parameter, Tensor};
use crate::data::{batch_iter, checksum, PairedDataset, Reader, VqaSplit};
use crate::error::{Error, Result};
use crate::loss::{alignment_loss_graph, cross_entropy_graph, LossOptions, TAU_INIT, TAU_MAX, TAU_MIN};
use crate::model::{
    al_prefix, encode_graph, stack_input, token_name, vqa_graph, AlChoice, FusionMode, ModalityRegistry,
    ModelState, Pooling, PredictionHead, TrainingMeta, UpConfig, LOG_TAU,
};
use crate::TokenSequence;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OECK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps, cycling epochs as needed.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub tau_init: f64,
    pub train_tau: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stage 2 only: also pass the bridge modality through the new
    /// modality's alignment layer during training.
    pub al_on_bridge: bool,
    /// Alignment layer hidden width; `None` means `D`.
    pub al_hidden: Option<usize>,
    pub target_grad: bool,
    pub drop_last: bool,
    /// Compare every frozen parameter before and after each step.
    pub verify_freeze: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    /// Full-scale stage-1 schedule.
    pub fn stage1() -> Self {
        Self {
            epochs: 500,
            max_steps: None,
            batch_size: 512,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-3,
            seed: 0,
            tau_init: TAU_INIT,
            train_tau: true,
            clip_norm: Some(1.0),
            al_on_bridge: false,
            al_hidden: None,
            target_grad: false,
            drop_last: true,
            verify_freeze: false,
        }
    }

    /// Full-scale stage-2 schedule.
    pub fn stage2() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            ..Self::stage1()
        }
    }

    pub fn desk_stage1() -> Self {
        Self {
            max_steps: Some(500),
            batch_size: 32,
            ..Self::stage1()
        }
    }

    pub fn desk_stage2() -> Self {
        Self {
            max_steps: Some(300),
            batch_size: 32,
            ..Self::stage2()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and eps > 0".into()));
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau_init) {
            return Err(Error::Config(format!(
                "tau_init must lie in [{TAU_MIN}, {TAU_MAX}], got {}",
                self.tau_init
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if self.al_hidden == Some(0) {
            return Err(Error::Config("al_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// One decoupled-weight-decay Adam update with bias correction, reading the
/// gradient slot of every non-frozen parameter. `step_index` starts at 1.
pub fn adamw_step(
    params: &mut ParamStore,
    moments: &mut std::collections::BTreeMap<String, Moments>,
    cfg: &AdamWConfig,
    step_index: u64,
) -> Result<()> {
    if step_index == 0 {
        return Err(Error::Precondition("optimizer step index starts at 1".into()));
    }
    let t = step_index as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        if p.frozen {
            continue;
        }
        let st = moments.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(p.value.shape()),
            v: Tensor::zeros(p.value.shape()),
        });
        let decay = if p.decay { cfg.weight_decay } else { 0.0 };
        let g = p.grad.data();
        let m = st.m.data_mut();
        let v = st.v.data_mut();
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.eps) + decay * *w);
        }
    }
    Ok(())
}

/// Optimizer state across steps.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub moments: std::collections::BTreeMap<String, Moments>,
    pub step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            moments: Default::default(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        self.step += 1;
        adamw_step(params, &mut self.moments, &self.config, self.step)
    }
}

/// Scales all trainable gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter(|(_, p)| !p.frozen)
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, p) in params.iter_mut().filter(|(_, p)| !p.frozen) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Losses recorded during a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    /// Mean step loss of each (possibly partial) epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.step_losses.len()
    }

    pub fn final_loss(&self) -> f64 {
        self.step_losses.last().copied().unwrap_or(f64::NAN)
    }
}

fn frozen_snapshot(params: &ParamStore) -> Vec<(String, Vec<u64>)> {
    params
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(n, p)| (n.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Shared optimization loop. `step_loss` builds the loss for one batch of
/// indices and leaves gradients in the parameter slots.
fn run_loop<F>(state: &mut ModelState, n: usize, cfg: &TrainConfig, mut step_loss: F) -> Result<TrainReport>
where
    F: FnMut(&mut ModelState, &[usize]) -> Result<f64>,
{
    cfg.validate()?;
    let mut opt = AdamW::new(cfg.adamw());
    let mut report = TrainReport::default();
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    let mut epoch = 0;
    while report.steps() < budget && (cfg.max_steps.is_some() || epoch < cfg.epochs) {
        let batches = batch_iter(n, cfg.batch_size, cfg.seed, epoch, cfg.drop_last)?;
        if batches.is_empty() {
            return Err(Error::Config(format!(
                "batch size {} leaves no full batch in {n} samples",
                cfg.batch_size
            )));
        }
        let mut sum = 0.0;
        let mut count = 0;
        for idx in batches {
            if report.steps() >= budget {
                break;
            }
            let step = report.steps() + 1;
            state.params.zero_grads();
            let loss = match step_loss(state, &idx) {
                Err(Error::DegenerateEmbedding { norm, .. }) if !norm.is_finite() => f64::NAN,
                other => other?,
            };
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    tau: state.log_tau().exp(),
                });
            }
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut state.params, c);
            }
            let before = cfg.verify_freeze.then(|| frozen_snapshot(&state.params));
            opt.step(&mut state.params)?;
            if let Some(before) = before {
                if before != frozen_snapshot(&state.params) {
                    return Err(Error::Precondition(format!("a frozen parameter changed at step {step}")));
                }
            }
            report.step_losses.push(loss);
            sum += loss;
            count += 1;
            if step % 50 == 0 {
                log::info!("step {step} loss {loss:.6} tau {:.4}", state.log_tau().exp().clamp(TAU_MIN, TAU_MAX));
            }
        }
        if count > 0 {
            report.epoch_losses.push(sum / count as f64);
        }
        epoch += 1;
    }
    state.params.round_to_f32();
    state.params.zero_grads();
    state.meta = TrainingMeta {
        step: state.meta.step + report.steps() as u64,
        seed: cfg.seed,
        loss: report.final_loss(),
    };
    Ok(report)
}

fn refs<'a>(xs: &'a [TokenSequence], idx: &[usize]) -> Vec<&'a TokenSequence> {
    idx.iter().map(|&i| &xs[i]).collect()
}

fn contrastive_step(
    state: &mut ModelState,
    data: &PairedDataset,
    idx: &[usize],
    left_al: &AlChoice,
    right_al: &AlChoice,
    opts: LossOptions,
) -> Result<f64> {
    let (ma, mb) = (&data.modalities.0, &data.modalities.1);
    let grads = {
        let mut g = Graph::new(&state.params);
        let xa = stack_input(&mut g, &refs(&data.left, idx))?;
        let xb = stack_input(&mut g, &refs(&data.right, idx))?;
        let (ea, _) = encode_graph(&mut g, state, ma, xa, left_al)?;
        let (eb, _) = encode_graph(&mut g, state, mb, xb, right_al)?;
        let lt = g.param(LOG_TAU)?;
        let loss = alignment_loss_graph(&mut g.tape, ea, eb, lt, opts)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Ok(value);
        }
        (g.backward(loss)?, value)
    };
    grads.0.accumulate_into(&mut state.params)?;
    Ok(grads.1)
}

/// Trains a fresh projection and the tokens of both modalities of `data`.
pub fn train_stage1(data: &PairedDataset, up: UpConfig, cfg: &TrainConfig) -> Result<(ModelState, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Batch("stage-1 dataset is empty".into()));
    }
    let (ma, mb) = (data.modalities.0.clone(), data.modalities.1.clone());
    let mut state = ModelState::new(up, cfg.seed)?;
    state.registry.set_stage1(&ma, &mb)?;
    state.init_token(&ma, cfg.seed);
    state.init_token(&mb, cfg.seed);
    state.set_log_tau((cfg.tau_init as f32 as f64).ln() as f32 as f64)?;
    state.params.set_frozen_all(false);
    state.params.get_mut(LOG_TAU)?.frozen = !cfg.train_tau;
    let opts = LossOptions {
        target_grad: cfg.target_grad,
    };
    let report = run_loop(&mut state, data.len(), cfg, |s, idx| {
        contrastive_step(s, data, idx, &AlChoice::Auto, &AlChoice::Auto, opts)
    })?;
    Ok((state, report))
}

/// Aligns `new_modality` through a pairing with the already aligned
/// `bridge`. Only the new alignment layer, the new token, and (optionally)
/// the temperature train.
pub fn train_stage2(
    state: &ModelState,
    new_modality: &str,
    bridge: &str,
    data: &PairedDataset,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainReport)> {
    cfg.validate()?;
    if !state.registry.is_aligned(bridge) {
        return Err(Error::Precondition(format!(
            "bridge modality '{bridge}' is not aligned (aligned: {:?})",
            state.registry.aligned()
        )));
    }
    if state.registry.is_aligned(new_modality) {
        return Err(Error::Duplicate(new_modality.to_string()));
    }
    let data = match (&data.modalities.0, &data.modalities.1) {
        (a, b) if a == bridge && b == new_modality => data.clone(),
        (a, b) if a == new_modality && b == bridge => data.swapped(),
        (a, b) => {
            return Err(Error::Config(format!(
                "dataset pairs '{a}' with '{b}', expected '{bridge}' with '{new_modality}'"
            )))
        }
    };
    if data.is_empty() {
        return Err(Error::Batch("stage-2 dataset is empty".into()));
    }
    let mut next = state.clone();
    next.params.set_frozen_all(true);
    next.registry.add(new_modality)?;
    next.init_token(new_modality, cfg.seed);
    next.init_alignment_layer(new_modality, cfg.al_hidden.unwrap_or(next.config.dim), cfg.seed)?;
    next.params.set_frozen_prefix(&token_name(new_modality), false);
    next.params.set_frozen_prefix(&al_prefix(new_modality), false);
    next.params.get_mut(LOG_TAU)?.frozen = !cfg.train_tau;

    let bridge_al = if cfg.al_on_bridge {
        AlChoice::Use(new_modality.to_string())
    } else {
        AlChoice::Auto
    };
    let opts = LossOptions {
        target_grad: cfg.target_grad,
    };
    let report = run_loop(&mut next, data.len(), cfg, |s, idx| {
        contrastive_step(s, &data, idx, &bridge_al, &AlChoice::Auto, opts)
    })?;
    Ok((next, report))
}

/// Trains a fresh projection, two tokens, and an answer head on
/// (image, question) → answer triples.
pub fn train_vqa(
    data: &VqaSplit,
    modalities: (&str, &str),
    vocabulary: Vec<String>,
    up: UpConfig,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainReport)> {
    cfg.validate()?;
    if data.answers.is_empty() {
        return Err(Error::Batch("VQA dataset is empty".into()));
    }
    let head = PredictionHead::new(vocabulary)?;
    let labels = data
        .answers
        .iter()
        .map(|a| head.index_of(a))
        .collect::<Result<Vec<_>>>()?;
    let (mi, mq) = modalities;
    let mut state = ModelState::new(up, cfg.seed)?;
    state.registry.set_stage1(mi, mq)?;
    state.init_token(mi, cfg.seed);
    state.init_token(mq, cfg.seed);
    state.init_head(head, cfg.seed);
    state.params.set_frozen_all(false);
    state.params.get_mut(LOG_TAU)?.frozen = true;
    let report = run_loop(&mut state, labels.len(), cfg, |s, idx| {
        let (grads, value) = {
            let mut g = Graph::new(&s.params);
            let xi = stack_input(&mut g, &refs(&data.images, idx))?;
            let xq = stack_input(&mut g, &refs(&data.questions, idx))?;
            let logits = vqa_graph(&mut g, s, mi, mq, xi, xq)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy_graph(&mut g.tape, logits, &y)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Ok(value);
            }
            (g.backward(loss)?, value)
        };
        grads.accumulate_into(&mut s.params)?;
        Ok(value)
    })?;
    Ok((state, report))
}

// ---------------------------------------------------------------------------
// Checkpoints

/// A model state as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub state: ModelState,
}

fn pooling_code(p: Pooling) -> u8 {
    match p {
        Pooling::Mean => 0,
        Pooling::FirstToken => 1,
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn new(state: ModelState) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            state,
        }
    }

    /// Canonical encoding: config, parameters (sorted by name), registry,
    /// head vocabulary, temperature, metadata, checksum.
    pub fn encode(&self) -> Vec<u8> {
        let s = &self.state;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());

        let c = &s.config;
        for v in [c.depth, c.dim, c.heads, c.mlp_ratio, c.tokens] {
            put_u32(&mut out, v);
        }
        out.push(c.fusion.code());
        out.push(pooling_code(c.pooling));

        put_u32(&mut out, s.params.len());
        for (name, p) in s.params.iter() {
            put_str(&mut out, name);
            out.push(u8::from(p.frozen));
            out.push(u8::from(p.decay));
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                put_u32(&mut out, d);
            }
            for &v in p.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }

        put_u32(&mut out, s.registry.aligned().len());
        for m in s.registry.aligned() {
            put_str(&mut out, m);
        }
        match s.registry.stage1_pair() {
            Some((a, b)) => {
                out.push(1);
                put_str(&mut out, a);
                put_str(&mut out, b);
            }
            None => out.push(0),
        }

        match &s.head {
            Some(h) => {
                out.push(1);
                put_u32(&mut out, h.len());
                for a in h.vocabulary() {
                    put_str(&mut out, a);
                }
            }
            None => out.push(0),
        }

        out.extend_from_slice(&((s.log_tau() as f32) as f64).to_le_bytes());
        out.extend_from_slice(&s.meta.step.to_le_bytes());
        out.extend_from_slice(&s.meta.seed.to_le_bytes());
        out.extend_from_slice(&s.meta.loss.to_le_bytes());

        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic: not a checkpoint".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 14 {
            return Err(Error::Corruption {
                offset: bytes.len(),
                reason: "truncated before checksum".into(),
            });
        }
        let body_end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
        if stored != checksum(&bytes[..body_end]) {
            return Err(Error::Corruption {
                offset: body_end,
                reason: "checksum mismatch".into(),
            });
        }
        let mut r = Reader::new(&bytes[..body_end]);
        r.take(6)?;
        let state = decode_state(&mut r)?;
        if r.remaining() != 0 {
            return Err(Error::Corruption {
                offset: r.pos,
                reason: format!("{} unexpected trailing bytes", r.remaining()),
            });
        }
        Ok(Self { version, state })
    }
}

fn bad(r: &Reader, reason: impl Into<String>) -> Error {
    Error::Corruption {
        offset: r.pos,
        reason: reason.into(),
    }
}

fn decode_state(r: &mut Reader) -> Result<ModelState> {
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let fusion = FusionMode::from_code(r.u8()?).ok_or_else(|| bad(r, "unknown fusion code"))?;
    let pooling = match r.u8()? {
        0 => Pooling::Mean,
        1 => Pooling::FirstToken,
        _ => return Err(bad(r, "unknown pooling code")),
    };
    let config = UpConfig {
        depth: dims[0],
        dim: dims[1],
        heads: dims[2],
        mlp_ratio: dims[3],
        tokens: dims[4],
        fusion,
        pooling,
    };
    config.validate().map_err(|e| bad(r, format!("invalid config: {e}")))?;

    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let frozen = r.u8()? != 0;
        let decay = r.u8()? != 0;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        if n > r.remaining() / 4 {
            return Err(bad(r, format!("parameter '{name}' exceeds file size")));
        }
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.f32()? as f64);
        }
        let mut p = Parameter::new(Tensor::new(shape, values)?, decay);
        p.frozen = frozen;
        if params.contains(&name) {
            return Err(bad(r, format!("parameter '{name}' appears twice")));
        }
        params.insert(name, p);
    }

    let n_aligned = r.u32()? as usize;
    let mut aligned = Vec::new();
    for _ in 0..n_aligned {
        aligned.push(r.string()?);
    }
    let stage1 = match r.u8()? {
        0 => None,
        1 => Some((r.string()?, r.string()?)),
        _ => return Err(bad(r, "bad stage-1 flag")),
    };
    let head = match r.u8()? {
        0 => None,
        1 => {
            let v = r.u32()? as usize;
            let mut vocab = Vec::new();
            for _ in 0..v {
                vocab.push(r.string()?);
            }
            Some(PredictionHead::new(vocab).map_err(|e| bad(r, e.to_string()))?)
        }
        _ => return Err(bad(r, "bad head flag")),
    };
    let log_tau = r.f64()?;
    let meta = TrainingMeta {
        step: r.u64()?,
        seed: r.u64()?,
        loss: r.f64()?,
    };
    let state = ModelState {
        config,
        params,
        registry: ModalityRegistry::from_parts(aligned, stage1),
        head,
        meta,
    };
    if state.log_tau().to_bits() != log_tau.to_bits() {
        return Err(bad(r, "temperature record disagrees with log_tau parameter"));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let bytes = Checkpoint::new(state.clone()).encode();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::decode(&bytes)?.state)
}
