//! Frozen encoders, synthetic paired worlds, feature files, manifests, and
//! batch iteration.
//!
//! Real deployments feed precomputed encoder outputs through feature files.
//! For desk-scale verification, [`synth_world`] draws latent vectors and
//! pushes them through seeded random two-layer encoders, so every modality
//! of sample `i` is a different nonlinear view of the same latent.

use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use crate::compute::{matmul, RngStream, Tensor};
use crate::error::{Error, Result};
use crate::TokenSequence;

pub const FEATURE_MAGIC: &[u8; 4] = b"OEFT";
pub const FEATURE_VERSION: u16 = 1;

/// FNV-1a over `bytes`.
pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Shape and weight seed of one modality's synthetic encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalitySpec {
    pub name: String,
    pub len: usize,
    pub dim: usize,
    pub seed: u64,
}

impl ModalitySpec {
    pub fn new(name: &str, len: usize, dim: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            len,
            dim,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderKind {
    /// `reshape(W2 · tanh(W1 · z + b1))`, weights fixed by the seed.
    Synthetic { w1: Tensor, b1: Tensor, w2: Tensor },
    /// Features were computed elsewhere and stored in a feature file.
    FeatureFile { path: PathBuf },
}

/// A never-trained feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    pub modality: String,
    pub out_len: usize,
    pub out_dim: usize,
    pub kind: EncoderKind,
}

impl FrozenEncoder {
    /// Seeded random encoder from `input_dim` to `[len, dim]`. Weights are
    /// Gaussian scaled by `1/sqrt(fan_in)` and depend only on `spec.seed`.
    pub fn synthetic(spec: &ModalitySpec, input_dim: usize, hidden: usize) -> Self {
        let mut rng = RngStream::new(spec.seed);
        let w1 = rng.normal_tensor(&[input_dim, hidden], 1.0 / (input_dim as f64).sqrt());
        let b1 = rng.normal_tensor(&[1, hidden], 0.1);
        let w2 = rng.normal_tensor(&[hidden, spec.len * spec.dim], 1.0 / (hidden as f64).sqrt());
        Self {
            modality: spec.name.clone(),
            out_len: spec.len,
            out_dim: spec.dim,
            kind: EncoderKind::Synthetic { w1, b1, w2 },
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let ff = load_features(path)?;
        let (out_len, out_dim) = ff.record_shape();
        Ok(Self {
            modality: ff.modality,
            out_len,
            out_dim,
            kind: EncoderKind::FeatureFile {
                path: path.to_path_buf(),
            },
        })
    }

    /// Encodes a batch of input vectors, one per row of `inputs`.
    pub fn encode_rows(&self, inputs: &Tensor) -> Result<Vec<TokenSequence>> {
        let EncoderKind::Synthetic { w1, b1, w2 } = &self.kind else {
            return Err(Error::Config(format!(
                "encoder for '{}' reads precomputed features and cannot encode raw inputs",
                self.modality
            )));
        };
        let h = matmul(inputs, w1)?;
        let mut h = h;
        for r in 0..h.rows() {
            for (v, b) in h.row_mut(r).iter_mut().zip(b1.data()) {
                *v = (*v + b).tanh();
            }
        }
        let out = matmul(&h, w2)?;
        (0..out.rows())
            .map(|r| Tensor::matrix(self.out_len, self.out_dim, out.row(r).to_vec()))
            .collect()
    }

    pub fn encode(&self, input: &[f64]) -> Result<TokenSequence> {
        let t = Tensor::matrix(1, input.len(), input.to_vec())?;
        Ok(self.encode_rows(&t)?.remove(0))
    }

    /// Bit patterns of the frozen weights.
    pub fn fingerprint(&self) -> Vec<u64> {
        match &self.kind {
            EncoderKind::Synthetic { w1, b1, w2 } => [w1, b1, w2]
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                .collect(),
            EncoderKind::FeatureFile { path } => vec![checksum(path.to_string_lossy().as_bytes())],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorldConfig {
    pub latent_dim: usize,
    pub modalities: Vec<ModalitySpec>,
    pub noise_std: f64,
    pub class_count: Option<usize>,
    pub encoder_hidden: usize,
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.encoder_hidden == 0 {
            return Err(Error::Config("encoder_hidden must be positive".into()));
        }
        if self.class_count == Some(0) {
            return Err(Error::Config("class_count must be positive".into()));
        }
        let mut names: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("modality names must be unique".into()));
        }
        for m in &self.modalities {
            if m.len == 0 || m.dim == 0 {
                return Err(Error::Config(format!("modality '{}' needs positive L and D", m.name)));
            }
        }
        Ok(())
    }

    pub fn encoders(&self) -> Vec<FrozenEncoder> {
        self.modalities
            .iter()
            .map(|m| FrozenEncoder::synthetic(m, self.latent_dim, self.encoder_hidden))
            .collect()
    }
}

/// Samples drawn from a shared latent, viewed through every modality.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub latents: Vec<Vec<f64>>,
    pub features: Vec<(String, Vec<TokenSequence>)>,
    pub labels: Option<Vec<usize>>,
    /// Unit class directions, when the world is labeled.
    pub anchors: Vec<Vec<f64>>,
    pub encoders: Vec<FrozenEncoder>,
    pub ids: Vec<usize>,
}

/// Draws `count` samples. Each latent `z ~ N(0, I)`; modality `m` sees
/// `encoder_m(z + noise_std * eps_m)`. Labeled worlds assign each sample the
/// class whose anchor direction has the largest inner product with `z`.
pub fn synth_world(config: &SyntheticWorldConfig, count: usize, seed: u64) -> Result<SyntheticWorld> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let z_dim = config.latent_dim;
    let mut latent_rng = RngStream::derive(seed, "latent");
    let latents: Vec<Vec<f64>> = (0..count)
        .map(|_| (0..z_dim).map(|_| latent_rng.normal()).collect())
        .collect();

    let (anchors, labels) = match config.class_count {
        Some(c) => {
            let mut rng = RngStream::derive(seed, "anchors");
            let anchors: Vec<Vec<f64>> = (0..c)
                .map(|_| {
                    let v: Vec<f64> = (0..z_dim).map(|_| rng.normal()).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect();
            let labels = latents.iter().map(|z| nearest_anchor(z, &anchors)).collect();
            (anchors, Some(labels))
        }
        None => (Vec::new(), None),
    };

    let encoders = config.encoders();
    let mut features = Vec::with_capacity(encoders.len());
    for enc in &encoders {
        let mut noise = RngStream::derive(seed, &format!("noise.{}", enc.modality));
        let mut inputs = Vec::with_capacity(count * z_dim);
        for z in &latents {
            for &v in z {
                inputs.push(v + config.noise_std * noise.normal());
            }
        }
        let seqs = enc.encode_rows(&Tensor::matrix(count, z_dim, inputs)?)?;
        features.push((enc.modality.clone(), seqs));
    }
    Ok(SyntheticWorld {
        latents,
        features,
        labels,
        anchors,
        encoders,
        ids: (0..count).collect(),
    })
}

fn nearest_anchor(z: &[f64], anchors: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, a) in anchors.iter().enumerate() {
        let v: f64 = z.iter().zip(a).map(|(p, q)| p * q).sum();
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

impl SyntheticWorld {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn modality(&self, name: &str) -> Result<&[TokenSequence]> {
        self.features
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, f)| f.as_slice())
            .ok_or_else(|| Error::UnknownModality {
                name: name.to_string(),
                known: self.features.iter().map(|(n, _)| n.clone()).collect(),
            })
    }

    pub fn pair(&self, a: &str, b: &str) -> Result<PairedDataset> {
        PairedDataset::new(
            (a, b),
            self.modality(a)?.to_vec(),
            self.modality(b)?.to_vec(),
            self.ids.clone(),
        )
    }

    /// First `at` samples and the rest.
    pub fn split(&self, at: usize) -> (SyntheticWorld, SyntheticWorld) {
        let at = at.min(self.len());
        let part = |r: std::ops::Range<usize>| SyntheticWorld {
            latents: self.latents[r.clone()].to_vec(),
            features: self
                .features
                .iter()
                .map(|(n, f)| (n.clone(), f[r.clone()].to_vec()))
                .collect(),
            labels: self.labels.as_ref().map(|l| l[r.clone()].to_vec()),
            anchors: self.anchors.clone(),
            encoders: self.encoders.clone(),
            ids: self.ids[r].to_vec(),
        };
        (part(0..at), part(at..self.len()))
    }

    /// Features of a class description: the class anchor, scaled to the
    /// typical latent norm, seen through `modality`'s encoder.
    pub fn class_prompt(&self, modality: &str, class: usize) -> Result<TokenSequence> {
        let enc = self
            .encoders
            .iter()
            .find(|e| e.modality == modality)
            .ok_or_else(|| Error::Config(format!("no encoder for '{modality}'")))?;
        let anchor = self
            .anchors
            .get(class)
            .ok_or_else(|| Error::Config(format!("class {class} does not exist")))?;
        let scale = (anchor.len() as f64).sqrt();
        enc.encode(&anchor.iter().map(|v| v * scale).collect::<Vec<_>>())
    }
}

/// The text prompt used to describe a class for zero-shot classification.
pub fn class_prompt_text(label: &str) -> String {
    format!("A photo of a {label}.")
}

/// Index-aligned samples of two modalities: `left[i]` pairs with `right[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub modalities: (String, String),
    pub left: Vec<TokenSequence>,
    pub right: Vec<TokenSequence>,
    pub ids: Vec<usize>,
}

/// `K` positive pairs; row `i` of both sides comes from sample `ids[i]`.
#[derive(Debug)]
pub struct PairedBatch<'a> {
    pub ids: Vec<usize>,
    pub left: Vec<&'a TokenSequence>,
    pub right: Vec<&'a TokenSequence>,
}

impl PairedBatch<'_> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl PairedDataset {
    pub fn new(
        modalities: (&str, &str),
        left: Vec<TokenSequence>,
        right: Vec<TokenSequence>,
        ids: Vec<usize>,
    ) -> Result<Self> {
        if left.len() != right.len() || left.len() != ids.len() {
            return Err(Error::Batch(format!(
                "paired lists differ in length: {} vs {}",
                left.len(),
                right.len()
            )));
        }
        Ok(Self {
            modalities: (modalities.0.to_string(), modalities.1.to_string()),
            left,
            right,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> PairedBatch<'_> {
        PairedBatch {
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            left: indices.iter().map(|&i| &self.left[i]).collect(),
            right: indices.iter().map(|&i| &self.right[i]).collect(),
        }
    }

    /// Same samples with the two sides swapped.
    pub fn swapped(&self) -> PairedDataset {
        PairedDataset {
            modalities: (self.modalities.1.clone(), self.modalities.0.clone()),
            left: self.right.clone(),
            right: self.left.clone(),
            ids: self.ids.clone(),
        }
    }
}

/// Index batches for one epoch: a seeded shuffle of `0..n` cut into chunks
/// of `k`. The order depends only on `(seed, epoch)`.
pub fn batch_iter(n: usize, k: usize, seed: u64, epoch: usize, drop_last: bool) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if drop_last && k > n {
        log::warn!("batch size {k} exceeds dataset size {n} with drop_last; the epoch is empty");
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::derive(seed, &format!("epoch.{epoch}")).shuffle(&mut order);
    let mut out: Vec<Vec<usize>> = order.chunks(k).map(<[usize]>::to_vec).collect();
    if drop_last && out.last().is_some_and(|b| b.len() < k) {
        out.pop();
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic VQA world

/// Question groups and their two possible answers.
pub const VQA_ATTRIBUTES: [(&str, [&str; 2]); 4] = [
    ("color", ["red", "blue"]),
    ("size", ["small", "large"]),
    ("shape", ["round", "square"]),
    ("material", ["metal", "wood"]),
];

pub const VQA_TAXONOMY_ROOT: &str = "entity";

#[derive(Debug, Clone, PartialEq)]
pub struct VqaWorldConfig {
    pub latent_dim: usize,
    pub image: ModalitySpec,
    pub question: ModalitySpec,
    pub noise_std: f64,
    pub encoder_hidden: usize,
}

/// Images and questions that jointly determine one of eight answers: a
/// question selects an attribute, whose value is the sign of the image
/// latent along that attribute's hidden direction.
#[derive(Debug, Clone)]
pub struct VqaWorld {
    pub images: Vec<TokenSequence>,
    pub questions: Vec<TokenSequence>,
    pub answers: Vec<String>,
    pub image_encoder: FrozenEncoder,
    pub question_encoder: FrozenEncoder,
}

pub fn vqa_vocabulary() -> Vec<String> {
    VQA_ATTRIBUTES
        .iter()
        .flat_map(|(_, a)| a.iter().map(|s| s.to_string()))
        .collect()
}

/// `child<TAB>parent` lines of the answer taxonomy.
pub fn vqa_taxonomy_lines() -> Vec<String> {
    let mut out = Vec::new();
    for (group, answers) in VQA_ATTRIBUTES {
        out.push(format!("{group}\t{VQA_TAXONOMY_ROOT}"));
        for a in answers {
            out.push(format!("{a}\t{group}"));
        }
    }
    out
}

pub fn synth_vqa_world(config: &VqaWorldConfig, count: usize, seed: u64) -> Result<VqaWorld> {
    if config.latent_dim == 0 || count == 0 {
        return Err(Error::Config("VQA world needs positive latent_dim and count".into()));
    }
    let q_count = VQA_ATTRIBUTES.len();
    let z_dim = config.latent_dim;
    let image_encoder = FrozenEncoder::synthetic(&config.image, z_dim, config.encoder_hidden);
    let question_encoder = FrozenEncoder::synthetic(&config.question, q_count, config.encoder_hidden);

    // Directions are a property of the world, not of the sample draw.
    let mut dir_rng = RngStream::new(config.image.seed ^ 0x5eed_d1e5);
    let directions: Vec<Vec<f64>> = (0..q_count)
        .map(|_| (0..z_dim).map(|_| dir_rng.normal()).collect())
        .collect();

    let mut rng = RngStream::derive(seed, "vqa");
    let mut z_rows = Vec::with_capacity(count * z_dim);
    let mut q_rows = Vec::with_capacity(count * q_count);
    let mut answers = Vec::with_capacity(count);
    for _ in 0..count {
        let z: Vec<f64> = (0..z_dim).map(|_| rng.normal()).collect();
        let q = rng.below(q_count);
        let proj: f64 = z.iter().zip(&directions[q]).map(|(a, b)| a * b).sum();
        let (_, pair) = VQA_ATTRIBUTES[q];
        answers.push(pair[usize::from(proj > 0.0)].to_string());
        z_rows.extend(z.iter().map(|v| v + config.noise_std * rng.normal()));
        q_rows.extend((0..q_count).map(|i| {
            let onehot = if i == q { 1.0 } else { 0.0 };
            onehot + config.noise_std * rng.normal()
        }));
    }
    let images = image_encoder.encode_rows(&Tensor::matrix(count, z_dim, z_rows)?)?;
    let questions = question_encoder.encode_rows(&Tensor::matrix(count, q_count, q_rows)?)?;
    Ok(VqaWorld {
        images,
        questions,
        answers,
        image_encoder,
        question_encoder,
    })
}

impl VqaWorld {
    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn split(&self, at: usize) -> (VqaWorld, VqaWorld) {
        let at = at.min(self.len());
        let part = |r: std::ops::Range<usize>| VqaWorld {
            images: self.images[r.clone()].to_vec(),
            questions: self.questions[r.clone()].to_vec(),
            answers: self.answers[r].to_vec(),
            image_encoder: self.image_encoder.clone(),
            question_encoder: self.question_encoder.clone(),
        };
        (part(0..at), part(at..self.len()))
    }
}

// ---------------------------------------------------------------------------
// Feature files

/// Decoded contents of a feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub modality: String,
    pub records: Vec<TokenSequence>,
    len: usize,
    dim: usize,
}

impl FeatureFile {
    pub fn new(modality: &str, records: Vec<TokenSequence>) -> Result<Self> {
        let (len, dim) = records.first().map_or((0, 0), |r| (r.rows(), r.cols()));
        for r in &records {
            if r.shape().len() != 2 || r.rows() != len || r.cols() != dim {
                return Err(Error::dim("FeatureFile", &[len, dim], r.shape()));
            }
        }
        if modality.len() > u16::MAX as usize {
            return Err(Error::Format("modality name too long".into()));
        }
        Ok(Self {
            modality: modality.to_string(),
            records,
            len,
            dim,
        })
    }

    /// `(L, D)` of every record.
    pub fn record_shape(&self) -> (usize, usize) {
        (self.len, self.dim)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(26 + self.modality.len() + self.records.len() * self.len * self.dim * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.modality.len() as u16).to_le_bytes());
        out.extend_from_slice(self.modality.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for r in &self.records {
            for &v in r.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != FEATURE_MAGIC {
            return Err(Error::Format("bad magic: not a feature file".into()));
        }
        let version = r.u16()?;
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!(
                "unsupported feature file version {version} (expected {FEATURE_VERSION})"
            )));
        }
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("modality name is not UTF-8".into()))?
            .to_string();
        let count = r.u32()? as usize;
        let len = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let body = count
            .checked_mul(len)
            .and_then(|v| v.checked_mul(dim))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Corruption {
                offset: r.pos,
                reason: "record size overflows".into(),
            })?;
        let expected_total = r.pos + body + 8;
        if bytes.len() != expected_total {
            return Err(Error::Corruption {
                offset: bytes.len().min(expected_total),
                reason: format!(
                    "header declares {count} records of {len}x{dim} ({expected_total} bytes) but file has {} bytes",
                    bytes.len()
                ),
            });
        }
        let body_start = r.pos;
        let floats = r.take(body)?;
        let stored = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if stored != checksum(&bytes[..body_start + body]) {
            return Err(Error::Corruption {
                offset: body_start + body,
                reason: "checksum mismatch".into(),
            });
        }
        let values: Vec<f64> = floats
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let per = len * dim;
        let records = if per == 0 {
            (0..count).map(|_| Tensor::zeros(&[len, dim])).collect()
        } else {
            values
                .chunks_exact(per)
                .map(|c| Tensor::matrix(len, dim, c.to_vec()))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            modality: name,
            records,
            len,
            dim,
        })
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption {
                offset: self.bytes.len(),
                reason: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        std::str::from_utf8(self.take(n)?)
            .map(str::to_string)
            .map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn write_features(path: &Path, modality: &str, records: &[TokenSequence]) -> Result<()> {
    let ff = FeatureFile::new(modality, records.to_vec())?;
    fs::write(path, ff.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureFile::decode(&bytes)
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestKind {
    /// `split  file_a  file_b`
    Paired,
    /// `split  file  label`; split `prompt` marks class-description features.
    Labeled,
    /// `split  image_file  question_file  answers_file`
    Vqa,
}

impl ManifestKind {
    fn as_str(&self) -> &'static str {
        match self {
            ManifestKind::Paired => "paired",
            ManifestKind::Labeled => "labeled",
            ManifestKind::Vqa => "vqa",
        }
    }

    fn fields(&self) -> usize {
        match self {
            ManifestKind::Paired | ManifestKind::Labeled => 3,
            ManifestKind::Vqa => 4,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "validation", "prompt"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub split: String,
    pub fields: Vec<String>,
}

/// Tab-separated dataset description; `#` starts a comment line.
///
/// ```text
/// kind        paired
/// modalities  image   text
/// train       image.train.oeft    text.train.oeft
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub kind: ManifestKind,
    pub modalities: Vec<String>,
    pub records: Vec<ManifestRecord>,
    /// Directory relative paths resolve against.
    pub base: PathBuf,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kind = None;
        let mut modalities = Vec::new();
        let mut records = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |msg: String| Error::Format(format!("manifest line {}: {msg}", no + 1));
            match fields[0] {
                "kind" => {
                    kind = Some(match fields.get(1).copied() {
                        Some("paired") => ManifestKind::Paired,
                        Some("labeled") => ManifestKind::Labeled,
                        Some("vqa") => ManifestKind::Vqa,
                        other => return Err(bad(format!("unknown kind {other:?}"))),
                    })
                }
                "modalities" => modalities = fields[1..].iter().map(|s| s.to_string()).collect(),
                split if SPLITS.contains(&split) => {
                    let k = kind.ok_or_else(|| bad("record before 'kind' line".into()))?;
                    if fields.len() != k.fields() {
                        return Err(bad(format!(
                            "expected {} tab-separated fields, found {}",
                            k.fields(),
                            fields.len()
                        )));
                    }
                    records.push(ManifestRecord {
                        split: split.to_string(),
                        fields: fields[1..].iter().map(|s| s.to_string()).collect(),
                    });
                }
                other => return Err(bad(format!("unknown directive or split '{other}'"))),
            }
        }
        let kind = kind.ok_or_else(|| Error::Format("manifest has no 'kind' line".into()))?;
        let want = match kind {
            ManifestKind::Paired | ManifestKind::Vqa => 2,
            ManifestKind::Labeled => 1,
        };
        if modalities.len() < want {
            return Err(Error::Format(format!(
                "{} manifest needs {want} modalities, found {}",
                kind.as_str(),
                modalities.len()
            )));
        }
        Ok(Self {
            kind,
            modalities,
            records,
            base: base.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("kind\t{}\n", self.kind.as_str()));
        out.push_str(&format!("modalities\t{}\n", self.modalities.join("\t")));
        for r in &self.records {
            out.push_str(&format!("{}\t{}\n", r.split, r.fields.join("\t")));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }

    fn records_in<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a ManifestRecord> + 'a {
        self.records.iter().filter(move |r| r.split == split)
    }

    fn expect_kind(&self, kind: ManifestKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a {} manifest, got {}",
                kind.as_str(),
                self.kind.as_str()
            )));
        }
        Ok(())
    }

    fn load_checked(&self, rel: &str, modality: &str) -> Result<FeatureFile> {
        let ff = load_features(&self.resolve(rel))?;
        if ff.modality != modality {
            return Err(Error::Format(format!(
                "{rel} holds '{}' features, manifest expects '{modality}'",
                ff.modality
            )));
        }
        Ok(ff)
    }

    /// All pairs of a split, in record order.
    pub fn load_paired(&self, split: &str) -> Result<PairedDataset> {
        self.expect_kind(ManifestKind::Paired)?;
        let (ma, mb) = (&self.modalities[0], &self.modalities[1]);
        let mut left = Vec::new();
        let mut right = Vec::new();
        for r in self.records_in(split) {
            let a = self.load_checked(&r.fields[0], ma)?;
            let b = self.load_checked(&r.fields[1], mb)?;
            if a.records.len() != b.records.len() {
                return Err(Error::Batch(format!(
                    "{} has {} records but {} has {}",
                    r.fields[0],
                    a.records.len(),
                    r.fields[1],
                    b.records.len()
                )));
            }
            left.extend(a.records);
            right.extend(b.records);
        }
        let ids = (0..left.len()).collect();
        PairedDataset::new((ma, mb), left, right, ids)
    }

    /// `(features, label)` of a split of a labeled manifest.
    pub fn load_labeled(&self, split: &str) -> Result<(Vec<TokenSequence>, Vec<String>)> {
        self.expect_kind(ManifestKind::Labeled)?;
        let modality = if split == "prompt" {
            self.modalities.get(1).unwrap_or(&self.modalities[0])
        } else {
            &self.modalities[0]
        };
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for r in self.records_in(split) {
            let ff = self.load_checked(&r.fields[0], modality)?;
            labels.extend(std::iter::repeat_n(r.fields[1].clone(), ff.records.len()));
            feats.extend(ff.records);
        }
        Ok((feats, labels))
    }

    pub fn load_vqa(&self, split: &str) -> Result<VqaSplit> {
        self.expect_kind(ManifestKind::Vqa)?;
        let mut out = VqaSplit::default();
        for r in self.records_in(split) {
            let img = self.load_checked(&r.fields[0], &self.modalities[0])?;
            let q = self.load_checked(&r.fields[1], &self.modalities[1])?;
            let path = self.resolve(&r.fields[2]);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let answers: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
            if img.records.len() != q.records.len() || q.records.len() != answers.len() {
                return Err(Error::Batch(format!(
                    "VQA record counts differ: {} images, {} questions, {} answers",
                    img.records.len(),
                    q.records.len(),
                    answers.len()
                )));
            }
            out.images.extend(img.records);
            out.questions.extend(q.records);
            out.answers.extend(answers);
        }
        Ok(out)
    }

    /// Loads every split the manifest references; fails on the first bad file.
    pub fn validate(&self) -> Result<()> {
        let splits: Vec<&str> = SPLITS
            .iter()
            .copied()
            .filter(|s| self.records.iter().any(|r| r.split == *s))
            .collect();
        for s in splits {
            match self.kind {
                ManifestKind::Paired => {
                    self.load_paired(s)?;
                }
                ManifestKind::Labeled => {
                    self.load_labeled(s)?;
                }
                ManifestKind::Vqa => {
                    self.load_vqa(s)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct VqaSplit {
    pub images: Vec<TokenSequence>,
    pub questions: Vec<TokenSequence>,
    pub answers: Vec<String>,
}
