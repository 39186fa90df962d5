//! `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use oneencoder::data::{ModalitySpec, SyntheticWorldConfig};
use oneencoder::{Error, FusionMode, Pooling, Result, TrainConfig, UpConfig};

/// `(key, default, description)`. A `None` default marks a required key.
pub const KEYS: &[(&str, Option<&str>, &str)] = &[
    ("latent_dim", None, "synthetic world latent dimension Z"),
    ("world", Some("paired"), "synthetic world kind: paired, labeled or vqa"),
    (
        "modalities",
        Some("image:4:768:101 text:4:768:202 audio:4:768:303"),
        "synthetic modalities as name:L:D:seed, space separated",
    ),
    ("noise_std", Some("0.1"), "per-modality latent noise"),
    ("class_count", Some("10"), "classes in a labeled world"),
    ("encoder_hidden", Some("64"), "hidden width of the synthetic encoders"),
    ("train_count", Some("256"), "synthetic training samples"),
    ("validation_count", Some("64"), "synthetic validation samples"),
    ("seed", Some("0"), "seed for data generation and training"),
    ("depth", Some("4"), "transformer blocks"),
    ("dim", Some("768"), "embedding width D"),
    ("heads", Some("12"), "attention heads"),
    ("mlp_ratio", Some("4"), "MLP hidden width as a multiple of D"),
    ("tokens", Some("1"), "modality tokens per modality"),
    ("fusion", Some("addition"), "addition, concatenation or cross_attention"),
    ("pooling", Some("mean"), "mean or first_token"),
    ("epochs", Some("auto"), "epochs (auto: 500 for stage 1, 100 for stage 2)"),
    ("max_steps", Some("0"), "stop after this many steps (0: run all epochs)"),
    ("batch_size", Some("auto"), "batch size (auto: 512 for stage 1, 64 for stage 2)"),
    ("learning_rate", Some("0.001"), "AdamW learning rate"),
    ("beta1", Some("0.9"), "AdamW beta1"),
    ("beta2", Some("0.95"), "AdamW beta2"),
    ("eps", Some("1e-8"), "AdamW epsilon"),
    ("weight_decay", Some("0.001"), "decoupled weight decay"),
    ("tau_init", Some("0.07"), "initial temperature"),
    ("train_tau", Some("true"), "learn the temperature"),
    ("clip_norm", Some("1.0"), "global gradient-norm clip, or off"),
    ("al_on_bridge", Some("false"), "stage 2: also apply the new alignment layer to the bridge"),
    ("al_hidden", Some("auto"), "alignment layer hidden width (auto: D)"),
    ("target_grad", Some("false"), "backpropagate through the soft targets"),
    ("drop_last", Some("true"), "drop the final partial batch of each epoch"),
    ("verify_freeze", Some("false"), "check frozen parameters after every step"),
    ("ks", Some("1 5 10"), "retrieval cutoffs"),
    ("wups_threshold", Some("0.9"), "WUPS threshold"),
    ("split", Some("validation"), "evaluation split"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let k = k.trim();
            if !known(k) {
                return Err(Error::Config(format!("line {}: unknown key '{k}'", no + 1)));
            }
            cfg.values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        if let Some(v) = self.values.get(key) {
            return Ok(v);
        }
        match KEYS.iter().find(|(k, _, _)| *k == key) {
            Some((_, Some(d), _)) => Ok(d),
            Some((_, None, _)) => Err(Error::Config(format!("missing required key '{key}'"))),
            None => Err(Error::Config(format!("unknown key '{key}'"))),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|e| Error::Config(format!("key '{key}': cannot parse '{raw}': {e}")))
    }

    fn get_auto(&self, key: &str, auto: usize) -> Result<usize> {
        match self.raw(key)? {
            "auto" => Ok(auto),
            _ => self.get(key),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        self.raw(key)?
            .split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|e| Error::Config(format!("key '{key}': cannot parse '{s}': {e}")))
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn up_config(&self) -> Result<UpConfig> {
        let up = UpConfig {
            depth: self.get("depth")?,
            dim: self.get("dim")?,
            heads: self.get("heads")?,
            mlp_ratio: self.get("mlp_ratio")?,
            tokens: self.get("tokens")?,
            fusion: self.get::<FusionMode>("fusion")?,
            pooling: self.get::<Pooling>("pooling")?,
        };
        up.validate()?;
        Ok(up)
    }

    pub fn train_config(&self, stage: Stage) -> Result<TrainConfig> {
        let base = match stage {
            Stage::One => TrainConfig::stage1(),
            Stage::Two => TrainConfig::stage2(),
        };
        let max_steps: usize = self.get("max_steps")?;
        let clip_norm = match self.raw("clip_norm")? {
            "off" | "none" => None,
            _ => Some(self.get("clip_norm")?),
        };
        let al_hidden = match self.raw("al_hidden")? {
            "auto" => None,
            _ => Some(self.get("al_hidden")?),
        };
        let cfg = TrainConfig {
            epochs: self.get_auto("epochs", base.epochs)?,
            max_steps: (max_steps > 0).then_some(max_steps),
            batch_size: self.get_auto("batch_size", base.batch_size)?,
            learning_rate: self.get("learning_rate")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            eps: self.get("eps")?,
            weight_decay: self.get("weight_decay")?,
            seed: self.seed()?,
            tau_init: self.get("tau_init")?,
            train_tau: self.get("train_tau")?,
            clip_norm,
            al_on_bridge: self.get("al_on_bridge")?,
            al_hidden,
            target_grad: self.get("target_grad")?,
            drop_last: self.get("drop_last")?,
            verify_freeze: self.get("verify_freeze")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn modalities(&self) -> Result<Vec<ModalitySpec>> {
        self.raw("modalities")?
            .split_whitespace()
            .map(|item| {
                let parts: Vec<&str> = item.split(':').collect();
                let bad = || Error::Config(format!("key 'modalities': '{item}' is not name:L:D:seed"));
                let [name, l, d, s] = parts[..] else {
                    return Err(bad());
                };
                Ok(ModalitySpec::new(
                    name,
                    l.parse().map_err(|_| bad())?,
                    d.parse().map_err(|_| bad())?,
                    s.parse().map_err(|_| bad())?,
                ))
            })
            .collect()
    }

    pub fn world_config(&self) -> Result<SyntheticWorldConfig> {
        let labeled = self.raw("world")? == "labeled";
        let cfg = SyntheticWorldConfig {
            latent_dim: self.get("latent_dim")?,
            modalities: self.modalities()?,
            noise_std: self.get("noise_std")?,
            class_count: if labeled { Some(self.get("class_count")?) } else { None },
            encoder_hidden: self.get("encoder_hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ks(&self) -> Result<Vec<usize>> {
        let ks: Vec<usize> = self.list("ks")?;
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::Config("key 'ks': cutoffs must be positive".into()));
        }
        Ok(ks)
    }

    /// Every key with its effective value, one `key = value` line each.
    /// Required keys that were never given are left out.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in KEYS {
            if let Ok(v) = self.raw(k) {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}
