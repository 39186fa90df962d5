use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use oneencoder::data::{
    class_prompt_text, load_features, synth_vqa_world, synth_world, vqa_taxonomy_lines, DatasetManifest,
    FeatureFile, ManifestKind, ManifestRecord, PairedDataset, VqaWorldConfig,
};
use oneencoder::eval::{
    accuracy, argmax, macro_f1, retrieval_report, wups_score, zero_shot_classify, Report, TaxonomyGraph,
};
use oneencoder::loss::{TAU_MAX, TAU_MIN};
use oneencoder::model::{encode_batch, vqa_logits};
use oneencoder::pipeline::{load_checkpoint, train_stage1, train_stage2, train_vqa, Checkpoint, TrainReport};
use oneencoder::{Error, ModelState, Result, Tensor, TokenSequence};

use crate::config::{RunConfig, Stage};

/// Files of one command, written together once everything has succeeded.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    pub fn write(self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in self.files {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Refuses to reuse a non-empty directory unless forced.
pub fn check_out_dir(dir: &Path, force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    let non_empty = fs::read_dir(dir).is_ok_and(|mut entries| entries.next().is_some());
    if non_empty {
        return Err(Error::Precondition(format!(
            "output directory {} is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    Ok(())
}

fn feature_bytes(modality: &str, records: &[TokenSequence]) -> Result<Vec<u8>> {
    Ok(FeatureFile::new(modality, records.to_vec())?.encode())
}

fn manifest(kind: ManifestKind, modalities: &[&str], records: Vec<(&str, Vec<String>)>) -> DatasetManifest {
    DatasetManifest {
        kind,
        modalities: modalities.iter().map(|s| s.to_string()).collect(),
        records: records
            .into_iter()
            .map(|(split, fields)| ManifestRecord {
                split: split.to_string(),
                fields,
            })
            .collect(),
        base: PathBuf::new(),
    }
}

pub fn synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<String> {
    let world_kind = cfg.raw("world")?.to_string();
    let wc = cfg.world_config()?;
    let train: usize = cfg.get("train_count")?;
    let val: usize = cfg.get("validation_count")?;
    let seed = cfg.seed()?;
    if train == 0 {
        return Err(Error::Config("key 'train_count' must be positive".into()));
    }
    check_out_dir(out, force)?;

    let mut files = Outputs::default();
    let mut summary = String::new();
    let splits = |n: usize| -> Vec<&'static str> {
        if n > 0 {
            vec!["train", "validation"]
        } else {
            vec!["train"]
        }
    };
    match world_kind.as_str() {
        "paired" | "labeled" => {
            let world = synth_world(&wc, train + val, seed)?;
            let (tr, va) = world.split(train);
            let parts = [("train", &tr), ("validation", &va)];
            let names: Vec<&str> = wc.modalities.iter().map(|m| m.name.as_str()).collect();
            for (split, part) in parts.iter().take(splits(val).len()) {
                for m in &names {
                    files.add(format!("{m}.{split}.oeft"), feature_bytes(m, part.modality(m)?)?);
                }
            }
            for i in 0..names.len() {
                for j in i + 1..names.len() {
                    let (a, b) = (names[i], names[j]);
                    let recs = splits(val)
                        .into_iter()
                        .map(|s| (s, vec![format!("{a}.{s}.oeft"), format!("{b}.{s}.oeft")]))
                        .collect();
                    let m = manifest(ManifestKind::Paired, &[a, b], recs);
                    files.add(format!("pairs.{a}-{b}.tsv"), m.render());
                }
            }
            writeln!(summary, "paired world: {} modalities, {train} train / {val} validation", names.len()).ok();
            if world_kind == "labeled" {
                if names.len() < 2 {
                    return Err(Error::Config("a labeled world needs a query and a prompt modality".into()));
                }
                let (query, prompt) = (names[0], names[1]);
                let classes = wc.class_count.unwrap_or(0);
                let mut recs = Vec::new();
                let mut text = String::new();
                for (split, part) in parts.iter().take(splits(val).len()) {
                    let labels = part.labels.as_ref().expect("labeled world");
                    let feats = part.modality(query)?;
                    for c in 0..classes {
                        let group: Vec<TokenSequence> = labels
                            .iter()
                            .zip(feats)
                            .filter(|(l, _)| **l == c)
                            .map(|(_, f)| f.clone())
                            .collect();
                        if group.is_empty() {
                            continue;
                        }
                        let file = format!("{query}.{split}.class{c}.oeft");
                        files.add(file.clone(), feature_bytes(query, &group)?);
                        recs.push((*split, vec![file, format!("class{c}")]));
                    }
                }
                for c in 0..classes {
                    let file = format!("{prompt}.prompt.class{c}.oeft");
                    files.add(file.clone(), feature_bytes(prompt, &[world.class_prompt(prompt, c)?])?);
                    recs.push(("prompt", vec![file, format!("class{c}")]));
                    writeln!(text, "class{c}\t{}", class_prompt_text(&format!("class{c}"))).ok();
                }
                files.add("labeled.tsv", manifest(ManifestKind::Labeled, &[query, prompt], recs).render());
                files.add("prompts.txt", text);
                writeln!(summary, "labeled: {classes} classes, query '{query}', prompts '{prompt}'").ok();
            }
        }
        "vqa" => {
            let [image, question] = &wc.modalities[..] else {
                return Err(Error::Config(
                    "key 'modalities': a vqa world needs exactly an image and a question modality".into(),
                ));
            };
            let vc = VqaWorldConfig {
                latent_dim: wc.latent_dim,
                image: image.clone(),
                question: question.clone(),
                noise_std: wc.noise_std,
                encoder_hidden: wc.encoder_hidden,
            };
            let world = synth_vqa_world(&vc, train + val, seed)?;
            let (tr, va) = world.split(train);
            let mut recs = Vec::new();
            for (split, part) in [("train", &tr), ("validation", &va)].into_iter().take(splits(val).len()) {
                let (fi, fq, fa) = (
                    format!("{}.{split}.oeft", image.name),
                    format!("{}.{split}.oeft", question.name),
                    format!("answers.{split}.txt"),
                );
                files.add(fi.clone(), feature_bytes(&image.name, &part.images)?);
                files.add(fq.clone(), feature_bytes(&question.name, &part.questions)?);
                files.add(fa.clone(), part.answers.iter().map(|a| format!("{a}\n")).collect::<String>());
                recs.push((split, vec![fi, fq, fa]));
            }
            let m = manifest(ManifestKind::Vqa, &[&image.name, &question.name], recs);
            files.add("vqa.tsv", m.render());
            files.add(
                "taxonomy.tsv",
                vqa_taxonomy_lines().iter().map(|l| format!("{l}\n")).collect::<String>(),
            );
            writeln!(summary, "vqa world: {train} train / {val} validation questions").ok();
        }
        other => {
            return Err(Error::Config(format!(
                "key 'world': unknown kind '{other}' (expected paired, labeled or vqa)"
            )))
        }
    }
    files.add("config.resolved", cfg.render());
    files.write(out)?;
    Ok(summary)
}

fn check_dims(records: &[TokenSequence], dim: usize, what: &str) -> Result<()> {
    if let Some(r) = records.iter().find(|r| r.cols() != dim) {
        return Err(Error::Config(format!(
            "{what} features have width {} but the model dimension is {dim}",
            r.cols()
        )));
    }
    Ok(())
}

fn loss_history(report: &TrainReport) -> Report {
    let mut r = Report::new();
    for (i, l) in report.epoch_losses.iter().enumerate() {
        r.push(format!("loss_epoch_{:05}", i + 1), "train", *l);
    }
    r.push("loss_final_step", "train", report.final_loss());
    r.push("steps", "train", report.steps() as f64);
    r
}

fn param_lines(state: &ModelState) -> String {
    let mut s = String::new();
    for (group, n) in state.param_report() {
        writeln!(s, "params {group} {n}").ok();
    }
    writeln!(s, "params total {}", state.params.scalar_count()).ok();
    s
}

fn training_outputs(cfg: &RunConfig, state: &ModelState, report: &TrainReport, log: String) -> Outputs {
    let mut files = Outputs::default();
    files.add("checkpoint.oeck", Checkpoint::new(state.clone()).encode());
    files.add("loss_history.tsv", loss_history(report).render());
    files.add("config.resolved", cfg.render());
    let mut log = log;
    writeln!(
        log,
        "steps {} final_loss {:.6} tau {:.6}",
        report.steps(),
        report.final_loss(),
        state.log_tau().exp().clamp(TAU_MIN, TAU_MAX)
    )
    .ok();
    log.push_str(&param_lines(state));
    files.add("run.log", log);
    files
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpTask {
    Retrieval,
    Vqa,
}

pub fn train_up(cfg: &RunConfig, manifest_path: &Path, task: UpTask, out: &Path, force: bool) -> Result<String> {
    let up = cfg.up_config()?;
    let tc = cfg.train_config(Stage::One)?;
    let m = DatasetManifest::load(manifest_path)?;
    check_out_dir(out, force)?;
    let mut log = String::new();
    let (state, report) = match task {
        UpTask::Retrieval => {
            if m.kind != ManifestKind::Paired || m.modalities.len() != 2 {
                return Err(Error::Format("train-up needs a paired manifest over exactly two modalities".into()));
            }
            let data = m.load_paired("train")?;
            check_dims(&data.left, up.dim, &data.modalities.0)?;
            check_dims(&data.right, up.dim, &data.modalities.1)?;
            writeln!(log, "stage 1 on ({}, {}): {} pairs", data.modalities.0, data.modalities.1, data.len()).ok();
            train_stage1(&data, up, &tc)?
        }
        UpTask::Vqa => {
            let data = m.load_vqa("train")?;
            check_dims(&data.images, up.dim, &m.modalities[0])?;
            check_dims(&data.questions, up.dim, &m.modalities[1])?;
            let vocab: Vec<String> = data.answers.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
            writeln!(log, "vqa on ({}, {}): {} questions, {} answers", m.modalities[0], m.modalities[1], data.answers.len(), vocab.len()).ok();
            train_vqa(&data, (&m.modalities[0], &m.modalities[1]), vocab, up, &tc)?
        }
    };
    let summary = format!("trained {} steps, final loss {:.6}\n", report.steps(), report.final_loss());
    training_outputs(cfg, &state, &report, log).write(out)?;
    Ok(summary)
}

pub fn align(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest_path: &Path,
    new_modality: &str,
    bridge: &str,
    out: &Path,
    force: bool,
) -> Result<String> {
    let tc = cfg.train_config(Stage::Two)?;
    let state = load_checkpoint(checkpoint)?;
    let m = DatasetManifest::load(manifest_path)?;
    if !state.registry.is_aligned(bridge) {
        return Err(Error::Precondition(format!(
            "bridge modality '{bridge}' is not aligned (aligned: {})",
            state.registry.aligned().join(", ")
        )));
    }
    if state.registry.is_aligned(new_modality) {
        return Err(Error::Duplicate(new_modality.to_string()));
    }
    let data: PairedDataset = m.load_paired("train")?;
    check_dims(&data.left, state.config.dim, &data.modalities.0)?;
    check_dims(&data.right, state.config.dim, &data.modalities.1)?;
    check_out_dir(out, force)?;
    let (next, report) = train_stage2(&state, new_modality, bridge, &data, &tc)?;
    if next.params.fingerprint("up.") != state.params.fingerprint("up.") {
        return Err(Error::Precondition("projection weights changed during alignment".into()));
    }
    let log = format!("stage 2: '{new_modality}' via '{bridge}', {} pairs\n", data.len());
    let summary = format!(
        "aligned '{new_modality}' ({} steps, final loss {:.6}); registry: {}\n",
        report.steps(),
        report.final_loss(),
        next.registry.aligned().join(", ")
    );
    training_outputs(cfg, &next, &report, log).write(out)?;
    Ok(summary)
}

pub fn encode(checkpoint: &Path, modality: &str, features: &Path, out: &Path, force: bool) -> Result<String> {
    let state = load_checkpoint(checkpoint)?;
    if !state.registry.is_aligned(modality) {
        return Err(Error::UnknownModality {
            name: modality.to_string(),
            known: state.registry.aligned().to_vec(),
        });
    }
    let ff = load_features(features)?;
    check_dims(&ff.records, state.config.dim, modality)?;
    if out.exists() && !force {
        return Err(Error::Precondition(format!(
            "{} exists (use --force to overwrite)",
            out.display()
        )));
    }
    let emb = encode_batch(&state, modality, &ff.records)?;
    let rows: Vec<Tensor> = (0..emb.rows())
        .map(|i| Tensor::matrix(1, emb.cols(), emb.row(i).to_vec()))
        .collect::<Result<_>>()?;
    let bytes = feature_bytes(modality, &rows)?;
    fs::write(out, bytes).map_err(|e| Error::io(out, e))?;
    Ok(format!("encoded {} '{modality}' records into {}\n", rows.len(), out.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    Retrieval,
    ZeroShot,
    Vqa,
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub task: EvalTask,
    pub taxonomy: Option<&'a Path>,
    pub out: &'a Path,
    pub force: bool,
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<String> {
    let state = load_checkpoint(args.checkpoint)?;
    let m = DatasetManifest::load(args.manifest)?;
    let split = cfg.raw("split")?.to_string();
    let ks = cfg.ks()?;
    let threshold: f64 = cfg.get("wups_threshold")?;
    let taxonomy = match (args.task, args.taxonomy) {
        (EvalTask::Vqa, None) => {
            return Err(Error::Config("VQA evaluation needs --taxonomy for WUPS".into()));
        }
        (_, Some(p)) => Some(TaxonomyGraph::load(p)?),
        _ => None,
    };
    check_out_dir(args.out, args.force)?;

    let report = match args.task {
        EvalTask::Retrieval => {
            let data = m.load_paired(&split)?;
            if data.is_empty() {
                return Err(Error::Batch(format!("split '{split}' has no pairs")));
            }
            let (a, b) = (&data.modalities.0, &data.modalities.1);
            let ea = encode_batch(&state, a, &data.left)?;
            let eb = encode_batch(&state, b, &data.right)?;
            retrieval_report(&ea, &eb, (a, b), &ks, &split)?
        }
        EvalTask::ZeroShot => {
            let (feats, labels) = m.load_labeled(&split)?;
            let (prompts, classes) = m.load_labeled("prompt")?;
            if classes.iter().collect::<BTreeSet<_>>().len() != classes.len() {
                return Err(Error::Format("each class needs exactly one prompt record".into()));
            }
            if feats.is_empty() || prompts.is_empty() {
                return Err(Error::Batch("zero-shot evaluation needs queries and class prompts".into()));
            }
            let query_mod = &m.modalities[0];
            let prompt_mod = m.modalities.get(1).unwrap_or(query_mod);
            let class_emb = encode_batch(&state, prompt_mod, &prompts)?;
            let query_emb = encode_batch(&state, query_mod, &feats)?;
            let tau = state.log_tau().exp().clamp(TAU_MIN, TAU_MAX);
            let mut preds = Vec::with_capacity(labels.len());
            for i in 0..query_emb.rows() {
                let z = zero_shot_classify(query_emb.row(i), &class_emb, tau)?;
                preds.push(classes[z.prediction].clone());
            }
            let mut r = Report::new();
            r.push("zeroshot_accuracy", &split, accuracy(&preds, &labels)?);
            r.push("zeroshot_macro_f1", &split, macro_f1(&preds, &labels)?);
            r.push("zeroshot_classes", &split, classes.len() as f64);
            r
        }
        EvalTask::Vqa => {
            let data = m.load_vqa(&split)?;
            if data.answers.is_empty() {
                return Err(Error::Batch(format!("split '{split}' has no questions")));
            }
            let head = state
                .head
                .as_ref()
                .ok_or_else(|| Error::Config("checkpoint has no prediction head".into()))?;
            let logits = vqa_logits(&state, &m.modalities[0], &m.modalities[1], &data.images, &data.questions)?;
            let preds: Vec<String> = (0..logits.rows())
                .map(|i| head.answer(argmax(logits.row(i))).to_string())
                .collect();
            let tax = taxonomy.as_ref().expect("checked above");
            let mut r = Report::new();
            r.push("vqa_accuracy", &split, accuracy(&preds, &data.answers)?);
            r.push("vqa_macro_f1", &split, macro_f1(&preds, &data.answers)?);
            r.push(format!("vqa_wups_{threshold}"), &split, wups_score(&preds, &data.answers, tax, threshold)?);
            r.push("vqa_wups_0", &split, wups_score(&preds, &data.answers, tax, 0.0)?);
            r
        }
    };
    let rendered = report.render();
    let mut files = Outputs::default();
    files.add("report.tsv", rendered.clone());
    files.add("config.resolved", cfg.render());
    files.add(
        "run.log",
        format!(
            "eval {} on split '{split}' of {}\n",
            match args.task {
                EvalTask::Retrieval => "retrieval",
                EvalTask::ZeroShot => "zeroshot",
                EvalTask::Vqa => "vqa",
            },
            args.manifest.display()
        ),
    );
    files.write(args.out)?;
    Ok(rendered)
}

pub fn inspect(checkpoint: &Path) -> Result<String> {
    let bytes = fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let ck = Checkpoint::decode(&bytes)?;
    let s = &ck.state;
    let c = &s.config;
    let mut out = String::new();
    writeln!(out, "format version {}", ck.version).ok();
    writeln!(
        out,
        "projection depth {} dim {} heads {} mlp_ratio {} tokens {} fusion {} pooling {}",
        c.depth,
        c.dim,
        c.heads,
        c.mlp_ratio,
        c.tokens,
        c.fusion,
        c.pooling.as_str()
    )
    .ok();
    writeln!(out, "aligned {}", s.registry.aligned().join(" ")).ok();
    if let Some((a, b)) = s.registry.stage1_pair() {
        writeln!(out, "stage1 {a} {b}").ok();
    }
    for m in s.registry.aligned() {
        if s.has_alignment_layer(m) {
            writeln!(out, "alignment_layer {m}").ok();
        }
    }
    if let Some(h) = &s.head {
        writeln!(out, "head answers {}", h.len()).ok();
    }
    writeln!(out, "tau {:.6}", s.log_tau().exp().clamp(TAU_MIN, TAU_MAX)).ok();
    writeln!(out, "step {} seed {} loss {:.6}", s.meta.step, s.meta.seed, s.meta.loss).ok();
    out.push_str(&param_lines(s));
    Ok(out)
}
