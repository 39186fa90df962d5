use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oneencoder::data::load_features;
use oneencoder::pipeline::load_checkpoint;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oneencoder"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn desk() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small synthetic world plus a 20-step stage-1 checkpoint.
fn fixture(root: &Path, fusion: &str) -> (PathBuf, PathBuf) {
    let conf = desk();
    let data = root.join("data");
    if !data.exists() {
        ok(&["synth", "--config", s(&conf), "--set", "train_count=64", "--set", "validation_count=16", "--out", s(&data)]);
    }
    let run = root.join(format!("run-{fusion}"));
    ok(&[
        "train-up",
        "--config",
        s(&conf),
        "--set",
        "max_steps=20",
        "--fusion",
        fusion,
        "--manifest",
        s(&data.join("pairs.image-text.tsv")),
        "--out",
        s(&run),
    ]);
    (data, run.join("checkpoint.oeck"))
}

#[test]
fn help_and_usage_errors() {
    let help = bin(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("train-up"));
    assert_eq!(code(&bin(&["frobnicate"])), 1);
    assert_eq!(code(&bin(&["eval", "--task", "retrieval"])), 1);
}

#[test]
fn synth_requires_latent_dim_and_empty_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let missing = bin(&["synth", "--out", s(&out)]);
    assert_eq!(code(&missing), 1);
    assert!(stderr(&missing).contains("latent_dim"));

    let conf = desk();
    ok(&["synth", "--config", s(&conf), "--set", "train_count=8", "--set", "validation_count=4", "--out", s(&out)]);
    let again = bin(&["synth", "--config", s(&conf), "--out", s(&out)]);
    assert_eq!(code(&again), 1, "non-empty output directory must be refused");
    ok(&["synth", "--config", s(&conf), "--set", "train_count=8", "--set", "validation_count=4", "--out", s(&out), "--force"]);

    let typo = bin(&["synth", "--config", s(&conf), "--set", "learning_rat=1", "--out", s(&tmp.path().join("e"))]);
    assert_eq!(code(&typo), 1);
}

#[test]
fn fusion_flag_changes_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, add) = fixture(tmp.path(), "addition");
    let (_, cross) = fixture(tmp.path(), "cross-attention");
    let a = load_checkpoint(&add).unwrap();
    let c = load_checkpoint(&cross).unwrap();
    assert_ne!(a.config.fusion, c.config.fusion);
    assert_ne!(std::fs::read(&add).unwrap(), std::fs::read(&cross).unwrap());
}

#[test]
fn align_then_inspect_and_refuse_duplicates() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck) = fixture(tmp.path(), "addition");
    let conf = desk();
    let s2 = tmp.path().join("s2");
    let align = |bridge: &str, manifest: &str, out: &Path| {
        bin(&[
            "align",
            "--config",
            s(&conf),
            "--set",
            "max_steps=10",
            "--checkpoint",
            s(&ck),
            "--manifest",
            s(&data.join(manifest)),
            "--new-modality",
            "audio",
            "--bridge",
            bridge,
            "--out",
            s(out),
        ])
    };
    let first = align("text", "pairs.text-audio.tsv", &s2);
    assert_eq!(code(&first), 0, "{}", stderr(&first));

    let info = ok(&["inspect", "--checkpoint", s(&s2.join("checkpoint.oeck"))]);
    assert!(info.contains("aligned image text audio"), "{info}");
    assert!(info.contains("alignment_layer audio"), "{info}");
    assert!(!info.contains("alignment_layer image") && !info.contains("alignment_layer text"), "{info}");

    // The stage-1 pair is already aligned.
    let dup = bin(&[
        "align",
        "--config",
        s(&conf),
        "--checkpoint",
        s(&ck),
        "--manifest",
        s(&data.join("pairs.image-text.tsv")),
        "--new-modality",
        "text",
        "--bridge",
        "image",
        "--out",
        s(&tmp.path().join("dup")),
    ]);
    assert_eq!(code(&dup), 1);

    // Bridge that is not aligned yet.
    let unaligned = bin(&[
        "align",
        "--config",
        s(&conf),
        "--checkpoint",
        s(&ck),
        "--manifest",
        s(&data.join("pairs.text-audio.tsv")),
        "--new-modality",
        "text",
        "--bridge",
        "audio",
        "--out",
        s(&tmp.path().join("bad")),
    ]);
    assert_eq!(code(&unaligned), 1);
}

#[test]
fn encode_writes_unit_vectors() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck) = fixture(tmp.path(), "addition");
    let out = tmp.path().join("emb.oeft");
    ok(&[
        "encode",
        "--checkpoint",
        s(&ck),
        "--modality",
        "image",
        "--features",
        s(&data.join("image.validation.oeft")),
        "--out",
        s(&out),
    ]);
    let emb = load_features(&out).unwrap();
    assert_eq!(emb.records.len(), 16);
    for r in &emb.records {
        assert_eq!(r.data().len(), 64);
        let n: f64 = r.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5, "norm {n}");
    }

    let unknown = bin(&[
        "encode",
        "--checkpoint",
        s(&ck),
        "--modality",
        "audio",
        "--features",
        s(&data.join("audio.validation.oeft")),
        "--out",
        s(&tmp.path().join("x.oeft")),
    ]);
    assert_eq!(code(&unknown), 1);
}

#[test]
fn corrupted_inputs_exit_with_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck) = fixture(tmp.path(), "addition");
    let mut bytes = std::fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = tmp.path().join("bad.oeck");
    std::fs::write(&bad, &bytes).unwrap();
    let out = bin(&["inspect", "--checkpoint", s(&bad)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let feats = std::fs::read(data.join("image.validation.oeft")).unwrap();
    let cut = tmp.path().join("cut.oeft");
    std::fs::write(&cut, &feats[..feats.len() - 3]).unwrap();
    let out = bin(&[
        "encode",
        "--checkpoint",
        s(&ck),
        "--modality",
        "image",
        "--features",
        s(&cut),
        "--out",
        s(&tmp.path().join("e.oeft")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_retrieval_report_and_vqa_needs_taxonomy() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck) = fixture(tmp.path(), "addition");
    let ev = tmp.path().join("ev");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--manifest",
        s(&data.join("pairs.image-text.tsv")),
        "--task",
        "retrieval",
        "--out",
        s(&ev),
    ]);
    let report = std::fs::read_to_string(ev.join("report.tsv")).unwrap();
    for m in ["p_at_1_image_to_text", "r_at_5_text_to_image", "map_image_to_text", "mean_rank_text_to_image"] {
        assert!(report.contains(m), "{m} missing from\n{report}");
    }
    let vqa = bin(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--manifest",
        s(&data.join("pairs.image-text.tsv")),
        "--task",
        "vqa",
        "--out",
        s(&tmp.path().join("v")),
    ]);
    assert_eq!(code(&vqa), 1);
}
