use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dsfad_cli::manifest::{RunManifest, MANIFEST_FILE};
use dsfad_core::config::RunConfig;
use dsfad_core::encoder::Variant;

fn dsfad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsfad")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = RunConfig::default();
    cfg.dataset.train_identities = 4;
    cfg.dataset.test_identities = 3;
    cfg.dataset.images_per_modality = 4;
    cfg.dataset.height = 16;
    cfg.dataset.width = 16;
    cfg.model.image_height = 16;
    cfg.model.image_width = 16;
    cfg.model.stage_widths = vec![4, 8, 16];
    cfg.model.head_width = 8;
    cfg.model.embed_dim = 8;
    cfg.model.text_width = 8;
    cfg.model.num_classes = 4;
    cfg.train.epochs = 2;
    cfg.train.drop_epochs = vec![1];
    cfg.train.p = 2;
    cfg.train.k = 2;
    cfg.eval.protocol.repeats = 2;
    cfg.eval.protocol.multi_shot = 2;
    cfg.validate().unwrap();
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every listed artifact exists and no nested directory shares the manifest.
fn check_manifest(dir: &Path) -> RunManifest {
    let m = RunManifest::read(dir).unwrap();
    for a in &m.artifacts {
        assert!(dir.join(a).exists(), "{} lists missing {a}", dir.display());
    }
    m
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = dsfad(&["train", "--dataset", "/no/such/dataset", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/no/such/dataset"), "{}", stderr(&o));

    let o = dsfad(&["gradcheck", "--config", "/no/such.toml", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/no/such.toml"));

    let o = dsfad(&["sweep", "--param", "gamma", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn bad_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "[train]\nepochs = 0\n").unwrap();
    let o = dsfad(&["generate", "--config", path.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    fs::write(&path, "[train]\nunknown_knob = 1\n").unwrap();
    let o = dsfad(&["generate", "--config", path.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn pipeline_writes_one_manifest_per_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let o = dsfad(&["pipeline", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let top = check_manifest(&out);
    assert_eq!(top.command, "pipeline");
    for stage in ["dataset", "captions", "train", "eval", "probe"] {
        let m = check_manifest(&out.join(stage));
        assert_eq!(m.config_hash, top.config_hash, "{stage}");
        assert!(top.artifacts.contains(&format!("{stage}/{MANIFEST_FILE}")));
    }
    let metrics: Vec<_> = fs::read_dir(out.join("eval"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("metrics_"))
        .collect();
    assert_eq!(metrics.len(), 4);
    assert!(out.join("eval/rank_curve.svg").exists());

    // resuming from the train stage reuses the dataset and captions
    let before = fs::read(out.join("dataset/meta.json")).unwrap();
    let o = dsfad(&["pipeline", "--config", &cfg, "--out", out.to_str().unwrap(), "--from", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("dataset/meta.json")).unwrap(), before);

    // a stage whose inputs were removed fails cleanly
    fs::remove_dir_all(out.join("captions")).unwrap();
    let o = dsfad(&["pipeline", "--config", &cfg, "--out", out.to_str().unwrap(), "--from", "train"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("captions"), "{}", stderr(&o));
}

#[test]
fn baseline_trains_without_captions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    assert!(dsfad(&["generate", "--config", &cfg, "--out", data.to_str().unwrap()]).status.success());
    let train = tmp.path().join("train");
    let args = ["train", "--config", &cfg, "--dataset", data.to_str().unwrap(), "--out", train.to_str().unwrap()];
    let o = dsfad(&[&args[..], &["--variant", "baseline"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    check_manifest(&train);
    // the full variant needs a caption corpus
    let o = dsfad(&[&args[..], &["--variant", "full"]].concat());
    assert!(!o.status.success());
}

#[test]
fn sweep_writes_rows_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("sweep");
    let o = dsfad(&["sweep", "--config", &cfg, "--param", "lambda2", "--grid", "0,0.3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = check_manifest(&out);
    assert!(m.artifacts.iter().any(|a| a == "sweep.svg"));
    let tsv = fs::read_to_string(out.join("sweep.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "lambda2\trank1\tmap");
    assert_eq!(lines.len(), 3);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    assert_eq!(json["variant"], serde_json::to_value(Variant::Full).unwrap());
}

#[test]
fn gradcheck_passes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc");
    let o = dsfad(&["gradcheck", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("gradcheck.json")).unwrap()).unwrap();
    assert!(json["max_rel_error"].as_f64().unwrap() < 1e-3);
    check_manifest(&out);
}
