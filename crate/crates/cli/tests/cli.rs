use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::CommandFactory;
use locret_cli::manifest::sha256_file;
use locret_cli::{Cli, RunManifest};

fn locret(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_locret"))
        .current_dir(cwd)
        .args(args)
        .args(["--log-level", "warn"])
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) -> Output {
    let out = locret(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn manifest(dir: &Path) -> RunManifest {
    RunManifest::load(&dir.join("manifest.json")).unwrap()
}

/// gen → train 1 → train 2 on a small corpus, in `root`.
fn trained(root: &Path) -> PathBuf {
    ok(root, &["gen", "--run-dir", "gen", "--train", "60", "--test", "24", "--seed", "5"]);
    let corpus = "gen/outputs/train.jsonl";
    ok(root, &["train", "--run-dir", "s1", "--corpus", corpus, "--stage", "1", "--epochs", "1", "--seed", "5"]);
    ok(
        root,
        &[
            "train", "--run-dir", "s2", "--corpus", corpus, "--stage", "2", "--init", "s1/outputs/model.ckpt",
            "--epochs", "1", "--seed", "5",
        ],
    );
    root.join("s2/outputs/model.ckpt")
}

const MODEL: [&str; 4] = ["--checkpoint", "s2/outputs/model.ckpt", "--corpus", "gen/outputs/test.jsonl"];

fn with_model<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(MODEL).collect()
}

#[test]
fn smoke_chain_writes_verifiable_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    trained(root);
    ok(root, &with_model(&["eval-retrieval", "--run-dir", "ret"]));
    for run in ["gen", "s1", "s2", "ret"] {
        let dir = root.join(run);
        assert!(dir.join("config.toml").is_file());
        let m = manifest(&dir);
        assert!(!m.outputs.is_empty());
        for o in &m.outputs {
            assert_eq!(sha256_file(&dir.join(&o.path)).unwrap(), o.sha256, "{run}/{}", o.path);
        }
        for i in &m.inputs {
            assert_eq!(sha256_file(Path::new(&i.path)).unwrap(), i.sha256);
        }
    }
    let names: Vec<String> = manifest(&root.join("ret")).outputs.into_iter().map(|o| o.path).collect();
    for want in ["outputs/lcmmr.json", "outputs/cross_modal.json", "outputs/region_query.idx"] {
        assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
    }
    // The stage-1 config echo loads back as a training config.
    let text = std::fs::read_to_string(root.join("s1/config.toml")).unwrap();
    let cfg = locret_core::trainer::TrainConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seed, 5);
}

#[test]
fn every_command_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    trained(root);
    ok(root, &with_model(&["eval-retrieval", "--run-dir", "ret", "--gallery", "finding-index"]));
    ok(root, &with_model(&["eval-grounding", "--run-dir", "gr", "--heatmaps", "2"]));
    ok(root, &with_model(&["explain", "--run-dir", "ex", "--mode", "global-image"]));
    let sample = locret_core::corpus::load_corpus(&root.join("gen/outputs/test.jsonl")).unwrap().samples[0]
        .id
        .clone();
    ok(
        root,
        &with_model(&["query", "--run-dir", "q", "--region", "left-upper", "--sample", &sample, "--k", "5"]),
    );
    for run in ["gen", "s1", "s2", "ret", "gr", "ex", "q"] {
        let again = format!("{run}-again");
        ok(root, &["rerun", "--manifest", &format!("{run}/manifest.json"), "--run-dir", &again]);
        let (a, b) = (manifest(&root.join(run)), manifest(&root.join(&again)));
        assert_eq!(a.outputs, b.outputs, "{run}");
        assert_eq!(a.config, b.config, "{run}");
    }
}

#[test]
fn rerun_flags_changed_inputs_and_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["gen", "--run-dir", "gen", "--train", "20", "--test", "10"]);
    let path = root.join("gen/manifest.json");
    let mut m = manifest(&root.join("gen"));
    m.outputs[0].sha256 = "0".repeat(64);
    std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    let out = locret(root, &["rerun", "--manifest", "gen/manifest.json", "--run-dir", "again"]);
    assert_eq!(out.status.code(), Some(8));
    assert!(String::from_utf8_lossy(&out.stderr).contains("differs"));

    let mut m = manifest(&root.join("gen"));
    m.inputs.push(locret_cli::manifest::FileHash {
        path: path.to_string_lossy().into_owned(),
        sha256: "0".repeat(64),
    });
    std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    let out = locret(root, &["rerun", "--manifest", "gen/manifest.json", "--run-dir", "again2"]);
    assert_eq!(out.status.code(), Some(8));
}

#[test]
fn unknown_flags_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = locret(tmp.path(), &["gen", "--run-dir", "g", "--samples", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--samples"));
    assert!(!tmp.path().join("g").exists());
}

#[test]
fn help_documents_every_flag() {
    let cli = Cli::command();
    for sub in cli.get_subcommands() {
        assert!(sub.get_about().is_some(), "{}", sub.get_name());
        for arg in sub.get_arguments() {
            let id = arg.get_id().as_str();
            if id == "help" || id == "version" {
                continue;
            }
            assert!(arg.get_help().is_some(), "{} --{id} has no help", sub.get_name());
        }
    }
}

#[test]
fn query_with_oversized_k_returns_the_full_gallery() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    trained(root);
    let out = Command::new(env!("CARGO_BIN_EXE_locret"))
        .current_dir(root)
        .args(with_model(&["query", "--run-dir", "q", "--region", "right-lower", "--k", "1000"]))
        .args(["--image", "probe.png"])
        .output()
        .unwrap();
    // No image yet: a missing input is an I/O error.
    assert_eq!(out.status.code(), Some(3));

    let corpus = locret_core::corpus::load_corpus(&root.join("gen/outputs/test.jsonl")).unwrap();
    let img = &corpus.samples[3].image;
    let bytes: Vec<u8> = img.iter().map(|v| (v * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(img.ncols() as u32, img.nrows() as u32, bytes)
        .unwrap()
        .save(root.join("probe.png"))
        .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_locret"))
        .current_dir(root)
        .args(with_model(&["query", "--run-dir", "q", "--force", "--region", "right-lower", "--k", "1000"]))
        .args(["--image", "probe.png"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("full gallery"));
    let gallery: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("q/outputs/gallery.json")).unwrap()).unwrap();
    assert_eq!(gallery["items"].as_array().unwrap().len(), corpus.len());
    assert_eq!(gallery["k"], corpus.len());
    let thumbs = std::fs::read_dir(root.join("q/outputs/thumbnails")).unwrap().count();
    assert_eq!(thumbs, corpus.len());
}

#[test]
fn grounding_without_boxes_names_the_missing_field() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    trained(root);
    ok(root, &["gen", "--run-dir", "plain", "--train", "10", "--test", "6", "--no-boxes", "--seed", "5"]);
    let out = locret(
        root,
        &[
            "eval-grounding", "--run-dir", "gr", "--checkpoint", "s2/outputs/model.ckpt", "--corpus",
            "plain/outputs/test.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("boxes"));
}

#[test]
fn typed_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["gen", "--run-dir", "gen", "--train", "20", "--test", "10"]);
    let corpus = "gen/outputs/train.jsonl";

    // Existing manifest without --force.
    let out = locret(root, &["gen", "--run-dir", "gen", "--train", "20", "--test", "10"]);
    assert_eq!(out.status.code(), Some(5));
    ok(root, &["gen", "--run-dir", "gen", "--train", "20", "--test", "10", "--force"]);

    let out = locret(root, &["train", "--run-dir", "t", "--corpus", "absent.jsonl", "--stage", "1"]);
    assert_eq!(out.status.code(), Some(3));

    let out = locret(root, &["train", "--run-dir", "t", "--corpus", corpus, "--stage", "2"]);
    assert_eq!(out.status.code(), Some(5));

    std::fs::write(root.join("bad.ckpt"), b"not a checkpoint").unwrap();
    let out = locret(
        root,
        &["train", "--run-dir", "t", "--corpus", corpus, "--stage", "2", "--init", "bad.ckpt", "--epochs", "1"],
    );
    assert_eq!(out.status.code(), Some(4));

    std::fs::write(root.join("stage2.toml"), locret_core::trainer::TrainConfig::desk(
        locret_core::trainer::Stage::Triplet,
        0,
    )
    .to_toml())
    .unwrap();
    let out = locret(root, &["train", "--run-dir", "t", "--corpus", corpus, "--stage", "1", "--config", "stage2.toml"]);
    assert_eq!(out.status.code(), Some(5));
}
