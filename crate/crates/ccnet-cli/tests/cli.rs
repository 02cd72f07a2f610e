//! End-to-end checks of the command-line interface: every subcommand is
//! exercised through the real binary, with determinism verified at the
//! byte level and each documented exit code hit at least once.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ccnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Micro model configuration shared by the training tests.
const MICRO_CFG: &str = "model.c_in = 8\nmodel.m = 1\nmodel.depth = 1\nmodel.k = 2\nmodel.r0 = 4\n";

fn gen_scene(dir: &Path, seed: u64) {
    let out = ccnet(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        "1",
        "--size",
        "8x8",
        "--bands",
        "8",
        "--seed",
        &seed.to_string(),
    ]);
    assert!(out.status.success(), "gen-data failed: {}", stderr(&out));
}

#[test]
fn no_arguments_exits_with_usage_code() {
    let out = ccnet(&[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generated_datasets_are_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_scene(&a, 7);
    gen_scene(&b, 7);
    for name in ["manifest.txt", "scene_0000.hsi.hsic", "scene_0000.rgb.hsic"] {
        let x = fs::read(a.join(name)).unwrap();
        let y = fs::read(b.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between equal-seed runs");
    }
}

#[test]
fn training_is_reproducible_and_reports_results() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_scene(&data, 3);
    let cfg = tmp.path().join("micro.cfg");
    fs::write(&cfg, MICRO_CFG).unwrap();

    let run = |out_name: &str| -> (Output, Vec<u8>, Vec<u8>) {
        let ckpt = tmp.path().join(out_name);
        let out = ccnet(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--steps",
            "3",
            "--seed",
            "11",
            "--config",
            cfg.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "train failed: {}", stderr(&out));
        let csv = fs::read(ckpt.with_extension("loss.csv")).unwrap();
        let bytes = fs::read(&ckpt).unwrap();
        (out, csv, bytes)
    };

    let (out1, csv1, ckpt1) = run("one.cckp");
    let (_, csv2, ckpt2) = run("two.cckp");
    assert_eq!(csv1, csv2, "equal seeds must give identical loss logs");
    assert_eq!(ckpt1, ckpt2, "equal seeds must give identical checkpoints");

    let text = stdout(&out1);
    assert!(text.contains("steps=3"), "missing step count: {text}");
    assert!(text.contains("final_mrae="), "missing final loss: {text}");

    let csv_text = String::from_utf8(csv1).unwrap();
    let mut lines = csv_text.lines();
    assert_eq!(lines.next(), Some("step,lr,loss_mrae,loss_dif,loss_total"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn reconstruction_is_deterministic_and_evaluable() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_scene(&data, 5);
    let cfg = tmp.path().join("micro.cfg");
    fs::write(&cfg, MICRO_CFG).unwrap();
    let ckpt = tmp.path().join("model.cckp");
    let out = ccnet(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--steps",
        "2",
        "--seed",
        "1",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let rgb = data.join("scene_0000.rgb.hsic");
    let gt = data.join("scene_0000.hsi.hsic");
    let pred_a = tmp.path().join("a.hsic");
    let pred_b = tmp.path().join("b.hsic");
    for pred in [&pred_a, &pred_b] {
        let out = ccnet(&[
            "reconstruct",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--input",
            rgb.to_str().unwrap(),
            "--output",
            pred.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(
        fs::read(&pred_a).unwrap(),
        fs::read(&pred_b).unwrap(),
        "reconstruction must be deterministic"
    );

    let out = ccnet(&[
        "eval",
        "--pred",
        pred_a.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let line = stdout(&out);
    for key in ["mrae=", "rmse=", "psnr="] {
        assert!(line.contains(key), "missing {key} in: {line}");
    }
}

#[test]
fn missing_data_directory_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ccnet(&[
        "train",
        "--data",
        tmp.path().join("nope").to_str().unwrap(),
        "--out",
        tmp.path().join("x.cckp").to_str().unwrap(),
        "--steps",
        "1",
        "--seed",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).starts_with("error: "));
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_scene(&data, 1);
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "model.depht = 1\n").unwrap();
    let out = ccnet(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("x.cckp").to_str().unwrap(),
        "--steps",
        "1",
        "--seed",
        "0",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(
        stderr(&out).contains("model.depht"),
        "error must name the offending key: {}",
        stderr(&out)
    );
}

#[test]
fn gradcheck_passes_on_healthy_modules() {
    let out = ccnet(&["gradcheck", "--module", "ffn"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("module=ffn max_rel_err="), "got: {text}");
}

#[test]
fn gradcheck_detects_corrupted_gradients() {
    let out = Command::new(env!("CARGO_BIN_EXE_ccnet"))
        .args(["gradcheck", "--module", "ffn"])
        .env("CCNET_GRADCHECK_CORRUPT", "1")
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(5), "stderr: {}", stderr(&out));
    // stderr carries progress lines before the final error line.
    assert!(
        stderr(&out).lines().any(|l| l.starts_with("error: ")),
        "no error line in: {}",
        stderr(&out)
    );
}

#[test]
fn flops_modes_report_frozen_counts() {
    let inter = ccnet(&["flops", "--mode", "inter", "--size", "256x256x32"]);
    assert!(inter.status.success());
    assert!(stdout(&inter).contains("flops=762839040"), "{}", stdout(&inter));

    let mha = ccnet(&["flops", "--mode", "mha", "--size", "256x256x32"]);
    assert!(mha.status.success());
    assert!(stdout(&mha).contains("flops=805306368"), "{}", stdout(&mha));

    let full = ccnet(&["flops", "--mode", "full", "--size", "256x256x32"]);
    assert!(full.status.success());
    let text = stdout(&full);
    assert!(text.contains("params=1318707"), "{text}");
    assert!(text.contains("reference_params=1610000"), "{text}");
}

#[test]
fn malformed_size_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ccnet(&[
        "gen-data",
        "--out",
        tmp.path().join("d").to_str().unwrap(),
        "--count",
        "1",
        "--size",
        "8y8",
        "--bands",
        "8",
        "--seed",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("8y8"));
}

#[test]
fn reconstruct_rejects_wrong_input_channel_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_scene(&data, 9);
    let cfg = tmp.path().join("micro.cfg");
    fs::write(&cfg, MICRO_CFG).unwrap();
    let ckpt = tmp.path().join("model.cckp");
    let out = ccnet(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--steps",
        "1",
        "--seed",
        "1",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    // Feed the 8-band spectral cube where the 3-channel input belongs.
    let out = ccnet(&[
        "reconstruct",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--input",
        data.join("scene_0000.hsi.hsic").to_str().unwrap(),
        "--output",
        tmp.path().join("pred.hsic").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr(&out));
}

#[test]
fn eval_rejects_mismatched_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let small = tmp.path().join("small");
    let large = tmp.path().join("large");
    gen_scene(&small, 2);
    let out = ccnet(&[
        "gen-data",
        "--out",
        large.to_str().unwrap(),
        "--count",
        "1",
        "--size",
        "12x8",
        "--bands",
        "8",
        "--seed",
        "2",
    ]);
    assert!(out.status.success());
    let out = ccnet(&[
        "eval",
        "--pred",
        small.join("scene_0000.hsi.hsic").to_str().unwrap(),
        "--gt",
        large.join("scene_0000.hsi.hsic").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr(&out));
}
