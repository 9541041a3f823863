use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cddvt::data::{decode_netpbm, gen_synthetic, save_raster, Mix};

fn cddvt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cddvt")).args(args).current_dir(cwd).output().unwrap()
}

const TINY: &str = "\
# tiny run
total_steps = 12
batch_size = 2
n_images = 8
image_size = 16
codebook_size = 16
K = 8
K_pool = 8
checkpoint_path = out/model.ckpt
metrics_path = out/metrics.csv
forced_ns = 1, 4
";

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cddvt(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_documents_config_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = cddvt(&["--help"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("warmup_fraction") && text.contains("0.25"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = cddvt(&["gradcheck"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains(" 0 failed"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn reconstruct_with_missing_checkpoint_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = cddvt(&["reconstruct", "--checkpoint", "missing.ckpt", "--input", "a.pgm", "--output", "b.pgm"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
}

#[test]
fn bad_config_names_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "seed = 1\nK = -1\n").unwrap();
    let out = cddvt(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.cfg:2") && err.contains("`K`"), "{err}");
}

#[test]
fn train_eval_reconstruct_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.cfg"), TINY).unwrap();
    let out = cddvt(&["train", "--config", "run.cfg"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(d.join("out/metrics.csv")).unwrap().lines().count(), 13);
    assert!(d.join("out/model.warmup.ckpt").exists());

    let out = cddvt(&["eval", "--config", "run.cfg", "--checkpoint", "out/model.ckpt", "--output", "out/report.csv", "--centroids", "out/c.csv"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(d.join("out/report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "setting,mean_mse,psnr,ssim,mean_count,perplexity_per_subcodebook");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("fixed:1,") && lines[3].starts_with("adaptive:8,"));
    assert_eq!(fs::read_to_string(d.join("out/c.csv")).unwrap().lines().count(), 4);

    let ds = gen_synthetic(1, 16, 4, Mix::UNIFORM, 3).unwrap();
    save_raster(&ds.items[0].image, d.join("in.pgm")).unwrap();
    let out = cddvt(&["reconstruct", "--checkpoint", "out/model.ckpt", "--input", "in.pgm", "--output", "rec.pgm", "--mode", "fixed:2"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec = decode_netpbm(&fs::read(d.join("rec.pgm")).unwrap()).unwrap();
    assert_eq!((rec.height, rec.width), (16, 16));

    let out = cddvt(&["heatmap", "--checkpoint", "out/model.ckpt", "--input", "in.pgm", "--output", "heat.pgm"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let heat = decode_netpbm(&fs::read(d.join("heat.pgm")).unwrap()).unwrap();
    assert_eq!((heat.height, heat.width), (4, 4));

    let out = cddvt(&["train", "--config", "run.cfg", "--resume", "out/model.warmup.ckpt", "--set", "metrics_path=out/resumed.csv"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let full = fs::read_to_string(d.join("out/metrics.csv")).unwrap();
    let resumed = fs::read_to_string(d.join("out/resumed.csv")).unwrap();
    // Warm-up ends after ceil(0.25 * 12) = 3 steps.
    let full: Vec<&str> = full.lines().collect();
    let resumed: Vec<&str> = resumed.lines().collect();
    assert_eq!(&full[4..], &resumed[1..]);
}

#[test]
fn ablate_diversity_writes_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.cfg"), TINY.replace("total_steps = 12", "total_steps = 4")).unwrap();
    let out = cddvt(&["ablate-diversity", "--config", "run.cfg", "--output", "div.csv", "--out-dir", "arms"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(d.join("div.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("lambda_dqp=0,") && lines[2].starts_with("lambda_dqp=0.25,"));
    assert!(d.join("arms/lambda_dqp_0.25.csv").exists());
}

#[test]
fn ablate_topk_and_warmup_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.cfg"), TINY.replace("total_steps = 12", "total_steps = 4") + "fixed_n = 4\npool_sizes = 16\n").unwrap();
    let out = cddvt(&["ablate-topk", "--config", "run.cfg", "--output", "topk.csv"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(d.join("topk.csv")).unwrap();
    let settings: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(settings, ["top1", "fixed:4", "adaptive:8", "adaptive:8/pool=16"]);

    let out = cddvt(&["ablate-warmup", "--config", "run.cfg", "--output", "warm.csv"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(d.join("warm.csv")).unwrap().lines().count(), 3);
}
