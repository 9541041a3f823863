use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use cddvt::autoencoder::Image;
use cddvt::checkpoint::Checkpoint;
use cddvt::metrics::{psnr, ssim};
use cddvt::model::ModelConfig;
use cddvt::quantizer::QuantizeMode;
use cddvt::trainer::{run_training, TrainConfig};
use cddvt_ffi::*;

fn train_tiny(dir: &Path) -> PathBuf {
    let ck = dir.join("tiny.ckpt");
    let cfg = TrainConfig {
        model: ModelConfig { codebook_size: 16, max_count: 8, k_pool: 8, ..Default::default() },
        total_steps: 12,
        batch_size: 4,
        n_images: 8,
        image_size: 16,
        seed: 3,
        checkpoint_path: Some(ck.clone()),
        ..Default::default()
    };
    run_training(&cfg, None).unwrap();
    ck
}

fn gradient(h: usize, w: usize) -> Vec<f64> {
    (0..h * w).map(|i| ((i % w) as f64 / w as f64 + (i / w) as f64 / h as f64) / 2.0).collect()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cddvt_last_error()) }.to_string_lossy().into_owned()
}

fn load(path: &Path) -> *mut CddvtModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { cddvt_model_load(c.as_ptr(), &mut m) };
    assert_eq!(s, CddvtStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

const DEFAULT: CddvtMode = CddvtMode { kind: CddvtModeKind::Default, n: 0 };

#[test]
fn null_arguments_are_reported() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cddvt_model_load(ptr::null(), &mut m) }, CddvtStatus::NullPointer);
    assert!(last_error().contains("path"));
    let mut info = CddvtModelInfo::default();
    assert_eq!(unsafe { cddvt_model_info(ptr::null(), &mut info) }, CddvtStatus::NullPointer);
    let mut out = 0.0;
    assert_eq!(unsafe { cddvt_psnr(ptr::null(), ptr::null(), 8, 8, 1, &mut out) }, CddvtStatus::NullPointer);
    unsafe { cddvt_model_free(ptr::null_mut()) };
}

#[test]
fn missing_checkpoint_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("nope.ckpt");
    let c = CString::new(p.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cddvt_model_load(c.as_ptr(), &mut m) }, CddvtStatus::Io);
    assert!(m.is_null());
    assert!(last_error().contains("nope.ckpt"), "{}", last_error());
}

#[test]
fn reconstruction_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path());
    let model = Checkpoint::load(&ck).unwrap().model;
    let h = load(&ck);

    let mut info = CddvtModelInfo::default();
    assert_eq!(unsafe { cddvt_model_info(h, &mut info) }, CddvtStatus::Ok);
    assert_eq!(info.codebook_size, 16);
    assert_eq!(info.max_count, 8);

    let px = gradient(16, 16);
    let img = Image::new(16, 16, 1, px.clone()).unwrap();
    let cases = [
        (DEFAULT, model.config.active_mode()),
        (CddvtMode { kind: CddvtModeKind::Top1, n: 0 }, QuantizeMode::Warmup),
        (CddvtMode { kind: CddvtModeKind::Fixed, n: 3 }, QuantizeMode::FixedTopN(3)),
        (CddvtMode { kind: CddvtModeKind::Adaptive, n: 4 }, QuantizeMode::Adaptive(4)),
    ];
    for (mode, expected) in cases {
        let mut out = vec![0.0; 256];
        let s = unsafe { cddvt_reconstruct(h, px.as_ptr(), 16, 16, 1, mode, out.as_mut_ptr(), out.len()) };
        assert_eq!(s, CddvtStatus::Ok, "{}", last_error());
        let (want, fwd) = model.reconstruct(&img, expected).unwrap();
        assert_eq!(out, want.pixels, "{mode:?}");

        let mut counts = vec![0u32; 16];
        let s = unsafe { cddvt_allocation_counts(h, px.as_ptr(), 16, 16, 1, mode, counts.as_mut_ptr(), counts.len()) };
        assert_eq!(s, CddvtStatus::Ok, "{}", last_error());
        let want: Vec<u32> = fwd.quantized.alloc.counts().iter().map(|&c| c as u32).collect();
        assert_eq!(counts, want);
    }

    let mut sim = vec![0.0; 16];
    assert_eq!(unsafe { cddvt_centroid_similarity(h, sim.as_mut_ptr(), sim.len()) }, CddvtStatus::Ok);
    for i in 0..4 {
        assert!((sim[i * 4 + i] - 1.0).abs() < 1e-12);
    }
    unsafe { cddvt_model_free(h) };
}

#[test]
fn bad_buffers_and_modes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let h = load(&train_tiny(dir.path()));
    let px = gradient(16, 16);
    let mut out = vec![0.0; 255];
    let s = unsafe { cddvt_reconstruct(h, px.as_ptr(), 16, 16, 1, DEFAULT, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, CddvtStatus::BufferTooSmall);
    assert!(last_error().contains("256"), "{}", last_error());

    let mut out = vec![0.0; 256];
    let too_many = CddvtMode { kind: CddvtModeKind::Fixed, n: 17 };
    let s = unsafe { cddvt_reconstruct(h, px.as_ptr(), 16, 16, 1, too_many, out.as_mut_ptr(), out.len()) };
    assert_ne!(s, CddvtStatus::Ok);

    // 15 is not a multiple of the patch size.
    let s = unsafe { cddvt_reconstruct(h, px.as_ptr(), 15, 15, 1, DEFAULT, out.as_mut_ptr(), out.len()) };
    assert_ne!(s, CddvtStatus::Ok);
    assert!(!last_error().is_empty());

    let s = unsafe { cddvt_reconstruct(h, px.as_ptr(), 0, 16, 1, DEFAULT, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, CddvtStatus::InvalidArgument);
    unsafe { cddvt_model_free(h) };
}

#[test]
fn metrics_match_the_library() {
    let a = gradient(16, 16);
    let b: Vec<f64> = a.iter().map(|x| (x * 0.9 + 0.05).min(1.0)).collect();
    let (ia, ib) = (Image::new(16, 16, 1, a.clone()).unwrap(), Image::new(16, 16, 1, b.clone()).unwrap());
    let (mut p, mut s) = (0.0, 0.0);
    assert_eq!(unsafe { cddvt_psnr(a.as_ptr(), b.as_ptr(), 16, 16, 1, &mut p) }, CddvtStatus::Ok);
    assert_eq!(unsafe { cddvt_ssim(a.as_ptr(), b.as_ptr(), 16, 16, 1, &mut s) }, CddvtStatus::Ok);
    assert_eq!(p, psnr(&ia, &ib, 1.0).unwrap());
    assert_eq!(s, ssim(&ia, &ib).unwrap());
}

#[test]
fn status_strings_and_version() {
    let msg = unsafe { CStr::from_ptr(cddvt_status_message(CddvtStatus::BufferTooSmall)) };
    assert_eq!(msg.to_str().unwrap(), "output buffer too small");
    let v = unsafe { CStr::from_ptr(cddvt_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cddvt.h")
}

#[test]
fn header_declares_the_api() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "cddvt_model_load",
        "cddvt_model_free",
        "cddvt_model_info",
        "cddvt_reconstruct",
        "cddvt_allocation_counts",
        "cddvt_centroid_similarity",
        "cddvt_psnr",
        "cddvt_ssim",
        "cddvt_last_error",
        "cddvt_status_message",
        "cddvt_version",
        "CDDVT_STATUS_BUFFER_TOO_SMALL",
        "typedef struct CddvtModel CddvtModel",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
}

/// Compiles and runs a small C program against the static library.
#[test]
fn c_program_links_and_runs() {
    let Some(cc) = ["cc", "gcc", "clang"].into_iter().find(|c| Command::new(c).arg("--version").output().is_ok()) else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libcddvt_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path());
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "cddvt.h"

int main(int argc, char **argv) {
    CddvtModel *m = NULL;
    if (cddvt_model_load("/definitely/missing.ckpt", &m) != CDDVT_STATUS_IO) return 10;
    if (strstr(cddvt_last_error(), "missing.ckpt") == NULL) return 11;
    if (cddvt_model_load(argv[1], &m) != CDDVT_STATUS_OK) return 12;
    double px[256], out[256];
    for (int i = 0; i < 256; i++) px[i] = (i % 16) / 16.0;
    CddvtMode mode = { CDDVT_MODE_KIND_TOP1, 0 };
    if (cddvt_reconstruct(m, px, 16, 16, 1, mode, out, 256) != CDDVT_STATUS_OK) return 13;
    if (cddvt_reconstruct(m, px, 16, 16, 1, mode, out, 10) != CDDVT_STATUS_BUFFER_TOO_SMALL) return 14;
    for (int i = 0; i < 256; i++) if (out[i] < 0.0 || out[i] > 1.0) return 15;
    cddvt_model_free(m);
    printf("ok %s\n", cddvt_version());
    return argc == 2 ? 0 : 16;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).arg(&ck).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
