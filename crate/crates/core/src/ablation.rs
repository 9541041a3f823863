//! Paired training runs for the warm-up, allocation and diversity ablations.
//!
//! Each arm trains from the same base config with one setting changed, then
//! evaluates on the validation split with the arm's own post-warm-up policy.

use std::io::Write;
use std::path::Path;

use crate::codebook::mean_abs_pairwise_cosine;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::AllocationPolicy;
use crate::trainer::{load_data, run_training, TrainConfig};

pub const ABLATION_HEADER: &str =
    "setting,mean_mse,psnr,ssim,mean_count,perplexity_per_subcodebook,centroid_mean_abs_cos";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub report: EvalReport,
    pub centroid_mean_abs_cos: f64,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!("{},{}", self.report.csv_row(), self.centroid_mean_abs_cos)
    }
}

/// Trains one arm; with `out_dir`, its checkpoint and metrics land there as
/// `<setting>.ckpt` / `<setting>.csv`.
pub fn run_arm(cfg: &TrainConfig, setting: &str, out_dir: Option<&Path>) -> Result<AblationRow> {
    let mut cfg = cfg.clone();
    let file_stem = setting.replace([':', '='], "_");
    cfg.checkpoint_path = out_dir.map(|d| d.join(format!("{file_stem}.ckpt")));
    cfg.metrics_path = out_dir.map(|d| d.join(format!("{file_stem}.csv")));
    let out = run_training(&cfg, None)?;
    let (_, val) = load_data(&cfg)?;
    let model = &out.state.model;
    let mut report = evaluate(model, &val, cfg.model.active_mode())?;
    report.setting = setting.to_string();
    Ok(AblationRow {
        report,
        centroid_mean_abs_cos: mean_abs_pairwise_cosine(&model.codebook.centroids()),
    })
}

/// With and without the warm-up phase.
pub fn ablate_warmup(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    let frac = if cfg.warmup_fraction > 0.0 { cfg.warmup_fraction } else { 0.25 };
    [frac, 0.0]
        .iter()
        .map(|&f| {
            let arm = TrainConfig { warmup_fraction: f, ..cfg.clone() };
            run_arm(&arm, &format!("warmup_fraction={f}"), out_dir)
        })
        .collect()
}

/// Top-1, fixed Top-n and adaptive allocation, plus adaptive runs with the
/// candidate pool widened to each of `pool_sizes`.
pub fn ablate_topk(cfg: &TrainConfig, fixed_n: usize, pool_sizes: &[usize], out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    let v = cfg.model.codebook_size;
    if fixed_n == 0 || fixed_n > v {
        return Err(Error::arg(format!("fixed_n {fixed_n} outside [1, {v}]")));
    }
    if let Some(p) = pool_sizes.iter().find(|&&p| p == 0 || p > v) {
        return Err(Error::arg(format!("pool size {p} outside [1, {v}]")));
    }
    let with = |policy: AllocationPolicy, k_pool: usize| {
        let mut c = cfg.clone();
        c.model.policy = policy;
        c.model.k_pool = k_pool;
        c
    };
    let k = cfg.model.max_count;
    let mut arms = vec![
        ("top1".to_string(), with(AllocationPolicy::Top1, cfg.model.k_pool)),
        (format!("fixed:{fixed_n}"), with(AllocationPolicy::Fixed(fixed_n), cfg.model.k_pool)),
        (format!("adaptive:{k}"), with(AllocationPolicy::Adaptive, cfg.model.k_pool)),
    ];
    for &p in pool_sizes {
        arms.push((format!("adaptive:{k}/pool={p}"), with(AllocationPolicy::Adaptive, p)));
    }
    arms.iter().map(|(name, c)| run_arm(c, name, out_dir)).collect()
}

/// Without and with the centroid diversity loss.
pub fn ablate_diversity(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    [0.0, 0.25]
        .iter()
        .map(|&l| {
            let arm = TrainConfig { lambda_dqp: l, ..cfg.clone() };
            run_arm(&arm, &format!("lambda_dqp={l}"), out_dir)
        })
        .collect()
}

pub fn write_rows<W: Write>(rows: &[AblationRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{ABLATION_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig { codebook_size: 8, max_count: 4, k_pool: 4, ..Default::default() },
            total_steps: 4,
            batch_size: 2,
            n_images: 6,
            image_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn diversity_pairing_has_two_rows() {
        let rows = ablate_diversity(&tiny(), None).unwrap();
        let settings: Vec<&str> = rows.iter().map(|r| r.report.setting.as_str()).collect();
        assert_eq!(settings, ["lambda_dqp=0", "lambda_dqp=0.25"]);
        let mut buf = Vec::new();
        write_rows(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn topk_arms() {
        let rows = ablate_topk(&tiny(), 3, &[8], None).unwrap();
        let settings: Vec<&str> = rows.iter().map(|r| r.report.setting.as_str()).collect();
        assert_eq!(settings, ["top1", "fixed:3", "adaptive:4", "adaptive:4/pool=8"]);
        assert_eq!(rows[0].report.mean_count, 1.0);
        assert_eq!(rows[1].report.mean_count, 3.0);
        assert!(ablate_topk(&tiny(), 9, &[], None).is_err());
    }

    #[test]
    fn warmup_pairing() {
        let rows = ablate_warmup(&tiny(), None).unwrap();
        assert_eq!(rows[0].report.setting, "warmup_fraction=0.25");
        assert_eq!(rows[1].report.setting, "warmup_fraction=0");
    }
}
