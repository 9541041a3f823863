//! Validation-set evaluation and rate-distortion sweeps.

use std::io::Write;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{codebook_perplexity, mse, psnr_from_mse, ssim, RdPoint};
use crate::model::Tokenizer;
use crate::quantizer::QuantizeMode;

pub const REPORT_HEADER: &str = "setting,mean_mse,psnr,ssim,mean_count,perplexity_per_subcodebook";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub setting: String,
    /// Mean over images of the per-image pixel MSE (clamped reconstructions).
    pub mean_mse: f64,
    /// PSNR of `mean_mse`.
    pub psnr: f64,
    pub mean_ssim: f64,
    pub mean_count: f64,
    /// Perplexity of primitive usage over the evaluated set, per sub-codebook.
    pub perplexities: Vec<f64>,
    /// Allocation count of every patch, images in order.
    pub counts: Vec<usize>,
    /// Complexity label of every patch, aligned with `counts`.
    pub labels: Vec<u8>,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let ppl: Vec<String> = self.perplexities.iter().map(|p| p.to_string()).collect();
        format!(
            "{},{},{},{},{},{}",
            self.setting,
            self.mean_mse,
            self.psnr,
            self.mean_ssim,
            self.mean_count,
            ppl.join(";")
        )
    }
}

pub fn setting_name(mode: QuantizeMode) -> String {
    match mode {
        QuantizeMode::Warmup => "top1".into(),
        QuantizeMode::FixedTopN(n) => format!("fixed:{n}"),
        QuantizeMode::Adaptive(k) => format!("adaptive:{k}"),
    }
}

struct ImageEval {
    mse: f64,
    ssim: f64,
    counts: Vec<usize>,
    usage: Vec<Vec<u64>>,
}

/// Evaluates `model` on every image of `ds` with the quantizer in `mode`.
pub fn evaluate(model: &Tokenizer, ds: &Dataset, mode: QuantizeMode) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::arg("evaluation set is empty"));
    }
    mode.validate(model.config.codebook_size)?;
    let (m, v) = (model.config.num_subcodebooks, model.config.codebook_size);
    let per: Vec<ImageEval> = ds
        .items
        .par_iter()
        .map(|item| {
            let (recon, fwd) = model.reconstruct(&item.image, mode)?;
            Ok(ImageEval {
                mse: mse(&item.image, &recon)?,
                ssim: ssim(&item.image, &recon)?,
                counts: fwd.quantized.alloc.counts(),
                usage: fwd.quantized.alloc.usage(m, v),
            })
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mean_mse = per.iter().map(|e| e.mse).sum::<f64>() / n;
    let mean_ssim = per.iter().map(|e| e.ssim).sum::<f64>() / n;
    let counts: Vec<usize> = per.iter().flat_map(|e| e.counts.iter().copied()).collect();
    let mean_count = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
    let mut usage = vec![vec![0u64; v]; m];
    for e in &per {
        for (acc, u) in usage.iter_mut().zip(&e.usage) {
            acc.iter_mut().zip(u).for_each(|(a, b)| *a += b);
        }
    }
    let perplexities = usage.iter().map(|u| codebook_perplexity(u)).collect::<Result<_>>()?;
    let labels = ds.items.iter().flat_map(|i| i.patch_complexity.iter().map(|c| c.label())).collect();
    Ok(EvalReport {
        setting: setting_name(mode),
        mean_mse,
        psnr: psnr_from_mse(mean_mse, 1.0),
        mean_ssim,
        mean_count,
        perplexities,
        counts,
        labels,
    })
}

/// Full reports for each forced count followed by the allocator-driven setting.
pub fn sweep(model: &Tokenizer, ds: &Dataset, forced_ns: &[usize]) -> Result<Vec<EvalReport>> {
    let v = model.config.codebook_size;
    if let Some(&n) = forced_ns.iter().find(|&&n| n == 0 || n > v) {
        return Err(Error::arg(format!("forced count {n} outside [1, {v}]")));
    }
    let mut modes: Vec<QuantizeMode> = forced_ns.iter().map(|&n| QuantizeMode::FixedTopN(n)).collect();
    modes.push(QuantizeMode::Adaptive(model.config.max_count));
    modes.into_iter().map(|m| evaluate(model, ds, m)).collect()
}

pub fn rate_distortion(model: &Tokenizer, ds: &Dataset, forced_ns: &[usize]) -> Result<Vec<RdPoint>> {
    let reports = sweep(model, ds, forced_ns)?;
    Ok(reports
        .iter()
        .enumerate()
        .map(|(i, r)| RdPoint {
            forced_n: forced_ns.get(i).copied(),
            mean_mse: r.mean_mse,
            mean_count: r.mean_count,
        })
        .collect())
}

pub fn write_report<W: Write>(reports: &[EvalReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Mix};
    use crate::model::ModelConfig;
    use crate::rng::stream;

    fn setup() -> (Tokenizer, Dataset) {
        let model = Tokenizer::init(ModelConfig::default(), &mut stream(4, "init")).unwrap();
        (model, gen_synthetic(3, 16, 4, Mix::UNIFORM, 4).unwrap())
    }

    #[test]
    fn sweep_shape_and_bounds() {
        let (model, ds) = setup();
        let pts = rate_distortion(&model, &ds, &[1, 4, 10]).unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[1].forced_n, Some(4));
        assert_eq!(pts[1].mean_count, 4.0);
        assert!(pts[3].forced_n.is_none());
        assert!((1.0..=16.0).contains(&pts[3].mean_count));
        assert!(pts.iter().all(|p| p.mean_mse >= 0.0));
    }

    #[test]
    fn forced_one_matches_warmup() {
        let (model, ds) = setup();
        let w = evaluate(&model, &ds, QuantizeMode::Warmup).unwrap();
        let pts = rate_distortion(&model, &ds, &[1]).unwrap();
        assert_eq!(pts[0].mean_mse.to_bits(), w.mean_mse.to_bits());
    }

    #[test]
    fn rejects_oversized_count() {
        let (model, ds) = setup();
        assert!(matches!(rate_distortion(&model, &ds, &[65]), Err(Error::Argument(_))));
    }

    #[test]
    fn report_csv() {
        let (model, ds) = setup();
        let r = evaluate(&model, &ds, QuantizeMode::FixedTopN(2)).unwrap();
        let mut buf = Vec::new();
        write_report(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert!(lines[1].starts_with("fixed:2,"));
        assert_eq!(lines[1].split(',').count(), 6);
        assert_eq!(lines[1].rsplit(',').next().unwrap().split(';').count(), 4);
    }
}
