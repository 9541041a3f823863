//! Image quality, codebook health and allocation statistics.

use std::io::Write;

use crate::autoencoder::Image;
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_matrix, Matrix, DEFAULT_COS_EPS};
use crate::quantizer::AllocationMap;

/// Returned by [`psnr`] when the images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::shape(format!(
            "{}x{}x{} image against {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.pixels.len().max(1) as f64;
    Ok(a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

pub fn psnr(a: &Image, b: &Image, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 8, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

/// Mean SSIM over non-overlapping `window x window` blocks (partial blocks
/// at the right and bottom edges are skipped), averaged over channels.
pub fn ssim_with(a: &Image, b: &Image, params: SsimParams) -> Result<f64> {
    check_dims(a, b)?;
    let w = params.window;
    if w == 0 || a.height < w || a.width < w {
        return Err(Error::arg(format!(
            "{}x{} image is smaller than the {w}x{w} SSIM window",
            a.height, a.width
        )));
    }
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut blocks = 0usize;
    for ch in 0..a.channels {
        for by in 0..a.height / w {
            for bx in 0..a.width / w {
                let pix = |img: &Image| -> Vec<f64> {
                    (0..w * w).map(|i| img.get(by * w + i / w, bx * w + i % w, ch)).collect()
                };
                let (xa, xb) = (pix(a), pix(b));
                let ma = xa.iter().sum::<f64>() / n;
                let mb = xb.iter().sum::<f64>() / n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for (p, q) in xa.iter().zip(&xb) {
                    va += (p - ma) * (p - ma);
                    vb += (q - mb) * (q - mb);
                    cov += (p - ma) * (q - mb);
                }
                let (va, vb, cov) = (va / n, vb / n, cov / n);
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                total += num / den;
                blocks += 1;
            }
        }
    }
    Ok(total / blocks as f64)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, SsimParams::default())
}

/// `exp(entropy)` of a usage histogram.
pub fn codebook_perplexity(usage_counts: &[u64]) -> Result<f64> {
    let total: u64 = usage_counts.iter().sum();
    if total == 0 {
        return Err(Error::arg("perplexity of an unused codebook is undefined"));
    }
    let t = total as f64;
    let entropy: f64 = usage_counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

pub fn codebook_perplexities(cb: &Codebook) -> Result<Vec<f64>> {
    cb.usage_counts().iter().map(|c| codebook_perplexity(c)).collect()
}

/// Per-patch primitive counts laid out on the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub height: usize,
    pub width: usize,
    pub max_count: usize,
    pub counts: Vec<usize>,
}

impl HeatmapGrid {
    /// Counts `1..=K` map linearly onto `0..=255`.
    pub fn to_image(&self) -> Image {
        let span = (self.max_count.max(2) - 1) as f64;
        let pixels = self
            .counts
            .iter()
            .map(|&n| {
                let level = if self.max_count <= 1 { 0.0 } else { (255.0 * (n - 1) as f64 / span).round() };
                level / 255.0
            })
            .collect();
        Image { height: self.height, width: self.width, channels: 1, pixels }
    }

    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        crate::data::encode_netpbm(&self.to_image())
    }

    /// Pixel levels exactly as written to the PGM body.
    pub fn levels(&self) -> Vec<u8> {
        self.to_image().pixels.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }
}

pub fn allocation_heatmap(alloc: &AllocationMap, height: usize, width: usize, max_count: usize) -> Result<HeatmapGrid> {
    if alloc.patches.len() != height * width {
        return Err(Error::shape(format!(
            "{} patches cannot fill a {height}x{width} grid",
            alloc.patches.len()
        )));
    }
    let counts = alloc.counts();
    if let Some(&n) = counts.iter().find(|&&n| n == 0 || n > max_count) {
        return Err(Error::arg(format!("count {n} outside [1, {max_count}]")));
    }
    Ok(HeatmapGrid { height, width, max_count, counts })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation between allocation counts and complexity labels.
pub fn complexity_correlation(counts: &[f64], labels: &[f64]) -> Result<f64> {
    if counts.len() != labels.len() {
        return Err(Error::shape(format!("{} counts against {} labels", counts.len(), labels.len())));
    }
    if counts.len() < 3 {
        return Err(Error::arg("rank correlation needs at least 3 patches"));
    }
    pearson(&average_ranks(counts), &average_ranks(labels))
        .ok_or_else(|| Error::Numerical("rank correlation undefined: counts or labels are constant".into()))
}

/// Pairwise centroid cosine similarities, unit diagonal.
pub fn centroid_similarity_matrix(cb: &Codebook) -> Matrix {
    let c = cb.centroids().centroids;
    let mut sim = cosine_similarity_matrix(&c, &c, DEFAULT_COS_EPS).expect("centroids share a width");
    for j in 0..sim.rows() {
        sim.set(j, j, 1.0);
    }
    sim
}

pub fn write_matrix_csv<W: Write>(m: &Matrix, mut out: W) -> std::io::Result<()> {
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// One point of a rate-distortion sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    /// `None` for the allocator-driven setting.
    pub forced_n: Option<usize>,
    pub mean_mse: f64,
    pub mean_count: f64,
}
