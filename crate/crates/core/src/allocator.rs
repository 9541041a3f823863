//! Per-patch allocation ratios.
//!
//! The allocator is two same-padded 1D convolutions over the patch sequence
//! of one image (ReLU between them) followed by a sigmoid. Its output ratio
//! decides how many primitives each patch may use; it is trained towards a
//! target derived from the per-patch quantization error.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{squared_distance, Matrix};
use crate::optim::StepRule;
use crate::rng::StreamRng;

/// Convolution weights are stored `[out][in][tap]`, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocatorParams {
    pub embed_dim: usize,
    pub hidden: usize,
    pub width1: usize,
    pub width2: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl AllocatorParams {
    pub fn zeros(embed_dim: usize, hidden: usize, width1: usize, width2: usize) -> Result<Self> {
        if embed_dim == 0 || hidden == 0 {
            return Err(Error::arg("allocator needs positive embedding and hidden widths"));
        }
        if width1.is_multiple_of(2) || width2.is_multiple_of(2) {
            return Err(Error::arg(format!(
                "kernel widths must be odd, got {width1} and {width2}"
            )));
        }
        Ok(Self {
            embed_dim,
            hidden,
            width1,
            width2,
            w1: vec![0.0; hidden * embed_dim * width1],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * width2],
            b2: 0.0,
        })
    }

    /// Uniform fan-in scaled initialization.
    pub fn init(embed_dim: usize, hidden: usize, width1: usize, width2: usize, rng: &mut StreamRng) -> Result<Self> {
        let mut p = Self::zeros(embed_dim, hidden, width1, width2)?;
        let a1 = 1.0 / ((embed_dim * width1) as f64).sqrt();
        let a2 = 1.0 / ((hidden * width2) as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.gen_range(-a1..a1));
        p.b1.iter_mut().for_each(|b| *b = rng.gen_range(-a1..a1));
        p.w2.iter_mut().for_each(|w| *w = rng.gen_range(-a2..a2));
        p.b2 = rng.gen_range(-a2..a2);
        Ok(p)
    }

    pub fn zero_grads(&self) -> Self {
        Self {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: 0.0,
            ..self.clone()
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.w1.iter_mut().zip(&other.w1).for_each(|(a, b)| *a += b);
        self.b1.iter_mut().zip(&other.b1).for_each(|(a, b)| *a += b);
        self.w2.iter_mut().zip(&other.w2).for_each(|(a, b)| *a += b);
        self.b2 += other.b2;
    }

    pub fn scale(&mut self, s: f64) {
        self.w1.iter_mut().chain(&mut self.b1).chain(&mut self.w2).for_each(|v| *v *= s);
        self.b2 *= s;
    }

    /// Applies `grads` with slots `slot_base..slot_base + 4`.
    pub fn apply_grads(&mut self, grads: &Self, rule: &mut dyn StepRule, slot_base: usize) -> Result<()> {
        rule.apply(slot_base, &mut self.w1, &grads.w1)?;
        rule.apply(slot_base + 1, &mut self.b1, &grads.b1)?;
        rule.apply(slot_base + 2, &mut self.w2, &grads.w2)?;
        rule.apply(slot_base + 3, std::slice::from_mut(&mut self.b2), &[grads.b2])
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).all(|v| v.is_finite()) && self.b2.is_finite()
    }

    fn w1_at(&self, out: usize, inp: usize, tap: usize) -> usize {
        (out * self.embed_dim + inp) * self.width1 + tap
    }
}

/// Sigmoid outputs, one per patch; inside (0, 1) unless saturated in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioVector(pub Vec<f64>);

/// Normalized per-patch error targets in `[1/V', 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioTarget(pub Vec<f64>);

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AllocatorCache {
    input: Matrix,
    pre_relu: Vec<f64>,
    ratios: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Runs the allocator over one patch sequence (rows of `z` in raster order).
pub fn allocator_forward(z: &Matrix, p: &AllocatorParams) -> Result<(RatioVector, AllocatorCache)> {
    if z.cols() != p.embed_dim {
        return Err(Error::shape(format!(
            "allocator expects width {}, got {}",
            p.embed_dim,
            z.cols()
        )));
    }
    let len = z.rows();
    let (h, pad1, pad2) = (p.hidden, p.width1 / 2, p.width2 / 2);
    let mut pre = vec![0.0; len * h];
    for t in 0..len {
        for o in 0..h {
            let mut acc = p.b1[o];
            for k in 0..p.width1 {
                let Some(src) = (t + k).checked_sub(pad1).filter(|&s| s < len) else {
                    continue;
                };
                let row = z.row(src);
                for (i, x) in row.iter().enumerate() {
                    acc += p.w1[p.w1_at(o, i, k)] * x;
                }
            }
            pre[t * h + o] = acc;
        }
    }
    let mut ratios = vec![0.0; len];
    for (t, r) in ratios.iter_mut().enumerate() {
        let mut s = p.b2;
        for k in 0..p.width2 {
            let Some(src) = (t + k).checked_sub(pad2).filter(|&s| s < len) else {
                continue;
            };
            for o in 0..h {
                s += p.w2[o * p.width2 + k] * pre[src * h + o].max(0.0);
            }
        }
        *r = sigmoid(s);
    }
    let cache = AllocatorCache {
        input: z.clone(),
        pre_relu: pre,
        ratios: ratios.clone(),
    };
    Ok((RatioVector(ratios), cache))
}

/// Back-propagates `d loss / d R` to the parameters and the input embeddings.
pub fn allocator_backward(
    cache: &AllocatorCache,
    p: &AllocatorParams,
    grad_ratio: &[f64],
) -> Result<(AllocatorParams, Matrix)> {
    let len = cache.ratios.len();
    if grad_ratio.len() != len {
        return Err(Error::shape(format!(
            "{} ratio gradients for {len} patches",
            grad_ratio.len()
        )));
    }
    let (h, pad1, pad2) = (p.hidden, p.width1 / 2, p.width2 / 2);
    let mut g = p.zero_grads();
    let mut d_act = vec![0.0; len * h];
    for t in 0..len {
        let r = cache.ratios[t];
        let ds = grad_ratio[t] * r * (1.0 - r);
        g.b2 += ds;
        for k in 0..p.width2 {
            let Some(src) = (t + k).checked_sub(pad2).filter(|&s| s < len) else {
                continue;
            };
            for o in 0..h {
                let act = cache.pre_relu[src * h + o].max(0.0);
                g.w2[o * p.width2 + k] += ds * act;
                d_act[src * h + o] += ds * p.w2[o * p.width2 + k];
            }
        }
    }
    let mut d_input = Matrix::zeros(len, p.embed_dim);
    for t in 0..len {
        for o in 0..h {
            if cache.pre_relu[t * h + o] <= 0.0 {
                continue;
            }
            let dpre = d_act[t * h + o];
            g.b1[o] += dpre;
            for k in 0..p.width1 {
                let Some(src) = (t + k).checked_sub(pad1).filter(|&s| s < len) else {
                    continue;
                };
                for i in 0..p.embed_dim {
                    let wi = p.w1_at(o, i, k);
                    g.w1[wi] += dpre * cache.input.get(src, i);
                    let cur = d_input.get(src, i);
                    d_input.set(src, i, cur + dpre * p.w1[wi]);
                }
            }
        }
    }
    Ok((g, d_input))
}

/// `n = clamp(round(R * K), 1, K)`; no patch is ever left without a primitive.
pub fn count_from_ratio(r: &RatioVector, k: usize) -> Vec<usize> {
    let k = k.max(1);
    r.0.iter()
        .map(|&ratio| ((ratio * k as f64).round() as usize).clamp(1, k))
        .collect()
}

/// Min-max maps the per-patch squared errors of the batch onto `[1/V', 1]`.
/// A batch whose errors are all equal maps entirely to `1/V'`.
pub fn ratio_target(z: &Matrix, z_hat: &Matrix, codebook_size: usize) -> Result<RatioTarget> {
    if z.shape() != z_hat.shape() {
        return Err(Error::shape(format!(
            "ratio target needs equal shapes, got {:?} and {:?}",
            z.shape(),
            z_hat.shape()
        )));
    }
    let errors: Vec<f64> = z.row_iter().zip(z_hat.row_iter()).map(|(a, b)| squared_distance(a, b)).collect();
    Ok(ratio_target_from_errors(&errors, codebook_size))
}

pub fn ratio_target_from_errors(errors: &[f64], codebook_size: usize) -> RatioTarget {
    let lo = 1.0 / codebook_size.max(1) as f64;
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let targets = errors
        .iter()
        .map(|&e| {
            if !(span > 0.0) {
                lo
            } else {
                // Clamp guards the endpoints against rounding in the affine map.
                (lo + (1.0 - lo) * (e - min) / span).clamp(lo, 1.0)
            }
        })
        .collect();
    RatioTarget(targets)
}

/// Mean squared error between ratios and targets, with gradient w.r.t. the ratios.
pub fn dpa_loss(r: &RatioVector, target: &RatioTarget) -> Result<(f64, Vec<f64>)> {
    if r.0.len() != target.0.len() {
        return Err(Error::shape(format!(
            "{} ratios against {} targets",
            r.0.len(),
            target.0.len()
        )));
    }
    let n = r.0.len().max(1) as f64;
    let loss = r.0.iter().zip(&target.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let grad = r.0.iter().zip(&target.0).map(|(a, b)| 2.0 * (a - b) / n).collect();
    Ok((loss, grad))
}
