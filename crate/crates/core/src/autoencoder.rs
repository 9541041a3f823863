//! Per-patch encoder and decoder.
//!
//! Both directions are the same two-layer perceptron shape:
//! affine -> tanh -> affine, applied independently to every patch row.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::optim::StepRule;
use crate::rng::StreamRng;

/// Raster image with interleaved channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    /// Builds an image, clamping every pixel into `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, mut pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} pixels for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("image has non-finite pixels".into()));
        }
        pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        Ok(Self { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels: 1,
            pixels: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }
}

/// Patches in raster order; each row is one `p x p x channels` patch, itself
/// stored row-major with interleaved channels.
pub fn patchify(img: &Image, p: usize) -> Result<Matrix> {
    if p == 0 || !img.height.is_multiple_of(p) || !img.width.is_multiple_of(p) {
        return Err(Error::arg(format!(
            "{}x{} image is not divisible into {p}x{p} patches",
            img.height, img.width
        )));
    }
    let (gh, gw, c) = (img.height / p, img.width / p, img.channels);
    let cols = p * p * c;
    let mut data = Vec::with_capacity(gh * gw * cols);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                let start = ((py * p + y) * img.width + px * p) * c;
                data.extend_from_slice(&img.pixels[start..start + p * c]);
            }
        }
    }
    Matrix::new(gh * gw, cols, data)
}

/// Reassembles patches into an image without clamping.
pub fn unpatchify(patches: &Matrix, height: usize, width: usize, channels: usize, p: usize) -> Result<Image> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(Error::arg(format!("{height}x{width} image is not divisible into {p}x{p} patches")));
    }
    let (gh, gw) = (height / p, width / p);
    if patches.shape() != (gh * gw, p * p * channels) {
        return Err(Error::shape(format!(
            "{:?} patches cannot form a {height}x{width}x{channels} image with patch {p}",
            patches.shape()
        )));
    }
    let mut pixels = vec![0.0; height * width * channels];
    for (i, row) in patches.row_iter().enumerate() {
        let (py, px) = (i / gw, i % gw);
        for y in 0..p {
            let start = ((py * p + y) * width + px * p) * channels;
            pixels[start..start + p * channels].copy_from_slice(&row[y * p * channels..(y + 1) * p * channels]);
        }
    }
    Ok(Image { height, width, channels, pixels })
}

/// `out = tanh(x W1 + b1) W2 + b2`, weights stored input-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

pub type EncoderParams = Mlp;
pub type DecoderParams = Mlp;

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Matrix,
    hidden: Matrix,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Matrix::zeros(input, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, output),
            b2: vec![0.0; output],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut StreamRng) -> Self {
        let mut m = Self::zeros(input, hidden, output);
        let a1 = (6.0 / (input + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + output) as f64).sqrt();
        m.w1.as_mut_slice().iter_mut().for_each(|w| *w = rng.gen_range(-a1..a1));
        m.w2.as_mut_slice().iter_mut().for_each(|w| *w = rng.gen_range(-a2..a2));
        m
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "layer expects width {}, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let (h, o) = (self.hidden_dim(), self.output_dim());
        let mut hidden = Matrix::zeros(x.rows(), h);
        let mut out = Matrix::zeros(x.rows(), o);
        for (r, row) in x.row_iter().enumerate() {
            let hr = hidden.row_mut(r);
            hr.copy_from_slice(&self.b1);
            for (i, &xi) in row.iter().enumerate() {
                hr.iter_mut().zip(self.w1.row(i)).for_each(|(a, w)| *a += xi * w);
            }
            hr.iter_mut().for_each(|a| *a = a.tanh());
            let or = out.row_mut(r);
            or.copy_from_slice(&self.b2);
            for (k, &hk) in hidden.row(r).iter().enumerate() {
                or.iter_mut().zip(self.w2.row(k)).for_each(|(a, w)| *a += hk * w);
            }
        }
        Ok((out, MlpCache { input: x.clone(), hidden }))
    }

    /// Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Matrix) -> Result<(Mlp, Matrix)> {
        if grad_out.shape() != (cache.input.rows(), self.output_dim()) {
            return Err(Error::shape("output gradient does not match forward pass"));
        }
        let mut g = Mlp::zeros(self.input_dim(), self.hidden_dim(), self.output_dim());
        let mut grad_in = Matrix::zeros(cache.input.rows(), self.input_dim());
        let mut dh = vec![0.0; self.hidden_dim()];
        for r in 0..cache.input.rows() {
            let go = grad_out.row(r);
            let hr = cache.hidden.row(r);
            g.b2.iter_mut().zip(go).for_each(|(a, b)| *a += b);
            for (k, &hk) in hr.iter().enumerate() {
                g.w2.row_mut(k).iter_mut().zip(go).for_each(|(a, b)| *a += hk * b);
                dh[k] = crate::numerics::dot(self.w2.row(k), go) * (1.0 - hk * hk);
            }
            g.b1.iter_mut().zip(&dh).for_each(|(a, b)| *a += b);
            let xr = cache.input.row(r);
            let gi = grad_in.row_mut(r);
            for (i, &xi) in xr.iter().enumerate() {
                g.w1.row_mut(i).iter_mut().zip(&dh).for_each(|(a, b)| *a += xi * b);
                gi[i] = crate::numerics::dot(self.w1.row(i), &dh);
            }
        }
        Ok((g, grad_in))
    }

    pub fn add_assign(&mut self, other: &Mlp) -> Result<()> {
        self.w1.add_assign(&other.w1)?;
        self.w2.add_assign(&other.w2)?;
        self.b1.iter_mut().zip(&other.b1).for_each(|(a, b)| *a += b);
        self.b2.iter_mut().zip(&other.b2).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn zero_grads(&self) -> Mlp {
        Mlp::zeros(self.input_dim(), self.hidden_dim(), self.output_dim())
    }

    /// Applies `grads` with slots `slot_base..slot_base + 4`.
    pub fn apply_grads(&mut self, grads: &Mlp, rule: &mut dyn StepRule, slot_base: usize) -> Result<()> {
        rule.apply(slot_base, self.w1.as_mut_slice(), grads.w1.as_slice())?;
        rule.apply(slot_base + 1, &mut self.b1, &grads.b1)?;
        rule.apply(slot_base + 2, self.w2.as_mut_slice(), grads.w2.as_slice())?;
        rule.apply(slot_base + 3, &mut self.b2, &grads.b2)
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite() && self.w2.is_finite() && self.b1.iter().chain(&self.b2).all(|v| v.is_finite())
    }
}

/// Patches to latent embeddings.
pub fn encode(patches: &Matrix, params: &EncoderParams) -> Result<(Matrix, MlpCache)> {
    params.forward(patches)
}

/// Quantized embeddings to reconstructed patches (unclamped).
pub fn decode(z_hat: &Matrix, params: &DecoderParams) -> Result<(Matrix, MlpCache)> {
    params.forward(z_hat)
}

/// Decodes and assembles an image, clamping pixels for export.
pub fn decode_image(z_hat: &Matrix, params: &DecoderParams, height: usize, width: usize, channels: usize, p: usize) -> Result<Image> {
    let (patches, _) = decode(z_hat, params)?;
    let raw = unpatchify(&patches, height, width, channels, p)?;
    Image::new(raw.height, raw.width, raw.channels, raw.pixels)
}

/// Mean squared error over all values, and its gradient w.r.t. `recon`.
pub fn reconstruction_loss(target: &Matrix, recon: &Matrix) -> Result<(f64, Matrix)> {
    if target.shape() != recon.shape() {
        return Err(Error::shape(format!(
            "reconstruction {:?} against target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let n = target.as_slice().len().max(1) as f64;
    let mut grad = Matrix::zeros(recon.rows(), recon.cols());
    let mut loss = 0.0;
    for ((g, r), t) in grad.as_mut_slice().iter_mut().zip(recon.as_slice()).zip(target.as_slice()) {
        let d = r - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}
