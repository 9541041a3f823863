//! The full tokenizer: encoder, allocator, codebook and decoder.

use crate::allocator::{allocator_forward, AllocatorCache, AllocatorParams, RatioVector};
use crate::autoencoder::{decode, encode, patchify, unpatchify, DecoderParams, EncoderParams, Image, Mlp, MlpCache};
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::quantizer::{quantize, QuantizeMode, QuantizeOutput, QuantizerSettings};
use crate::rng::StreamRng;

/// How primitives are allocated once warm-up is over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationPolicy {
    /// Allocator-driven counts up to `K`.
    Adaptive,
    /// Always the single nearest primitive.
    Top1,
    /// Always exactly `n` primitives.
    Fixed(usize),
}

impl AllocationPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adaptive" => Some(Self::Adaptive),
            "top1" => Some(Self::Top1),
            _ => s.strip_prefix("fixed").and_then(|n| n.trim_start_matches(':').parse().ok()).map(Self::Fixed),
        }
    }
}

impl std::fmt::Display for AllocationPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Adaptive => f.write_str("adaptive"),
            Self::Top1 => f.write_str("top1"),
            Self::Fixed(n) => write!(f, "fixed:{n}"),
        }
    }
}

/// Architecture and quantizer hyperparameters; everything needed to rebuild
/// a model from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub patch: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_subcodebooks: usize,
    pub codebook_size: usize,
    pub allocator_hidden: usize,
    pub allocator_kernel: usize,
    /// `K`: maximum primitives per chunk in adaptive mode.
    pub max_count: usize,
    pub k_pool: usize,
    pub temperature: f64,
    pub beta: f64,
    pub policy: AllocationPolicy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            channels: 1,
            embed_dim: 16,
            hidden_dim: 32,
            num_subcodebooks: 4,
            codebook_size: 64,
            allocator_hidden: 8,
            allocator_kernel: 3,
            max_count: 16,
            k_pool: 16,
            temperature: 1.0,
            beta: 0.25,
            policy: AllocationPolicy::Adaptive,
        }
    }
}

impl ModelConfig {
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// `D' = D / M`.
    pub fn primitive_dim(&self) -> usize {
        self.embed_dim / self.num_subcodebooks.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch", self.patch),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_subcodebooks", self.num_subcodebooks),
            ("codebook_size", self.codebook_size),
            ("allocator_hidden", self.allocator_hidden),
            ("K", self.max_count),
            ("K_pool", self.k_pool),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.num_subcodebooks) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_subcodebooks {}",
                self.embed_dim, self.num_subcodebooks
            )));
        }
        if self.allocator_kernel.is_multiple_of(2) {
            return Err(Error::Config("allocator_kernel must be odd".into()));
        }
        if self.max_count > self.codebook_size || self.k_pool > self.codebook_size {
            return Err(Error::Config(format!(
                "K ({}) and K_pool ({}) must not exceed codebook_size ({})",
                self.max_count, self.k_pool, self.codebook_size
            )));
        }
        if let AllocationPolicy::Fixed(n) = self.policy {
            if n == 0 || n > self.codebook_size {
                return Err(Error::Config(format!("fixed count {n} outside [1, {}]", self.codebook_size)));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        Ok(())
    }

    /// Quantizer mode for the active (post warm-up) phase.
    pub fn active_mode(&self) -> QuantizeMode {
        match self.policy {
            AllocationPolicy::Adaptive => QuantizeMode::Adaptive(self.max_count),
            AllocationPolicy::Top1 => QuantizeMode::Warmup,
            AllocationPolicy::Fixed(n) => QuantizeMode::FixedTopN(n),
        }
    }

    pub fn settings(&self, mode: QuantizeMode) -> QuantizerSettings {
        QuantizerSettings {
            mode,
            k_pool: self.k_pool,
            temperature: self.temperature,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub allocator: AllocatorParams,
    pub codebook: Codebook,
    pub decoder: DecoderParams,
}

/// Everything a forward pass produces for one image.
#[derive(Debug, Clone)]
pub struct Forward {
    pub patches: Matrix,
    pub z: Matrix,
    pub encoder_cache: MlpCache,
    pub ratios: RatioVector,
    pub allocator_cache: AllocatorCache,
    pub quantized: QuantizeOutput,
    pub recon: Matrix,
    pub decoder_cache: MlpCache,
}

impl Tokenizer {
    /// Initializes all parameters from one stream, in a fixed order.
    pub fn init(config: ModelConfig, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        let encoder = Mlp::init(config.patch_dim(), config.hidden_dim, config.embed_dim, rng);
        let codebook = Codebook::init(config.num_subcodebooks, config.codebook_size, config.primitive_dim(), rng)?;
        let allocator = AllocatorParams::init(
            config.embed_dim,
            config.allocator_hidden,
            config.allocator_kernel,
            config.allocator_kernel,
            rng,
        )?;
        let decoder = Mlp::init(config.embed_dim, config.hidden_dim, config.patch_dim(), rng);
        Ok(Self { config, encoder, allocator, codebook, decoder })
    }

    /// Checks that every parameter block agrees with the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let ok = self.encoder.input_dim() == c.patch_dim()
            && self.encoder.output_dim() == c.embed_dim
            && self.decoder.input_dim() == c.embed_dim
            && self.decoder.output_dim() == c.patch_dim()
            && self.allocator.embed_dim == c.embed_dim
            && self.codebook.num_subcodebooks() == c.num_subcodebooks
            && self.codebook.size() == c.codebook_size
            && self.codebook.dim() == c.primitive_dim();
        if !ok {
            return Err(Error::Checkpoint("parameter shapes disagree with the model config".into()));
        }
        Ok(())
    }

    pub fn forward(&self, img: &Image, mode: QuantizeMode) -> Result<Forward> {
        if img.channels != self.config.channels {
            return Err(Error::shape(format!(
                "model expects {} channel(s), image has {}",
                self.config.channels, img.channels
            )));
        }
        let patches = patchify(img, self.config.patch)?;
        let (z, encoder_cache) = encode(&patches, &self.encoder)?;
        let (ratios, allocator_cache) = allocator_forward(&z, &self.allocator)?;
        let quantized = quantize(&z, &self.codebook, Some(&ratios), &self.config.settings(mode))?;
        let (recon, decoder_cache) = decode(&quantized.z_hat, &self.decoder)?;
        Ok(Forward {
            patches,
            z,
            encoder_cache,
            ratios,
            allocator_cache,
            quantized,
            recon,
            decoder_cache,
        })
    }

    /// Reconstructs an image (clamped to `[0, 1]`) along with its forward pass.
    pub fn reconstruct(&self, img: &Image, mode: QuantizeMode) -> Result<(Image, Forward)> {
        let fwd = self.forward(img, mode)?;
        let raw = unpatchify(&fwd.recon, img.height, img.width, img.channels, self.config.patch)?;
        let out = Image::new(raw.height, raw.width, raw.channels, raw.pixels)?;
        Ok((out, fwd))
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.decoder.is_finite()
            && self.allocator.is_finite()
            && self.codebook.entries().iter().all(Matrix::is_finite)
    }
}
