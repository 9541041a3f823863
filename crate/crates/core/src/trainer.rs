//! Training loop: loss assembly with warm-up gating, Adam updates,
//! checkpointing and per-step metrics.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;

use crate::allocator::{allocator_backward, dpa_loss, ratio_target_from_errors, AllocatorParams, RatioTarget, RatioVector};
use crate::autoencoder::{reconstruction_loss, Image, Mlp};
use crate::checkpoint::Checkpoint;
use crate::codebook::diversity_loss;
use crate::data::{gen_synthetic, read_manifest, split, Dataset, Mix};
use crate::error::{Error, Result};
use crate::metrics::codebook_perplexity;
use crate::model::{Forward, ModelConfig, Tokenizer};
use crate::numerics::Matrix;
use crate::optim::{Adam, StepRule};
use crate::quantizer::{commitment_loss, quantize_backward, QuantizeMode};
use crate::rng::{step_stream, stream, INIT};

/// Optimizer slot layout: four blocks per MLP/allocator, then one per sub-codebook.
pub const ENCODER_SLOTS: usize = 0;
pub const DECODER_SLOTS: usize = 4;
pub const ALLOCATOR_SLOTS: usize = 8;
pub const CODEBOOK_SLOTS: usize = 12;

pub const METRICS_HEADER: &str =
    "step,loss_total,loss_rec,loss_commit,loss_dqp,loss_dpa,mean_count,std_count,mean_R,mean_Rstar,perplexity";

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_rec: f64,
    pub lambda_dqp: f64,
    pub lambda_dpa: f64,
    pub seed: u64,
    pub data: DataSource,
    pub n_images: usize,
    pub image_size: usize,
    pub mix: Mix,
    pub train_frac: f64,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// Worker threads for per-image work; 0 uses rayon's default pool.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            total_steps: 1000,
            warmup_fraction: 0.25,
            batch_size: 8,
            learning_rate: 1e-3,
            lambda_rec: 1.0,
            lambda_dqp: 0.25,
            lambda_dpa: 1.0,
            seed: 0,
            data: DataSource::Synthetic,
            n_images: 256,
            image_size: 32,
            mix: Mix::UNIFORM,
            train_frac: 0.8,
            checkpoint_path: None,
            metrics_path: None,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("lambda_rec", self.lambda_rec),
            ("lambda_dqp", self.lambda_dqp),
            ("lambda_dpa", self.lambda_dpa),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config(format!("train_frac {} outside (0, 1)", self.train_frac)));
        }
        if self.data == DataSource::Synthetic && !self.image_size.is_multiple_of(self.model.patch) {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of patch {}",
                self.image_size, self.model.patch
            )));
        }
        self.mix.validate()
    }

    /// First step of the active phase.
    pub fn warmup_steps(&self) -> u64 {
        warmup_steps(self.total_steps, self.warmup_fraction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Active,
}

fn warmup_steps(total_steps: u64, warmup_fraction: f64) -> u64 {
    (warmup_fraction * total_steps as f64).ceil() as u64
}

/// `Warmup` iff `step < ceil(warmup_fraction * total_steps)`.
pub fn phase(step: u64, total_steps: u64, warmup_fraction: f64) -> Phase {
    if step < warmup_steps(total_steps, warmup_fraction) {
        Phase::Warmup
    } else {
        Phase::Active
    }
}

/// Unweighted loss terms; `commit` already includes `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub rec: f64,
    pub commit: f64,
    pub dqp: f64,
    pub dpa: f64,
}

/// Total loss and its derivative with respect to each component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalLoss {
    pub total: f64,
    pub d_rec: f64,
    pub d_commit: f64,
    pub d_dqp: f64,
    pub d_dpa: f64,
}

/// Weighted sum; during warm-up the DQP and DPA terms contribute exactly nothing.
pub fn total_loss(c: &LossComponents, cfg: &TrainConfig, phase: Phase) -> Result<TotalLoss> {
    for (name, v) in [("rec", c.rec), ("commit", c.commit), ("dqp", c.dqp), ("dpa", c.dpa)] {
        if v.is_nan() {
            return Err(Error::Numerical(format!("loss component `{name}` is NaN")));
        }
    }
    let (d_dqp, d_dpa) = match phase {
        Phase::Warmup => (0.0, 0.0),
        Phase::Active => (cfg.lambda_dqp, cfg.lambda_dpa),
    };
    let mut total = cfg.lambda_rec * c.rec + c.commit;
    if phase == Phase::Active {
        total += d_dqp * c.dqp + d_dpa * c.dpa;
    }
    Ok(TotalLoss {
        total,
        d_rec: cfg.lambda_rec,
        d_commit: 1.0,
        d_dqp,
        d_dpa,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_rec: f64,
    pub loss_commit: f64,
    pub loss_dqp: f64,
    pub loss_dpa: f64,
    pub mean_count: f64,
    pub std_count: f64,
    pub mean_r: f64,
    pub mean_rstar: f64,
    pub perplexity: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_total,
            self.loss_rec,
            self.loss_commit,
            self.loss_dqp,
            self.loss_dpa,
            self.mean_count,
            self.std_count,
            self.mean_r,
            self.mean_rstar,
            self.perplexity
        )
    }
}

/// Per-step detail handed to an observer.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: u64,
    pub phase: Phase,
    pub ratio_target: RatioTarget,
    pub ratios: RatioVector,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub model: Tokenizer,
    pub optimizer: Adam,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Tokenizer::init(cfg.model.clone(), &mut stream(cfg.seed, INIT))?;
        Ok(Self { step: 0, model, optimizer: Adam::new(cfg.learning_rate) })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            step: self.step,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state; cannot resume".into()))?;
        ck.model.validate()?;
        Ok(Self { step: ck.step, model: ck.model, optimizer })
    }
}

struct ImageGrads {
    encoder: Mlp,
    decoder: Mlp,
    allocator: Option<AllocatorParams>,
    codebook: Vec<Matrix>,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count().max(1) as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One optimizer step on `batch`. The state's step counter decides the phase.
pub fn train_step(state: &mut TrainState, batch: &[&Image], cfg: &TrainConfig) -> Result<(StepMetrics, StepTrace)> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    if state.model.config != cfg.model {
        return Err(Error::Config("model config of the state differs from the training config".into()));
    }
    let ph = phase(state.step, cfg.total_steps, cfg.warmup_fraction);
    let mode = match ph {
        Phase::Warmup => QuantizeMode::Warmup,
        Phase::Active => cfg.model.active_mode(),
    };
    let model = &state.model;
    let fwds: Vec<Forward> = batch.par_iter().map(|img| model.forward(img, mode)).collect::<Result<_>>()?;

    // Batch-level normalizers: every mean runs over all rows/pixels in the batch.
    let total_rows: usize = fwds.iter().map(|f| f.z.rows()).sum();
    let total_px: usize = fwds.iter().map(|f| f.recon.as_slice().len()).sum();

    let errors: Vec<f64> = fwds.iter().flat_map(|f| f.quantized.per_patch_error.iter().copied()).collect();
    let rstar = ratio_target_from_errors(&errors, cfg.model.codebook_size);
    let ratios = RatioVector(fwds.iter().flat_map(|f| f.ratios.0.iter().copied()).collect());
    let counts: Vec<usize> = fwds.iter().flat_map(|f| f.quantized.alloc.counts()).collect();

    let mut comps = LossComponents::default();
    let mut recs = Vec::with_capacity(fwds.len());
    let mut commits = Vec::with_capacity(fwds.len());
    for f in &fwds {
        let (mse, g) = reconstruction_loss(&f.patches, &f.recon)?;
        let w = f.recon.as_slice().len() as f64 / total_px as f64;
        comps.rec += mse * w;
        recs.push((g, w));
        let c = commitment_loss(&f.z, &f.quantized.z_hat, cfg.model.beta)?;
        let w = f.z.rows() as f64 / total_rows as f64;
        comps.commit += c.loss * w;
        commits.push((c, w));
    }
    let centroids = model.codebook.centroids();
    let (dqp_grad, dpa_grad) = if ph == Phase::Active {
        let (dqp, g_dqp) = diversity_loss(&centroids);
        let (dpa, g_dpa) = dpa_loss(&ratios, &rstar)?;
        comps.dqp = dqp;
        comps.dpa = dpa;
        (Some(g_dqp), Some(g_dpa))
    } else {
        (None, None)
    };
    let tl = total_loss(&comps, cfg, ph)?;
    if !tl.total.is_finite() {
        return Err(dump_state(state, cfg, format!("non-finite total loss at step {}", state.step)));
    }

    let mut offsets = Vec::with_capacity(fwds.len());
    let mut acc = 0;
    for f in &fwds {
        offsets.push(acc);
        acc += f.z.rows();
    }
    let temperature = cfg.model.temperature;
    let grads: Vec<ImageGrads> = fwds
        .par_iter()
        .enumerate()
        .map(|(i, f)| -> Result<ImageGrads> {
            let (g_rec, w_rec) = &recs[i];
            let mut g_recon = g_rec.clone();
            g_recon.scale(tl.d_rec * w_rec);
            let (decoder, d_zhat) = model.decoder.backward(&f.decoder_cache, &g_recon)?;

            let (c, w_c) = &commits[i];
            // Straight-through: the decoder's gradient on Zq is copied onto Z.
            let mut d_z = d_zhat;
            let mut enc_side = c.grad_input.clone();
            enc_side.scale(tl.d_commit * w_c);
            d_z.add_assign(&enc_side)?;
            let (encoder, _) = model.encoder.backward(&f.encoder_cache, &d_z)?;

            let mut cb_side = c.grad_quantized.clone();
            cb_side.scale(tl.d_commit * w_c);
            let codebook = quantize_backward(&f.z, &model.codebook, &f.quantized.alloc, &cb_side, temperature)?.codebook;

            let allocator = match &dpa_grad {
                Some(g) => {
                    let rows = f.z.rows();
                    let g_r: Vec<f64> = g[offsets[i]..offsets[i] + rows].iter().map(|x| x * tl.d_dpa).collect();
                    Some(allocator_backward(&f.allocator_cache, &model.allocator, &g_r)?.0)
                }
                None => None,
            };
            Ok(ImageGrads { encoder, decoder, allocator, codebook })
        })
        .collect::<Result<_>>()?;

    // Ordered reduction keeps the sum independent of thread scheduling.
    let mut g_enc = model.encoder.zero_grads();
    let mut g_dec = model.decoder.zero_grads();
    let mut g_alloc = model.allocator.zero_grads();
    let mut g_cb = model.codebook.zero_grads();
    for g in &grads {
        g_enc.add_assign(&g.encoder)?;
        g_dec.add_assign(&g.decoder)?;
        if let Some(a) = &g.allocator {
            g_alloc.add_assign(a);
        }
        for (acc, b) in g_cb.iter_mut().zip(&g.codebook) {
            acc.add_assign(b)?;
        }
    }
    if let Some(mut g) = dqp_grad {
        g.scale(tl.d_dqp);
        model.codebook.accumulate_centroid_grad(&g, &mut g_cb)?;
    }

    let m = cfg.model.num_subcodebooks;
    let v = cfg.model.codebook_size;
    let mut usage = vec![vec![0u64; v]; m];
    for f in &fwds {
        for (acc, u) in usage.iter_mut().zip(f.quantized.alloc.usage(m, v)) {
            acc.iter_mut().zip(u).for_each(|(a, b)| *a += b);
        }
    }
    let perplexity = usage.iter().map(|u| codebook_perplexity(u)).sum::<Result<f64>>()? / m as f64;

    let opt = &mut state.optimizer;
    opt.lr = cfg.learning_rate;
    opt.begin_step();
    let model = &mut state.model;
    model.encoder.apply_grads(&g_enc, opt, ENCODER_SLOTS)?;
    model.decoder.apply_grads(&g_dec, opt, DECODER_SLOTS)?;
    if ph == Phase::Active {
        model.allocator.apply_grads(&g_alloc, opt, ALLOCATOR_SLOTS)?;
    }
    model.codebook.apply_grads(&g_cb, opt, CODEBOOK_SLOTS)?;
    model.codebook.record_usage(&usage)?;
    if !model.is_finite() {
        return Err(dump_state(state, cfg, format!("non-finite parameters after step {}", state.step)));
    }

    let (mean_count, std_count) = mean_std(counts.iter().map(|&c| c as f64));
    let metrics = StepMetrics {
        step: state.step,
        loss_total: tl.total,
        loss_rec: comps.rec,
        loss_commit: comps.commit,
        loss_dqp: comps.dqp,
        loss_dpa: comps.dpa,
        mean_count,
        std_count,
        mean_r: mean_std(ratios.0.iter().copied()).0,
        mean_rstar: mean_std(rstar.0.iter().copied()).0,
        perplexity,
    };
    let trace = StepTrace { step: state.step, phase: ph, ratio_target: rstar, ratios, counts };
    state.step += 1;
    Ok((metrics, trace))
}

/// Writes the failing state next to the configured checkpoint and returns
/// the error to report.
fn dump_state(state: &TrainState, cfg: &TrainConfig, message: String) -> Error {
    let Some(path) = &cfg.checkpoint_path else {
        return Error::Numerical(message);
    };
    let dump = path.with_extension("failed.ckpt");
    match state.checkpoint().save(&dump) {
        Ok(()) => Error::Numerical(format!("{message}; state dumped to {}", dump.display())),
        Err(e) => Error::Numerical(format!("{message}; state dump failed: {e}")),
    }
}

/// Builds the configured dataset and its train/val split.
pub fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let ds = match &cfg.data {
        DataSource::Synthetic => gen_synthetic(cfg.n_images, cfg.image_size, cfg.model.patch, cfg.mix, cfg.seed)?,
        DataSource::Manifest(p) => read_manifest(p, cfg.model.patch)?,
    };
    split(&ds, cfg.train_frac, cfg.seed)
}

/// Image indices for `step`; derived from `(seed, step)` only, so a resumed
/// run draws the same batches.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = step_stream(seed, step);
    index::sample(&mut rng, n, batch_size.min(n)).into_vec()
}

/// Path of the checkpoint written at the warm-up boundary.
pub fn warmup_checkpoint_path(path: &Path) -> PathBuf {
    path.with_extension("warmup.ckpt")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

pub type Observer<'a> = &'a mut dyn FnMut(&StepMetrics, &StepTrace);

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if workers == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(f)
}

struct MetricsSink {
    out: Option<(PathBuf, BufWriter<File>)>,
}

impl MetricsSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self { out: None });
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut sink = Self { out: Some((path.to_path_buf(), BufWriter::new(f))) };
        sink.line(METRICS_HEADER)?;
        Ok(sink)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        if let Some((path, w)) = &mut self.out {
            writeln!(w, "{s}").map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some((path, mut w)) = self.out {
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Trains from `state` until `cfg.total_steps`, writing metrics and checkpoints.
pub fn train_from(
    mut state: TrainState,
    cfg: &TrainConfig,
    train: &Dataset,
    mut observer: Option<Observer>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if state.step > cfg.total_steps {
        return Err(Error::Config(format!(
            "checkpoint step {} is past total_steps {}",
            state.step, cfg.total_steps
        )));
    }
    let mut sink = MetricsSink::open(cfg.metrics_path.as_deref())?;
    let boundary = cfg.warmup_steps();
    let mut metrics = Vec::new();
    let workers = cfg.workers;
    while state.step < cfg.total_steps {
        let idx = batch_indices(cfg.seed, state.step, train.len(), cfg.batch_size);
        let batch: Vec<&Image> = idx.iter().map(|&i| &train.items[i].image).collect();
        let (m, trace) = in_pool(workers, || train_step(&mut state, &batch, cfg))?;
        sink.line(&m.csv_row())?;
        if let Some(obs) = observer.as_mut() {
            obs(&m, &trace);
        }
        metrics.push(m);
        if state.step == boundary && boundary > 0 {
            if let Some(p) = &cfg.checkpoint_path {
                state.checkpoint().save(warmup_checkpoint_path(p))?;
            }
        }
    }
    sink.finish()?;
    if let Some(p) = &cfg.checkpoint_path {
        state.checkpoint().save(p)?;
    }
    Ok(TrainOutcome { state, metrics })
}

/// Fresh run: builds data and model from the config alone.
pub fn run_training(cfg: &TrainConfig, observer: Option<Observer>) -> Result<TrainOutcome> {
    let (train, _) = load_data(cfg)?;
    train_from(TrainState::new(cfg)?, cfg, &train, observer)
}

/// Continues a run from a checkpoint written by [`run_training`]. The
/// metrics file is rewritten starting at the checkpoint's step.
pub fn resume(cfg: &TrainConfig, checkpoint: &Path, observer: Option<Observer>) -> Result<TrainOutcome> {
    let state = TrainState::from_checkpoint(Checkpoint::load(checkpoint)?)?;
    if state.model.config != cfg.model {
        return Err(Error::Config(format!(
            "{}: model config differs from the training config",
            checkpoint.display()
        )));
    }
    let (train, _) = load_data(cfg)?;
    train_from(state, cfg, &train, observer)
}
