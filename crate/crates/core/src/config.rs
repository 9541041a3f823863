//! Plain-text run configuration.
//!
//! One `key = value` pair per line; `#` starts a comment. Unknown and
//! repeated keys are rejected, every value is type-checked, and anything not
//! mentioned keeps its default (see [`KEYS`]).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Mix;
use crate::error::{Error, Result};
use crate::model::{AllocationPolicy, ModelConfig};
use crate::trainer::{DataSource, TrainConfig};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("patch", "patch edge length in pixels"),
    ("channels", "image channels (1 = grayscale, 3 = RGB)"),
    ("embed_dim", "latent width D"),
    ("hidden_dim", "hidden width of encoder and decoder"),
    ("num_subcodebooks", "sub-codebook count M (D must be divisible by M)"),
    ("codebook_size", "primitives per sub-codebook V'"),
    ("allocator_hidden", "allocator hidden channels (default D/2)"),
    ("allocator_kernel", "allocator kernel width (odd)"),
    ("K", "maximum primitives per chunk in adaptive mode"),
    ("K_pool", "candidate pool size (raised to the mode's maximum count)"),
    ("temperature", "softmax temperature for primitive weights"),
    ("beta", "encoder-side commitment weight"),
    ("policy", "allocation after warm-up: adaptive | top1 | fixed:N"),
    ("total_steps", "training steps"),
    ("warmup_fraction", "leading fraction of steps quantized Top-1 with DQP/DPA off, in [0, 1)"),
    ("batch_size", "images per step"),
    ("learning_rate", "Adam learning rate"),
    ("lambda_rec", "reconstruction loss weight"),
    ("lambda_dqp", "centroid diversity loss weight"),
    ("lambda_dpa", "allocation ratio loss weight"),
    ("seed", "run seed; data, init and training streams derive from it"),
    ("data", "`synthetic` or a path to a dataset manifest"),
    ("n_images", "synthetic images to generate"),
    ("image_size", "synthetic image edge length"),
    ("mix", "synthetic flat,smooth,texture,noise fractions"),
    ("train_frac", "fraction of images used for training, in (0, 1)"),
    ("checkpoint_path", "final checkpoint path (a .warmup twin is written at the warm-up boundary)"),
    ("metrics_path", "per-step metrics CSV path"),
    ("workers", "worker threads for per-image work (0 = all cores)"),
    ("forced_ns", "eval: comma-separated fixed counts for the rate-distortion sweep"),
    ("pool_sizes", "ablate-topk: extra adaptive runs with these K_pool values"),
    ("fixed_n", "ablate-topk: count of the fixed Top-n baseline"),
];

const MODEL_KEYS: &[&str] = &[
    "patch",
    "channels",
    "embed_dim",
    "hidden_dim",
    "num_subcodebooks",
    "codebook_size",
    "allocator_hidden",
    "allocator_kernel",
    "K",
    "K_pool",
    "temperature",
    "beta",
    "policy",
];

/// Training config plus command-specific options.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub forced_ns: Vec<usize>,
    pub pool_sizes: Vec<usize>,
    pub fixed_n: usize,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            forced_ns: vec![1, 2, 4, 8, 10, 16],
            pool_sizes: Vec::new(),
            fixed_n: 10,
        }
    }
}

fn count(v: &str) -> std::result::Result<usize, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got `{v}`"))
}

fn positive(v: &str) -> std::result::Result<usize, String> {
    match count(v)? {
        0 => Err("must be at least 1".into()),
        n => Ok(n),
    }
}

fn real(v: &str) -> std::result::Result<f64, String> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| format!("expected a finite real number, got `{v}`"))
}

fn non_negative(v: &str) -> std::result::Result<f64, String> {
    let x = real(v)?;
    if x < 0.0 {
        return Err(format!("must be non-negative, got {x}"));
    }
    Ok(x)
}

fn list<T>(v: &str, item: fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(item).collect()
}

fn set_model(m: &mut ModelConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    match key {
        "patch" => m.patch = positive(v)?,
        "channels" => {
            m.channels = positive(v)?;
            if m.channels != 1 && m.channels != 3 {
                return Err("must be 1 or 3".into());
            }
        }
        "embed_dim" => m.embed_dim = positive(v)?,
        "hidden_dim" => m.hidden_dim = positive(v)?,
        "num_subcodebooks" => m.num_subcodebooks = positive(v)?,
        "codebook_size" => m.codebook_size = positive(v)?,
        "allocator_hidden" => m.allocator_hidden = positive(v)?,
        "allocator_kernel" => {
            m.allocator_kernel = positive(v)?;
            if m.allocator_kernel.is_multiple_of(2) {
                return Err("must be odd".into());
            }
        }
        "K" => m.max_count = positive(v)?,
        "K_pool" => m.k_pool = positive(v)?,
        "temperature" => {
            m.temperature = real(v)?;
            if m.temperature <= 0.0 {
                return Err("must be positive".into());
            }
        }
        "beta" => m.beta = non_negative(v)?,
        "policy" => {
            m.policy = AllocationPolicy::parse(v).ok_or_else(|| format!("expected adaptive, top1 or fixed:N, got `{v}`"))?
        }
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

fn set(cfg: &mut CliConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let t = &mut cfg.train;
    match key {
        k if MODEL_KEYS.contains(&k) => set_model(&mut t.model, k, v)?,
        "total_steps" => t.total_steps = count(v)? as u64,
        "warmup_fraction" => {
            t.warmup_fraction = real(v)?;
            if !(0.0..1.0).contains(&t.warmup_fraction) {
                return Err("must lie in [0, 1)".into());
            }
        }
        "batch_size" => t.batch_size = positive(v)?,
        "learning_rate" => t.learning_rate = non_negative(v)?,
        "lambda_rec" => t.lambda_rec = non_negative(v)?,
        "lambda_dqp" => t.lambda_dqp = non_negative(v)?,
        "lambda_dpa" => t.lambda_dpa = non_negative(v)?,
        "seed" => t.seed = v.parse().map_err(|_| format!("expected an unsigned 64-bit integer, got `{v}`"))?,
        "data" => {
            t.data = match v {
                "synthetic" => DataSource::Synthetic,
                "" => return Err("empty data source".into()),
                path => DataSource::Manifest(PathBuf::from(path)),
            }
        }
        "n_images" => t.n_images = positive(v)?,
        "image_size" => t.image_size = positive(v)?,
        "mix" => {
            let fr = list(v, real)?;
            let arr: [f64; 4] = fr.try_into().map_err(|_| "expected four comma-separated fractions".to_string())?;
            let mix = Mix(arr);
            mix.validate().map_err(|e| e.to_string())?;
            t.mix = mix;
        }
        "train_frac" => {
            t.train_frac = real(v)?;
            if !(t.train_frac > 0.0 && t.train_frac < 1.0) {
                return Err("must lie in (0, 1)".into());
            }
        }
        "checkpoint_path" => t.checkpoint_path = Some(PathBuf::from(v)),
        "metrics_path" => t.metrics_path = Some(PathBuf::from(v)),
        "workers" => t.workers = count(v)?,
        "forced_ns" => cfg.forced_ns = list(v, positive)?,
        "pool_sizes" => cfg.pool_sizes = list(v, positive)?,
        "fixed_n" => cfg.fixed_n = positive(v)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

fn entries<'a>(text: &'a str, origin: &str) -> Result<Vec<Entry<'a>>> {
    let mut out: Vec<Entry> = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |key: &str, message: String| Error::ConfigKey {
            path: origin.to_string(),
            line: i + 1,
            key: key.to_string(),
            message,
        };
        let (key, value) = line.split_once('=').ok_or_else(|| err(line, "expected `key = value`".into()))?;
        let (key, value) = (key.trim(), value.trim());
        if let Some(first) = seen.insert(key, i + 1) {
            return Err(err(key, format!("repeated (first set on line {first})")));
        }
        out.push(Entry { line: i + 1, key, value });
    }
    Ok(out)
}

/// Parses config text; `origin` names the source in error messages.
pub fn parse_config_str(text: &str, origin: &str) -> Result<CliConfig> {
    let mut cfg = CliConfig::default();
    let entries = entries(text, origin)?;
    for e in &entries {
        set(&mut cfg, e.key, e.value).map_err(|message| Error::ConfigKey {
            path: origin.to_string(),
            line: e.line,
            key: e.key.to_string(),
            message,
        })?;
    }
    if !entries.iter().any(|e| e.key == "allocator_hidden") {
        cfg.train.model.allocator_hidden = (cfg.train.model.embed_dim / 2).max(1);
    }
    cfg.train.validate().map_err(|e| match e {
        Error::Config(message) => {
            // Attribute cross-field failures to the first key the message names.
            let blame = entries.iter().find(|en| message.contains(en.key));
            Error::ConfigKey {
                path: origin.to_string(),
                line: blame.map_or(0, |en| en.line),
                key: blame.map_or("<config>", |en| en.key).to_string(),
                message,
            }
        }
        other => other,
    })?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<CliConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, &path.display().to_string())
}

/// Applies `key=value` overrides (e.g. from the command line) on top of a
/// config, re-running validation.
pub fn apply_overrides(cfg: &CliConfig, overrides: &[String]) -> Result<CliConfig> {
    let mut out = cfg.clone();
    for (i, o) in overrides.iter().enumerate() {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::ConfigKey {
            path: "--set".into(),
            line: i + 1,
            key: o.clone(),
            message: "expected key=value".into(),
        })?;
        set(&mut out, k.trim(), v.trim()).map_err(|message| Error::ConfigKey {
            path: "--set".into(),
            line: i + 1,
            key: k.trim().to_string(),
            message,
        })?;
    }
    out.train.validate()?;
    Ok(out)
}

/// Serializes the model keys as config text.
pub fn model_config_text(m: &ModelConfig) -> String {
    format!(
        "patch = {}\nchannels = {}\nembed_dim = {}\nhidden_dim = {}\nnum_subcodebooks = {}\ncodebook_size = {}\n\
         allocator_hidden = {}\nallocator_kernel = {}\nK = {}\nK_pool = {}\ntemperature = {}\nbeta = {}\npolicy = {}\n",
        m.patch,
        m.channels,
        m.embed_dim,
        m.hidden_dim,
        m.num_subcodebooks,
        m.codebook_size,
        m.allocator_hidden,
        m.allocator_kernel,
        m.max_count,
        m.k_pool,
        m.temperature,
        m.beta,
        m.policy
    )
}

/// Parses text produced by [`model_config_text`]; only model keys are allowed.
pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    for e in entries(text, "<model config>")? {
        if !MODEL_KEYS.contains(&e.key) {
            return Err(Error::ConfigKey {
                path: "<model config>".into(),
                line: e.line,
                key: e.key.into(),
                message: "not a model key".into(),
            });
        }
        set_model(&mut m, e.key, e.value).map_err(|message| Error::ConfigKey {
            path: "<model config>".into(),
            line: e.line,
            key: e.key.into(),
            message,
        })?;
    }
    m.validate()?;
    Ok(m)
}

/// Key reference with current defaults, for `--help`.
pub fn describe_keys() -> String {
    let d = CliConfig::default();
    let t = &d.train;
    let m = &t.model;
    let opt = |p: &Option<PathBuf>| p.as_ref().map_or("(none)".to_string(), |p| p.display().to_string());
    let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let defaults: HashMap<&str, String> = [
        ("patch", m.patch.to_string()),
        ("channels", m.channels.to_string()),
        ("embed_dim", m.embed_dim.to_string()),
        ("hidden_dim", m.hidden_dim.to_string()),
        ("num_subcodebooks", m.num_subcodebooks.to_string()),
        ("codebook_size", m.codebook_size.to_string()),
        ("allocator_hidden", m.allocator_hidden.to_string()),
        ("allocator_kernel", m.allocator_kernel.to_string()),
        ("K", m.max_count.to_string()),
        ("K_pool", m.k_pool.to_string()),
        ("temperature", m.temperature.to_string()),
        ("beta", m.beta.to_string()),
        ("policy", m.policy.to_string()),
        ("total_steps", t.total_steps.to_string()),
        ("warmup_fraction", t.warmup_fraction.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("learning_rate", t.learning_rate.to_string()),
        ("lambda_rec", t.lambda_rec.to_string()),
        ("lambda_dqp", t.lambda_dqp.to_string()),
        ("lambda_dpa", t.lambda_dpa.to_string()),
        ("seed", t.seed.to_string()),
        ("data", "synthetic".to_string()),
        ("n_images", t.n_images.to_string()),
        ("image_size", t.image_size.to_string()),
        ("mix", t.mix.0.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")),
        ("train_frac", t.train_frac.to_string()),
        ("checkpoint_path", opt(&t.checkpoint_path)),
        ("metrics_path", opt(&t.metrics_path)),
        ("workers", t.workers.to_string()),
        ("forced_ns", join(&d.forced_ns)),
        ("pool_sizes", join(&d.pool_sizes)),
        ("fixed_n", d.fixed_n.to_string()),
    ]
    .into_iter()
    .collect();
    let mut out = String::from("Config keys (`key = value`, `#` comments):\n");
    for (k, desc) in KEYS {
        out.push_str(&format!("  {k:<18} {:<24} {desc}\n", defaults[k]));
    }
    out
}
