use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use cddvt::ablation::{ablate_diversity, ablate_topk, ablate_warmup, write_rows, AblationRow};
use cddvt::checkpoint::Checkpoint;
use cddvt::config::{apply_overrides, describe_keys, parse_config, CliConfig};
use cddvt::data::{load_raster, save_raster};
use cddvt::error::{Error, Result};
use cddvt::eval::{sweep, write_report};
use cddvt::gradsuite::{format_table, run_suite};
use cddvt::metrics::{allocation_heatmap, centroid_similarity_matrix, write_matrix_csv};
use cddvt::model::{AllocationPolicy, ModelConfig, Tokenizer};
use cddvt::quantizer::QuantizeMode;
use cddvt::trainer::{load_data, resume, run_training};

#[derive(Parser)]
#[command(name = "cddvt", version, about = "Adaptive multi-primitive image tokenizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes the checkpoint and per-step metrics CSV.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split (rate-distortion report CSV).
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report CSV; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write the centroid cosine-similarity matrix here.
        #[arg(long)]
        centroids: Option<PathBuf>,
    },
    /// Reconstruct a PGM image through a checkpoint.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// adaptive | top1 | fixed:N; defaults to the checkpoint's policy.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Write the per-patch allocation counts of an image as a PGM heatmap.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the finite-difference gradient suite and print a pass/fail table.
    Gradcheck,
    /// Train with and without warm-up and compare.
    AblateWarmup(AblateArgs),
    /// Compare Top-1, fixed Top-n and adaptive allocation (plus pool sizes).
    AblateTopk(AblateArgs),
    /// Compare lambda_dqp = 0 and 0.25.
    AblateDiversity(AblateArgs),
}

#[derive(clap::Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comparison CSV; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Keep each arm's checkpoint and metrics in this directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn load_config(args: &ConfigArgs) -> Result<CliConfig> {
    let base = match &args.config {
        Some(p) => parse_config(p)?,
        None => CliConfig::default(),
    };
    apply_overrides(&base, &args.overrides)
}

fn with_sink(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut w = BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?);
            f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(p, e))
        }
        None => f(&mut io::stdout().lock()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn load_model(path: &Path) -> Result<Tokenizer> {
    Ok(Checkpoint::load(path)?.model)
}

fn mode_for(config: &ModelConfig, mode: Option<&str>) -> Result<QuantizeMode> {
    let Some(m) = mode else {
        return Ok(config.active_mode());
    };
    let policy = AllocationPolicy::parse(m).ok_or_else(|| Error::Argument(format!("unknown mode `{m}`")))?;
    let mode = ModelConfig { policy, ..config.clone() }.active_mode();
    mode.validate(config.codebook_size)?;
    Ok(mode)
}

fn write_ablation(rows: Vec<AblationRow>, args: &AblateArgs) -> Result<()> {
    with_sink(args.output.as_deref(), |w| write_rows(&rows, w))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { cfg, resume: from } => {
            let cfg = load_config(&cfg)?.train;
            let out = match from {
                Some(ck) => resume(&cfg, &ck, None)?,
                None => run_training(&cfg, None)?,
            };
            if let Some(last) = out.metrics.last() {
                eprintln!("step {} loss {} rec {}", last.step, last.loss_total, last.loss_rec);
            }
            Ok(())
        }
        Command::Eval { cfg, checkpoint, output, centroids } => {
            let cli = load_config(&cfg)?;
            let model = load_model(&checkpoint)?;
            let mut train_cfg = cli.train;
            train_cfg.model = model.config.clone();
            let (_, val) = load_data(&train_cfg)?;
            let reports = sweep(&model, &val, &cli.forced_ns)?;
            with_sink(output.as_deref(), |w| write_report(&reports, w))?;
            if let Some(p) = centroids {
                let m = centroid_similarity_matrix(&model.codebook);
                with_sink(Some(&p), |w| write_matrix_csv(&m, w))?;
            }
            Ok(())
        }
        Command::Reconstruct { checkpoint, input, output, mode } => {
            let model = load_model(&checkpoint)?;
            let img = load_raster(&input)?;
            let (recon, _) = model.reconstruct(&img, mode_for(&model.config, mode.as_deref())?)?;
            save_raster(&recon, &output)
        }
        Command::Heatmap { checkpoint, input, output } => {
            let model = load_model(&checkpoint)?;
            let img = load_raster(&input)?;
            let (_, fwd) = model.reconstruct(&img, model.config.active_mode())?;
            let p = model.config.patch;
            let grid = allocation_heatmap(&fwd.quantized.alloc, img.height / p, img.width / p, model.config.max_count)?;
            let bytes = grid.to_pgm()?;
            fs::write(&output, bytes).map_err(|e| Error::io(&output, e))
        }
        Command::Gradcheck => {
            let rows = run_suite()?;
            print!("{}", format_table(&rows));
            let failed = rows.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::Numerical(format!("{failed} gradient checks failed")));
            }
            Ok(())
        }
        Command::AblateWarmup(a) => {
            let cfg = load_config(&a.cfg)?.train;
            write_ablation(ablate_warmup(&cfg, a.out_dir.as_deref())?, &a)
        }
        Command::AblateTopk(a) => {
            let cli = load_config(&a.cfg)?;
            write_ablation(ablate_topk(&cli.train, cli.fixed_n, &cli.pool_sizes, a.out_dir.as_deref())?, &a)
        }
        Command::AblateDiversity(a) => {
            let cfg = load_config(&a.cfg)?.train;
            write_ablation(ablate_diversity(&cfg, a.out_dir.as_deref())?, &a)
        }
    }
}

fn main() -> ExitCode {
    let cmd = Cli::command().after_help(describe_keys());
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
