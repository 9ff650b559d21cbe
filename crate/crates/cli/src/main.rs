use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use bitdiff::archive;
use bitdiff::config::{RunConfig, SEED_ENV};
use bitdiff::data::Dataset;
use bitdiff::error::{CliError, Result};
use bitdiff::sample::{sample, SampleOptions};
use bitdiff::train::{load_model, stream_rng, train};
use bitdiff_core::bitkernel::{bench_conv, BenchShape};
use bitdiff_core::diffusion::make_schedule;

/// Reference sets for `eval` come from this stream of the eval seed.
const EVAL_STREAM: u64 = 1 << 50;

#[derive(Parser)]
#[command(name = "bitdiff", version, about = "Fully binarized diffusion models on toy data")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML config file with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=3e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
            None => None,
        };
        let env = std::env::var(SEED_ENV).ok();
        RunConfig::load(text.as_deref(), &self.set, env.as_deref())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and metrics.jsonl under out.dir.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// DDIM-sample a checkpoint into a BDSM archive.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        /// Archive path (default: <out.dir>/samples.bdsm).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a PGM grid of the first 64 samples.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Compare a sample archive with a fresh reference set.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        /// Reference generator (default: inferred from the sample shape).
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time dense vs. packed binary convolution.
    Bench {
        #[arg(long, default_value_t = 448)]
        c: usize,
        #[arg(long, default_value_t = 32)]
        h: usize,
        #[arg(long, default_value_t = 32)]
        w: usize,
        #[arg(long, default_value_t = 448)]
        m: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 1)]
        padding: usize,
        #[arg(long, default_value_t = 10)]
        repetitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Operation and storage accounting for an architecture file or a config.
    Analyze {
        #[arg(long, conflicts_with_all = ["config", "set"])]
        arch: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a dataset sample set as a BDSM archive.
    GenData {
        #[arg(long, default_value = "sprites16")]
        dataset: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
}

fn parse_dataset(s: &str) -> Result<Dataset> {
    Dataset::parse(s).ok_or_else(|| CliError::Usage(format!("unknown dataset {s:?}")))
}

fn write_pgm(path: &Path, samples: &bitdiff_core::Tensor) -> Result<()> {
    std::fs::write(path, archive::pgm_grid(samples, 64)?).map_err(|e| CliError::io(path, e))
}

fn run(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::Train { cfg, resume } => {
            let cfg = cfg.load()?;
            Ok(serde_json::to_value(train(&cfg, resume.as_deref())?)?)
        }
        Command::Sample { cfg: cargs, checkpoint, n, steps, eta, out, pgm } => {
            let cfg = cargs.load()?;
            let model = load_model(&checkpoint)?;
            if cargs.config.is_some() || !cargs.set.is_empty() {
                let want = cfg.unet_spec();
                if model.spec != want {
                    return Err(CliError::Core(bitdiff_core::Error::Checkpoint(format!(
                        "{} does not match the configured architecture",
                        checkpoint.display()
                    ))));
                }
            }
            let s = &cfg.schedule;
            let sched = make_schedule(s.timesteps, s.kind, s.beta_start, s.beta_end)?;
            let opts = SampleOptions {
                n: n.unwrap_or(cfg.sample.n),
                steps: steps.unwrap_or(cfg.sample.steps),
                eta: eta.unwrap_or(cfg.sample.eta),
                batch: cfg.sample.batch,
                seed: cfg.seed,
            };
            let (samples, summary) = sample(&model, &sched, opts)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("samples.bdsm"));
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            archive::write(&out, &samples)?;
            if let Some(p) = &pgm {
                write_pgm(p, &samples)?;
            }
            Ok(json!({ "archive": out, "summary": summary }))
        }
        Command::Eval { samples, dataset, seed } => {
            let x = archive::read(&samples)?;
            let ds = match dataset {
                Some(s) => parse_dataset(&s)?,
                None => Dataset::from_shape(&x.shape()[1..])
                    .ok_or_else(|| CliError::Usage(format!("no dataset produces samples of shape {:?}", &x.shape()[1..])))?,
            };
            if x.shape()[1..] != ds.sample_shape() {
                return Err(CliError::Usage(format!(
                    "samples have shape {:?}, {} produces {:?}",
                    &x.shape()[1..],
                    ds.name(),
                    ds.sample_shape()
                )));
            }
            let reference = ds.batch(x.dim(0), &mut stream_rng(seed, EVAL_STREAM));
            Ok(json!({ "dataset": ds, "report": bitdiff::eval::evaluate(&x, &reference)? }))
        }
        Command::Bench { c, h, w, m, k, stride, padding, repetitions, seed } => {
            let shape = BenchShape { c, h, w, m, k, stride, padding };
            Ok(serde_json::to_value(bench_conv(shape, repetitions, seed)?)?)
        }
        Command::Analyze { arch, cfg } => {
            let report = match arch {
                Some(p) => bitdiff::analyze::analyze_file(&p)?,
                None => bitdiff::analyze::analyze_config(&cfg.load()?)?,
            };
            Ok(serde_json::to_value(report)?)
        }
        Command::GenData { dataset, n, seed, out, pgm } => {
            let ds = parse_dataset(&dataset)?;
            if n == 0 {
                return Err(CliError::Usage("n must be positive".into()));
            }
            let seed = match seed {
                Some(s) => s,
                None => match std::env::var(SEED_ENV) {
                    Ok(s) => s.trim().parse().map_err(|_| CliError::config(SEED_ENV, format!("not an unsigned integer: {s:?}")))?,
                    Err(_) => 0,
                },
            };
            let x = ds.batch(n, &mut stream_rng(seed, EVAL_STREAM + 1));
            archive::write(&out, &x)?;
            if let Some(p) = &pgm {
                write_pgm(p, &x)?;
            }
            Ok(json!({ "dataset": ds, "n": n, "seed": seed, "archive": out }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).record());
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(v) => {
            let _ = writeln!(std::io::stdout().lock(), "{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
