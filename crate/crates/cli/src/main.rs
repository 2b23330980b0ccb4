use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use zigzag_cli::run::Subject;
use zigzag_cli::{compare, needle, profile, ExperimentConfig, MetricToggles, NeedleSpec, Source};
use zigzag_core::trace_io::{self, TraceFile};
use zigzag_core::{PolicyConfig, PolicyKind};

#[derive(Parser)]
#[command(name = "zigzag", version, about = "KV-cache compression policy simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer LMBA (and LMBO for toy models).
    Profile(ExperimentArgs),
    /// Sweep policies x budgets x seeds and rank them by loss.
    Compare(ExperimentArgs),
    /// Needle retention over needle position x sequence length.
    Needle(NeedleArgs),
    /// Write an attention trace file from a synthetic spec or a toy prefill.
    GenTrace(GenTraceArgs),
    /// Check a trace file and list every problem found.
    ValidateTrace { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceKind {
    Toy,
    Synth,
    Trace,
}

#[derive(Args, Clone)]
struct SourceArgs {
    #[arg(long, value_enum, default_value = "toy")]
    source: SourceKind,
    /// Trace file for `--source trace`.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    head_dim: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    /// Prompt length for toy models and synthetic traces.
    #[arg(long, default_value_t = 64)]
    len: usize,
    /// Scale applied to toy query/key projections.
    #[arg(long, default_value_t = 1.0)]
    sharpen: f64,
    /// Per-layer concentration for synthetic traces (one value per layer;
    /// defaults to a ramp from 1 to `len`).
    #[arg(long, value_delimiter = ',')]
    kappa: Vec<f64>,
    #[arg(long, default_value_t = 0.95)]
    hot_mass: f64,
    #[arg(long, default_value_t = 0.5)]
    jitter: f64,
    /// Needle positions planted in synthetic traces.
    #[arg(long, value_delimiter = ',')]
    needles: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    needle_mass: f64,
    #[arg(long, default_value_t = 8)]
    window: usize,
}

impl SourceArgs {
    fn source(&self) -> Result<Source> {
        Ok(match self.source {
            SourceKind::Toy => Source::Toy {
                num_layers: self.layers,
                num_heads: self.heads,
                head_dim: self.head_dim,
                vocab_size: self.vocab,
                len: self.len,
                sharpen: self.sharpen,
            },
            SourceKind::Synth => {
                let concentration = if self.kappa.is_empty() {
                    let steps = self.layers.max(2) - 1;
                    (0..self.layers)
                        .map(|l| 1.0 + (self.len as f64 - 1.0) * l as f64 / steps as f64)
                        .collect()
                } else {
                    self.kappa.clone()
                };
                Source::Synth {
                    num_heads: self.heads,
                    len: self.len,
                    concentration,
                    hot_mass: self.hot_mass,
                    jitter: self.jitter,
                    needles: self.needles.clone(),
                    needle_mass: self.needle_mass,
                }
            }
            SourceKind::Trace => match &self.trace {
                Some(path) => Source::Trace { path: path.clone() },
                None => bail!("--source trace needs --trace <path>"),
            },
        })
    }
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Full experiment config as JSON; other experiment flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    /// Policies, e.g. `snapkv,zigzag,zigzag:0` (`:N` sets B_bound).
    #[arg(long, value_delimiter = ',', default_value = "zigzag")]
    policy: Vec<String>,
    /// Mean per-layer budgets.
    #[arg(long, value_delimiter = ',', default_value = "16")]
    budget: Vec<usize>,
    /// Per-layer floor for zigzag (default: half the budget).
    #[arg(long)]
    b_bound: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pool_kernel: usize,
    #[arg(long, default_value_t = 4)]
    sink_count: usize,
    #[arg(long, default_value_t = 0.5)]
    recent_fraction: f64,
    #[arg(long, default_value_t = 0.125)]
    pyramid_min_ratio: f64,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Skip LMBO even when the source has a model.
    #[arg(long, conflicts_with = "lmbo")]
    no_lmbo: bool,
    /// Require LMBO (fails on sources without a model).
    #[arg(long)]
    lmbo: bool,
    #[arg(long)]
    no_output_loss: bool,
    /// Output directory (overrides the config file's).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExperimentArgs {
    fn policy(&self, spec: &str) -> Result<PolicyConfig> {
        let (name, bound) = match spec.split_once(':') {
            Some((n, b)) => (n, Some(b.parse::<usize>().with_context(|| format!("bad B_bound in {spec:?}"))?)),
            None => (spec, None),
        };
        let kind: PolicyKind = name.trim().parse()?;
        if bound.is_some() && kind != PolicyKind::ZigZagKV {
            bail!("only zigzag takes a B_bound suffix: {spec:?}");
        }
        Ok(PolicyConfig {
            kind,
            window: self.source.window,
            sink_count: self.sink_count,
            recent_fraction: self.recent_fraction,
            pool_kernel: self.pool_kernel,
            pyramid_min_ratio: self.pyramid_min_ratio,
            b_bound: bound.or(self.b_bound),
        })
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig {
                source: self.source.source()?,
                policies: self.policy.iter().map(|p| self.policy(p)).collect::<Result<_>>()?,
                budgets: self.budget.clone(),
                seeds: self.seed.clone(),
                output_dir: PathBuf::from("zigzag-out"),
                window: self.source.window,
                epsilon: self.epsilon,
                metrics: MetricToggles {
                    output_loss: !self.no_output_loss,
                    lmbo: if self.no_lmbo {
                        Some(false)
                    } else if self.lmbo {
                        Some(true)
                    } else {
                        None
                    },
                    ..MetricToggles::default()
                },
                needle: None,
            },
        };
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        Ok(config)
    }
}

#[derive(Args, Clone)]
struct NeedleArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Needle positions (rows of the retention matrix).
    #[arg(long, value_delimiter = ',')]
    needle_pos: Vec<usize>,
    /// Sequence lengths (columns of the retention matrix).
    #[arg(long, value_delimiter = ',')]
    needle_len: Vec<usize>,
}

#[derive(Args, Clone)]
struct GenTraceArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output trace file.
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Profile(args) => {
            let config = args.config()?;
            let reports = profile(&config)?;
            println!(
                "profiled {} seed(s); wrote {}",
                reports.len(),
                config.output_dir.join("profile.csv").display()
            );
        }
        Command::Compare(args) => {
            let config = args.config()?;
            let result = compare(&config)?;
            println!(
                "{} cell(s) done, {} skipped; wrote {}",
                result.summary.len(),
                result.skipped.len(),
                config.output_dir.join("summary.csv").display()
            );
        }
        Command::Needle(args) => {
            let mut config = args.experiment.config()?;
            if config.needle.is_none() {
                if args.needle_pos.is_empty() || args.needle_len.is_empty() {
                    bail!("needle runs need --needle-pos and --needle-len");
                }
                config.needle = Some(NeedleSpec {
                    positions: args.needle_pos.clone(),
                    lengths: args.needle_len.clone(),
                });
            }
            let matrices = needle(&config)?;
            println!(
                "wrote {} retention matrices to {}",
                matrices.len(),
                config.output_dir.display()
            );
        }
        Command::GenTrace(args) => {
            let source = args.source.source()?;
            if matches!(source, Source::Trace { .. }) {
                bail!("gen-trace builds traces from toy or synth sources");
            }
            let subject = Subject::prepare(&source, args.seed, args.source.window)?;
            let file = TraceFile::from_trace(subject.trace);
            trace_io::save_trace(&file, &args.out)?;
            println!("wrote {} (checksum {:016x})", args.out.display(), file.checksum());
        }
        Command::ValidateTrace { path } => {
            let diagnostics = trace_io::validate_trace(&path)?;
            if diagnostics.is_empty() {
                println!("{}: ok", path.display());
            } else {
                for d in &diagnostics {
                    eprintln!("{}: {d}", path.display());
                }
                bail!("{} problem(s) in {}", diagnostics.len(), path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
