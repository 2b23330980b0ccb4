//! Experiment runners behind the `profile`, `compare` and `needle`
//! subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use zigzag_core::metrics::{self, MetricsReport, PerLayer, ReportMeta};
use zigzag_core::trace_io::{self, emit_report, generate_synth, ReportFormat};
use zigzag_core::{build_model, decide, AttentionTrace, Error, PolicyConfig, PolicyKind, Prefill, ToyModel};

use crate::config::{ExperimentConfig, Source};

pub const THREADS_ENV: &str = "ZIGZAG_THREADS";

/// Attention source materialized for one seed.
pub struct Subject {
    pub seed: u64,
    pub trace: AttentionTrace,
    pub model: Option<ModelRun>,
    pub needles: Vec<usize>,
}

pub struct ModelRun {
    pub model: ToyModel,
    pub tokens: Vec<usize>,
    pub prefill: Prefill,
}

impl Subject {
    pub fn prepare(source: &Source, seed: u64, window: usize) -> Result<Self> {
        match source {
            Source::Toy { len, vocab_size, sharpen, .. } => {
                let cfg = source.model_config(seed).expect("toy source");
                let mut model = build_model(&cfg)?;
                if *sharpen != 1.0 {
                    model.sharpen(*sharpen);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_70c3);
                let tokens: Vec<usize> = (0..*len).map(|_| rng.gen_range(0..*vocab_size)).collect();
                let prefill = model.prefill(&tokens, window)?;
                Ok(Self {
                    seed,
                    trace: prefill.trace(),
                    model: Some(ModelRun { model, tokens, prefill }),
                    needles: Vec::new(),
                })
            }
            Source::Synth { needles, .. } => {
                let spec = source.synth_spec(seed, window).expect("synth source");
                Ok(Self {
                    seed,
                    trace: generate_synth(&spec)?.trace,
                    model: None,
                    needles: needles.clone(),
                })
            }
            Source::Trace { path } => {
                let file = trace_io::load_trace(path).with_context(|| format!("loading {}", path.display()))?;
                Ok(Self {
                    seed,
                    trace: file.trace,
                    model: None,
                    needles: Vec::new(),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Done(Box<MetricsReport>),
    Skipped(String),
}

/// Errors that make a (policy, budget) pair infeasible rather than broken.
fn is_infeasible(e: &Error) -> bool {
    matches!(
        e,
        Error::Policy(_) | Error::Allocation(_) | Error::Window { .. }
    )
}

/// Evaluates one (policy, budget) cell on a prepared subject.
pub fn evaluate_cell(
    config: &ExperimentConfig,
    subject: &Subject,
    policy: &PolicyConfig,
    budget: usize,
) -> Result<CellOutcome> {
    let decision = match decide(policy, &subject.trace, budget) {
        Ok(d) => d,
        Err(e) if is_infeasible(&e) => return Ok(CellOutcome::Skipped(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let toggles = &config.metrics;
    let window = policy.window;
    let mut per_layer = PerLayer {
        budget: decision.layers.iter().map(|d| d.budget).collect(),
        ..PerLayer::default()
    };
    if toggles.lmba {
        per_layer.lmba = metrics::lmba_profile(&subject.trace, window, config.epsilon)?;
    }
    if toggles.attention_loss {
        let losses = metrics::attention_loss(&subject.trace, &decision, window)?;
        per_layer.attn_loss = losses.iter().map(|l| l.primary).collect();
        per_layer.attn_loss_secondary = losses.iter().map(|l| l.secondary).collect();
    }
    if let Some(run) = &subject.model {
        if toggles.output_loss {
            per_layer.out_loss = metrics::output_loss(&run.model, &run.tokens, &run.prefill, &decision)?;
        }
    }
    let needle = (!subject.needles.is_empty()).then(|| metrics::needle_retention(&decision, &subject.needles));
    let meta = ReportMeta {
        policy: policy.label(budget),
        budget,
        b_bound: (policy.kind == PolicyKind::ZigZagKV).then(|| policy.bound_for(budget)),
        seed: subject.seed,
        window,
        len: subject.trace.len(),
    };
    Ok(CellOutcome::Done(Box::new(MetricsReport::new(meta, per_layer, needle))))
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
        builder = builder.num_threads(n.max(1));
    }
    Ok(builder.build()?)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a ExperimentConfig,
}

pub fn write_manifest(config: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    let path = config.output_dir.join("manifest.json");
    let manifest = Manifest {
        tool: "zigzag",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub policy: String,
    pub budget: usize,
    pub b_bound: Option<usize>,
    pub seed: u64,
    pub mean_attn_loss: Option<f64>,
    pub mean_attn_loss_secondary: Option<f64>,
    pub max_attn_loss: Option<f64>,
    pub mean_out_loss: Option<f64>,
    pub needle_retention: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedRow {
    pub policy: String,
    pub budget: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareResult {
    pub reports: Vec<MetricsReport>,
    pub summary: Vec<SummaryRow>,
    pub skipped: Vec<SkippedRow>,
}

/// Runs every (policy, budget, seed) cell, writes one report per completed
/// cell, a ranked `summary.csv`, `skipped.csv` and the manifest.
pub fn compare(config: &ExperimentConfig) -> Result<CompareResult> {
    config.validate()?;
    write_manifest(config, "compare")?;
    let window = config.source_window();
    let pool = thread_pool()?;
    let subjects: Vec<Subject> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&s| Subject::prepare(&config.source, s, window))
            .collect::<Result<_>>()
    })?;

    let mut cells = Vec::new();
    for subject in &subjects {
        for policy in &config.policies {
            for &budget in &config.budgets {
                cells.push((subject, policy, budget));
            }
        }
    }
    let outcomes: Vec<(u64, String, usize, CellOutcome)> = pool.install(|| {
        cells
            .par_iter()
            .map(|(subject, policy, budget)| {
                let outcome = evaluate_cell(config, subject, policy, *budget)?;
                Ok((subject.seed, policy.label(*budget), *budget, outcome))
            })
            .collect::<Result<_>>()
    })?;

    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for (seed, label, budget, outcome) in outcomes {
        match outcome {
            CellOutcome::Done(report) => {
                let path = config.output_dir.join(format!("report-{label}-B{budget}-s{seed}.json"));
                emit_report(&report, ReportFormat::Json, &path)?;
                reports.push(*report);
            }
            CellOutcome::Skipped(reason) => skipped.push(SkippedRow {
                policy: label,
                budget,
                seed,
                reason,
            }),
        }
    }

    let mut summary: Vec<SummaryRow> = reports
        .iter()
        .map(|r| SummaryRow {
            policy: r.meta.policy.clone(),
            budget: r.meta.budget,
            b_bound: r.meta.b_bound,
            seed: r.meta.seed,
            mean_attn_loss: r.aggregate.mean_attn_loss,
            mean_attn_loss_secondary: r.aggregate.mean_attn_loss_secondary,
            max_attn_loss: r.aggregate.max_attn_loss,
            mean_out_loss: r.aggregate.mean_out_loss,
            needle_retention: r.aggregate.needle_retention,
        })
        .collect();
    let key = |v: Option<f64>| v.unwrap_or(f64::INFINITY);
    summary.sort_by(|a, b| {
        key(a.mean_attn_loss)
            .total_cmp(&key(b.mean_attn_loss))
            .then(key(a.mean_out_loss).total_cmp(&key(b.mean_out_loss)))
            .then(a.policy.cmp(&b.policy))
            .then(a.budget.cmp(&b.budget))
            .then(a.seed.cmp(&b.seed))
    });

    let mut text = String::from(
        "rank,policy,B,B_bound,seed,mean_attn_loss,mean_attn_loss_secondary,max_attn_loss,mean_out_loss,needle_retention\n",
    );
    for (i, r) in summary.iter().enumerate() {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{}",
            i + 1,
            r.policy,
            r.budget,
            r.b_bound.map(|b| b.to_string()).unwrap_or_default(),
            r.seed,
            fmt_opt(r.mean_attn_loss),
            fmt_opt(r.mean_attn_loss_secondary),
            fmt_opt(r.max_attn_loss),
            fmt_opt(r.mean_out_loss),
            fmt_opt(r.needle_retention),
        )?;
    }
    write_text(&config.output_dir.join("summary.csv"), &text)?;

    let mut text = String::from("policy,B,seed,reason\n");
    for s in &skipped {
        writeln!(text, "{},{},{},\"{}\"", s.policy, s.budget, s.seed, s.reason.replace('"', "'"))?;
    }
    write_text(&config.output_dir.join("skipped.csv"), &text)?;

    Ok(CompareResult {
        reports,
        summary,
        skipped,
    })
}

/// Per-layer LMBA (and LMBO when the source has a model) for every seed.
/// Writes `profile-s{seed}.json` reports and a combined `profile.csv`.
pub fn profile(config: &ExperimentConfig) -> Result<Vec<MetricsReport>> {
    if config.seeds.is_empty() {
        bail!("at least one seed is required");
    }
    let want_lmbo = match (config.metrics.lmbo, &config.source) {
        (Some(true), Source::Toy { .. }) | (None, Source::Toy { .. }) => true,
        (Some(true), other) => bail!(
            "LMBO needs a model to re-run; the {} source only provides attention",
            other.name()
        ),
        _ => false,
    };
    write_manifest(config, "profile")?;
    let window = config.window;
    let selector = zigzag_core::SnapSelector {
        window,
        pool_kernel: config.policies.first().map_or(1, |p| p.pool_kernel),
    };
    let pool = thread_pool()?;
    let reports: Vec<MetricsReport> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| {
                let subject = Subject::prepare(&config.source, seed, window)?;
                let mut per_layer = PerLayer {
                    lmba: metrics::lmba_profile(&subject.trace, window, config.epsilon)?,
                    ..PerLayer::default()
                };
                if want_lmbo {
                    let run = subject.model.as_ref().expect("toy source has a model");
                    per_layer.lmbo =
                        metrics::lmbo_profile(&run.model, &run.tokens, &run.prefill, &selector, config.epsilon)?;
                }
                let meta = ReportMeta {
                    policy: "profile".into(),
                    budget: subject.trace.len(),
                    b_bound: None,
                    seed,
                    window,
                    len: subject.trace.len(),
                };
                Ok(MetricsReport::new(meta, per_layer, None))
            })
            .collect::<Result<_>>()
    })?;

    let mut text = String::from("seed,layer,lmba,lmbo\n");
    for r in &reports {
        let path = config.output_dir.join(format!("profile-s{}.json", r.meta.seed));
        emit_report(r, ReportFormat::Json, &path)?;
        for (l, v) in r.per_layer.lmba.iter().enumerate() {
            let lmbo = r.per_layer.lmbo.get(l).map(|b| b.to_string()).unwrap_or_default();
            writeln!(text, "{},{l},{v},{lmbo}", r.meta.seed)?;
        }
    }
    write_text(&config.output_dir.join("profile.csv"), &text)?;
    Ok(reports)
}

/// Retention of a planted needle, averaged over seeds, for every
/// (position, length) pair: `rows[p][l]` for `positions[p]`, `lengths[l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleMatrix {
    pub policy: String,
    pub budget: usize,
    pub positions: Vec<usize>,
    pub lengths: Vec<usize>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl NeedleMatrix {
    pub fn to_csv(&self) -> String {
        let mut text = String::from("position");
        for l in &self.lengths {
            write!(text, ",len_{l}").expect("string write");
        }
        text.push('\n');
        for (p, row) in self.positions.iter().zip(&self.rows) {
            text.push_str(&p.to_string());
            for v in row {
                text.push(',');
                text.push_str(&fmt_opt(*v));
            }
            text.push('\n');
        }
        text
    }
}

/// Sweeps needle position and sequence length over synthetic traces with a
/// single planted needle. Writes `needle-{policy}-B{budget}.csv` per policy
/// and budget; infeasible cells are left blank.
pub fn needle(config: &ExperimentConfig) -> Result<Vec<NeedleMatrix>> {
    config.validate()?;
    let spec = config
        .needle
        .as_ref()
        .ok_or_else(|| anyhow!("needle runs need a needle spec (positions and lengths)"))?;
    if !matches!(config.source, Source::Synth { .. }) {
        bail!("needle runs plant needles in synthetic traces; use a synth source");
    }
    for &p in &spec.positions {
        for &n in &spec.lengths {
            if p >= n {
                bail!("needle position {p} is outside a sequence of length {n}");
            }
        }
    }
    write_manifest(config, "needle")?;
    let window = config.source_window();
    let pool = thread_pool()?;

    let mut out = Vec::new();
    for policy in &config.policies {
        for &budget in &config.budgets {
            let rows: Vec<Vec<Option<f64>>> = pool.install(|| {
                spec.positions
                    .par_iter()
                    .map(|&p| {
                        spec.lengths
                            .iter()
                            .map(|&n| needle_cell(config, policy, budget, p, n, window))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()
            })?;
            let m = NeedleMatrix {
                policy: policy.label(budget),
                budget,
                positions: spec.positions.clone(),
                lengths: spec.lengths.clone(),
                rows,
            };
            let path = config.output_dir.join(format!("needle-{}-B{budget}.csv", m.policy));
            write_text(&path, &m.to_csv())?;
            out.push(m);
        }
    }
    Ok(out)
}

fn needle_cell(
    config: &ExperimentConfig,
    policy: &PolicyConfig,
    budget: usize,
    position: usize,
    len: usize,
    window: usize,
) -> Result<Option<f64>> {
    let mut total = 0.0;
    for &seed in &config.seeds {
        let mut spec = config.source.synth_spec(seed, window).expect("synth source");
        spec.len = len;
        spec.needles = vec![position];
        let trace = generate_synth(&spec)?.trace;
        match decide(policy, &trace, budget) {
            Ok(d) => total += metrics::needle_retention(&d, &[position]),
            Err(e) if is_infeasible(&e) => return Ok(None),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(total / config.seeds.len() as f64))
}
