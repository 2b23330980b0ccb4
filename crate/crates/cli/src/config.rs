use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use zigzag_core::trace_io::SynthSpec;
use zigzag_core::{ModelConfig, PolicyConfig};

/// Where attention comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Source {
    /// Seeded toy decoder over seeded random tokens. Each run seed sets both.
    Toy {
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        vocab_size: usize,
        len: usize,
        #[serde(default = "one")]
        sharpen: f64,
    },
    /// Generated trace; each run seed is the generator seed.
    Synth {
        num_heads: usize,
        len: usize,
        concentration: Vec<f64>,
        #[serde(default = "hot_mass")]
        hot_mass: f64,
        #[serde(default = "jitter")]
        jitter: f64,
        #[serde(default)]
        needles: Vec<usize>,
        #[serde(default = "needle_mass")]
        needle_mass: f64,
    },
    /// Recorded trace file; seeds only label the runs.
    Trace { path: PathBuf },
}

fn one() -> f64 {
    1.0
}
fn hot_mass() -> f64 {
    0.95
}
fn jitter() -> f64 {
    0.5
}
fn needle_mass() -> f64 {
    0.5
}

impl Source {
    pub fn name(&self) -> &'static str {
        match self {
            Source::Toy { .. } => "toy",
            Source::Synth { .. } => "synth",
            Source::Trace { .. } => "trace",
        }
    }

    pub fn model_config(&self, seed: u64) -> Option<ModelConfig> {
        match *self {
            Source::Toy {
                num_layers,
                num_heads,
                head_dim,
                vocab_size,
                ..
            } => Some(ModelConfig::new(num_layers, num_heads, head_dim, vocab_size, seed)),
            _ => None,
        }
    }

    pub fn synth_spec(&self, seed: u64, window: usize) -> Option<SynthSpec> {
        match self {
            Source::Synth {
                num_heads,
                len,
                concentration,
                hot_mass,
                jitter,
                needles,
                needle_mass,
            } => Some(SynthSpec {
                layers: concentration.len(),
                heads: *num_heads,
                len: *len,
                window,
                seed,
                concentration: concentration.clone(),
                hot_mass: *hot_mass,
                jitter: *jitter,
                needles: needles.clone(),
                needle_mass: *needle_mass,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricToggles {
    pub attention_loss: bool,
    pub output_loss: bool,
    pub lmba: bool,
    /// `None` computes LMBO whenever the source has a model.
    pub lmbo: Option<bool>,
}

impl Default for MetricToggles {
    fn default() -> Self {
        Self {
            attention_loss: true,
            output_loss: true,
            lmba: true,
            lmbo: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleSpec {
    pub positions: Vec<usize>,
    pub lengths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: Source,
    pub policies: Vec<PolicyConfig>,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Observation window for prefill, profiling and trace generation.
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub metrics: MetricToggles,
    #[serde(default)]
    pub needle: Option<NeedleSpec>,
}

fn default_window() -> usize {
    8
}

fn default_epsilon() -> f64 {
    zigzag_core::metrics::DEFAULT_EPSILON
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            bail!("at least one policy is required");
        }
        if self.budgets.is_empty() {
            bail!("at least one budget is required");
        }
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        if self.window == 0 {
            bail!("window must be at least 1");
        }
        for p in &self.policies {
            p.validate()?;
        }
        Ok(())
    }

    /// Window the source must provide: wide enough for every policy.
    pub fn source_window(&self) -> usize {
        self.policies
            .iter()
            .map(|p| p.window)
            .chain([self.window])
            .max()
            .unwrap_or(self.window)
    }
}
