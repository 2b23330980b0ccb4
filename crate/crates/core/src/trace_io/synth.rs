//! Synthetic attention traces with a controllable concentration per layer.
//!
//! Every head of layer `l` picks `ceil(κ_l)` hot key positions (prefix
//! positions first). Each window row gives `hot_mass` to the hot positions
//! it can see, weighted by per-head jitter, and spreads the rest uniformly
//! over its causal keys. Small κ gives peaked rows and a small LMBA; κ equal
//! to the sequence length with zero jitter gives uniform rows.
//!
//! Optional needle positions take `needle_mass` of every row that can see
//! them, scaling everything else down.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TraceFile;
use crate::attention::AttentionTrace;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub layers: usize,
    pub heads: usize,
    pub len: usize,
    pub window: usize,
    pub seed: u64,
    /// κ per layer.
    pub concentration: Vec<f64>,
    #[serde(default = "default_hot_mass")]
    pub hot_mass: f64,
    /// Hot weights are drawn from `1 ± jitter`.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub needles: Vec<usize>,
    #[serde(default = "default_needle_mass")]
    pub needle_mass: f64,
}

fn default_hot_mass() -> f64 {
    0.95
}

fn default_jitter() -> f64 {
    0.5
}

fn default_needle_mass() -> f64 {
    0.5
}

impl SynthSpec {
    pub fn new(layers: usize, heads: usize, len: usize, window: usize, seed: u64, concentration: Vec<f64>) -> Self {
        Self {
            layers,
            heads,
            len,
            window,
            seed,
            concentration,
            hot_mass: default_hot_mass(),
            jitter: default_jitter(),
            needles: Vec::new(),
            needle_mass: default_needle_mass(),
        }
    }

    pub fn with_needles(mut self, needles: Vec<usize>, mass: f64) -> Self {
        self.needles = needles;
        self.needle_mass = mass;
        self
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 {
            return Err(Error::Input("synthetic trace needs at least one layer and head".into()));
        }
        if self.window == 0 || self.window > self.len {
            return Err(Error::Window {
                window: self.window,
                len: self.len,
            });
        }
        if self.concentration.len() != self.layers {
            return Err(Error::Input(format!(
                "{} concentration values for {} layers",
                self.concentration.len(),
                self.layers
            )));
        }
        if let Some(k) = self.concentration.iter().find(|k| !(k.is_finite() && **k > 0.0)) {
            return Err(Error::Input(format!("concentration {k} must be positive")));
        }
        for (name, v) in [("hot_mass", self.hot_mass), ("needle_mass", self.needle_mass)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Input(format!("jitter {} outside [0, 1)", self.jitter)));
        }
        if let Some(p) = self.needles.iter().find(|&&p| p >= self.len) {
            return Err(Error::Input(format!(
                "needle position {p} outside sequence of length {}",
                self.len
            )));
        }
        Ok(())
    }
}

fn hot_positions(rng: &mut ChaCha8Rng, len: usize, window: usize, count: usize) -> Vec<usize> {
    let prefix = len - window;
    let mut hot: Vec<usize> = if count <= prefix {
        sample(rng, prefix, count).into_iter().collect()
    } else {
        let mut all: Vec<usize> = (0..prefix).collect();
        all.extend(sample(rng, window, count - prefix).into_iter().map(|i| prefix + i));
        all
    };
    hot.sort_unstable();
    hot
}

fn head_rows(spec: &SynthSpec, kappa: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, w) = (spec.len, spec.window);
    let count = (kappa.ceil() as usize).clamp(1, n);
    let hot = hot_positions(rng, n, w, count);
    let weights: Vec<f64> = hot
        .iter()
        .map(|_| 1.0 + spec.jitter * rng.gen_range(-1.0..=1.0))
        .collect();

    let mut data = Vec::with_capacity(w * n);
    for r in 0..w {
        let query = n - w + r;
        let visible = query + 1;
        let mut row = vec![0.0; n];
        let seen: Vec<(usize, f64)> = hot
            .iter()
            .zip(&weights)
            .filter(|(&p, _)| p <= query)
            .map(|(&p, &g)| (p, g))
            .collect();
        let spread = if seen.is_empty() { 1.0 } else { 1.0 - spec.hot_mass };
        for v in &mut row[..visible] {
            *v = spread / visible as f64;
        }
        let total: f64 = seen.iter().map(|(_, g)| g).sum();
        for (p, g) in &seen {
            row[*p] += spec.hot_mass * g / total;
        }

        let needles: Vec<usize> = spec.needles.iter().copied().filter(|&p| p <= query).collect();
        if !needles.is_empty() {
            let keep = 1.0 - spec.needle_mass;
            row[..visible].iter_mut().for_each(|v| *v *= keep);
            let share = spec.needle_mass / needles.len() as f64;
            for p in needles {
                row[p] += share;
            }
        }
        data.extend(row);
    }
    data
}

/// Deterministic in `spec` (including its seed).
pub fn generate_synth(spec: &SynthSpec) -> Result<TraceFile> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layers = spec
        .concentration
        .iter()
        .map(|&kappa| {
            (0..spec.heads)
                .map(|_| Matrix::from_vec(spec.window, spec.len, head_rows(spec, kappa, &mut rng)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TraceFile::from_trace(AttentionTrace::new(
        spec.len,
        spec.window,
        layers,
    )?))
}
