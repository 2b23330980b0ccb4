//! Diagnostics for compressed caches.
//!
//! * MBA: fewest attention entries whose mass reaches `1 - ε`.
//! * LMBA: per-layer mean over heads of the MBA of the head's mean
//!   observation-window row.
//! * LMBO: smallest single-layer budget at which the layer's final-token
//!   output keeps cosine similarity within `ε` of the full-cache output.
//! * Attention loss: per query, shortfall of retained mass below `1 - ε`.
//! * Output loss: `1 - cos(y, ŷ)` between full and compressed layer outputs.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionTrace;
use crate::cache::{retained_attention_mass, EvictionDecision};
use crate::error::{Error, Result};
use crate::model::{Prefill, ToyModel};
use crate::policy::{PolicyDecision, SnapSelector};
use crate::tensor::cosine_similarity;

pub const DEFAULT_EPSILON: f64 = 0.1;

/// Slack for float accumulation when comparing a mass against `1 - ε`.
const MASS_TOLERANCE: f64 = 1e-12;

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("epsilon {epsilon} outside (0, 1)")))
    }
}

/// Minimum number of entries of `row` whose sum reaches `1 - epsilon`.
pub fn mba(row: &[f64], epsilon: f64) -> Result<usize> {
    check_epsilon(epsilon)?;
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Parameter(format!(
            "attention row sums to {total}, expected 1"
        )));
    }
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let target = 1.0 - epsilon - MASS_TOLERANCE;
    let mut mass = 0.0;
    for (i, v) in sorted.iter().enumerate() {
        mass += v;
        if mass >= target {
            return Ok(i + 1);
        }
    }
    Ok(row.len())
}

/// LMBA of one layer, measured on the last `window` rows of the trace.
pub fn lmba(trace: &AttentionTrace, layer: usize, window: usize, epsilon: f64) -> Result<f64> {
    if window == 0 || window > trace.window() {
        return Err(Error::Window {
            window,
            len: trace.window(),
        });
    }
    let heads = trace.num_heads();
    let mut total = 0.0;
    for h in 0..heads {
        let m = trace.head(layer, h);
        let mut mean = vec![0.0; trace.len()];
        for row in m.iter_rows().skip(m.rows() - window) {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= window as f64);
        total += mba(&mean, epsilon)? as f64;
    }
    Ok(total / heads as f64)
}

pub fn lmba_profile(trace: &AttentionTrace, window: usize, epsilon: f64) -> Result<Vec<f64>> {
    (0..trace.num_layers())
        .map(|l| lmba(trace, l, window, epsilon))
        .collect()
}

/// Per-layer outputs of the final prompt token with every cache intact,
/// computed through the same path compressed runs take.
pub fn reference_outputs(model: &ToyModel, tokens: &[usize], prefill: &Prefill) -> Result<Vec<Vec<f64>>> {
    let cfg = model.config();
    let keep = vec![EvictionDecision::keep_all(cfg.num_heads, tokens.len()); cfg.num_layers];
    Ok(model.partial_forward(tokens, prefill, &keep)?.ys)
}

/// `1 - cos(y, ŷ)`; identical vectors give exactly zero.
pub fn similarity_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y == y_hat {
        return Ok(0.0);
    }
    Ok(1.0 - cosine_similarity(y, y_hat)?)
}

fn single_layer_loss(
    model: &ToyModel,
    tokens: &[usize],
    prefill: &Prefill,
    reference: &[f64],
    layer: usize,
    decision: EvictionDecision,
) -> Result<f64> {
    let cfg = model.config();
    let mut decisions = vec![EvictionDecision::keep_all(cfg.num_heads, tokens.len()); cfg.num_layers];
    decisions[layer] = decision;
    let out = model.partial_forward(tokens, prefill, &decisions)?;
    similarity_loss(reference, &out.ys[layer])
}

/// Candidate budgets scanned by [`lmbo`]: `window + 1 ..= len`.
pub fn lmbo_budgets(len: usize, window: usize) -> std::ops::RangeInclusive<usize> {
    (window + 1).min(len)..=len
}

/// Output loss of `layer` alone evicted to each budget in
/// [`lmbo_budgets`], with every other layer left full.
pub fn lmbo_curve(
    model: &ToyModel,
    tokens: &[usize],
    prefill: &Prefill,
    layer: usize,
    selector: &SnapSelector,
) -> Result<Vec<(usize, f64)>> {
    let trace = prefill.trace();
    let reference = reference_outputs(model, tokens, prefill)?;
    lmbo_budgets(tokens.len(), selector.window)
        .map(|b| {
            let decision = selector.select(&trace, layer, b)?;
            let loss = single_layer_loss(model, tokens, prefill, &reference[layer], layer, decision)?;
            Ok((b, loss))
        })
        .collect()
}

/// Smallest budget for `layer` (others full) whose output loss is below
/// `epsilon`, by linear scan from `window + 1` upward.
pub fn lmbo(
    model: &ToyModel,
    tokens: &[usize],
    prefill: &Prefill,
    layer: usize,
    selector: &SnapSelector,
    epsilon: f64,
) -> Result<usize> {
    check_epsilon(epsilon)?;
    let trace = prefill.trace();
    let reference = reference_outputs(model, tokens, prefill)?;
    for b in lmbo_budgets(tokens.len(), selector.window) {
        let decision = selector.select(&trace, layer, b)?;
        let loss = single_layer_loss(model, tokens, prefill, &reference[layer], layer, decision)?;
        if loss < epsilon {
            return Ok(b);
        }
    }
    Err(Error::Internal(format!(
        "layer {layer}: output loss never fell below {epsilon}, even with a full cache"
    )))
}

pub fn lmbo_profile(
    model: &ToyModel,
    tokens: &[usize],
    prefill: &Prefill,
    selector: &SnapSelector,
    epsilon: f64,
) -> Result<Vec<usize>> {
    (0..model.config().num_layers)
        .map(|l| lmbo(model, tokens, prefill, l, selector, epsilon))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionLoss {
    /// Mean over heads and window queries of `max(0, (1 - ε) - retained)`.
    pub primary: f64,
    /// `1 - mean retained mass`.
    pub secondary: f64,
}

fn layer_masses(trace: &AttentionTrace, layer: usize, decision: &EvictionDecision, window: usize) -> Vec<f64> {
    let mut masses = Vec::with_capacity(trace.num_heads() * window);
    for (h, kept) in decision.heads.iter().enumerate() {
        let m = trace.head(layer, h);
        for row in m.iter_rows().skip(m.rows() - window) {
            masses.push(retained_attention_mass(row, kept));
        }
    }
    masses
}

fn check_decision(trace: &AttentionTrace, decision: &PolicyDecision, window: usize) -> Result<()> {
    if decision.layers.len() != trace.num_layers() {
        return Err(Error::Shape(format!(
            "decision covers {} layers, trace has {}",
            decision.layers.len(),
            trace.num_layers()
        )));
    }
    if decision.layers.iter().any(|d| d.heads.len() != trace.num_heads()) {
        return Err(Error::Shape("decision head count differs from trace".into()));
    }
    if window == 0 || window > trace.window() {
        return Err(Error::Window {
            window,
            len: trace.window(),
        });
    }
    Ok(())
}

/// Mean retained attention mass per layer over heads and window queries.
pub fn retained_mass(trace: &AttentionTrace, decision: &PolicyDecision, window: usize) -> Result<Vec<f64>> {
    check_decision(trace, decision, window)?;
    Ok(decision
        .layers
        .iter()
        .enumerate()
        .map(|(l, d)| {
            let m = layer_masses(trace, l, d, window);
            m.iter().sum::<f64>() / m.len() as f64
        })
        .collect())
}

pub fn attention_loss(
    trace: &AttentionTrace,
    decision: &PolicyDecision,
    window: usize,
) -> Result<Vec<AttentionLoss>> {
    check_decision(trace, decision, window)?;
    let target = 1.0 - DEFAULT_EPSILON;
    Ok(decision
        .layers
        .iter()
        .enumerate()
        .map(|(l, d)| {
            let masses = layer_masses(trace, l, d, window);
            let count = masses.len() as f64;
            let shortfall: f64 = masses.iter().map(|m| (target - m).max(0.0)).sum();
            let mean_mass: f64 = masses.iter().sum::<f64>() / count;
            AttentionLoss {
                primary: shortfall / count,
                secondary: (1.0 - mean_mass).clamp(0.0, 1.0),
            }
        })
        .collect())
}

/// Per-layer `1 - cos(y_l, ŷ_l)` at the final prompt token after compressing
/// every layer at once.
pub fn output_loss(
    model: &ToyModel,
    tokens: &[usize],
    prefill: &Prefill,
    decision: &PolicyDecision,
) -> Result<Vec<f64>> {
    let reference = reference_outputs(model, tokens, prefill)?;
    let out = model.partial_forward(tokens, prefill, &decision.layers)?;
    reference
        .iter()
        .zip(&out.ys)
        .map(|(y, y_hat)| similarity_loss(y, y_hat))
        .collect()
}

/// Fraction of (layer, head) caches that kept every needle position.
pub fn needle_retention(decision: &PolicyDecision, needles: &[usize]) -> f64 {
    let mut cells = 0usize;
    let mut hits = 0usize;
    for layer in &decision.layers {
        for kept in &layer.heads {
            cells += 1;
            if needles.iter().all(|p| kept.binary_search(p).is_ok()) {
                hits += 1;
            }
        }
    }
    if cells == 0 {
        return 0.0;
    }
    hits as f64 / cells as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub policy: String,
    #[serde(rename = "B")]
    pub budget: usize,
    #[serde(rename = "B_bound")]
    pub b_bound: Option<usize>,
    pub seed: u64,
    pub window: usize,
    pub len: usize,
}

/// Per-layer metric columns. Columns a source cannot produce (LMBO and output
/// loss on external traces) are empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerLayer {
    pub budget: Vec<usize>,
    pub lmba: Vec<f64>,
    pub lmbo: Vec<usize>,
    pub attn_loss: Vec<f64>,
    pub attn_loss_secondary: Vec<f64>,
    pub out_loss: Vec<f64>,
}

impl PerLayer {
    pub fn num_layers(&self) -> usize {
        [
            self.budget.len(),
            self.lmba.len(),
            self.lmbo.len(),
            self.attn_loss.len(),
            self.attn_loss_secondary.len(),
            self.out_loss.len(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    }

    /// Named columns that carry data, in canonical order.
    pub fn columns(&self) -> Vec<(&'static str, Vec<f64>)> {
        let as_f64 = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        [
            ("budget", as_f64(&self.budget)),
            ("lmba", self.lmba.clone()),
            ("lmbo", as_f64(&self.lmbo)),
            ("attn_loss", self.attn_loss.clone()),
            ("attn_loss_secondary", self.attn_loss_secondary.clone()),
            ("out_loss", self.out_loss.clone()),
        ]
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_lmba: Option<f64>,
    pub mean_lmbo: Option<f64>,
    pub mean_attn_loss: Option<f64>,
    pub sum_attn_loss: Option<f64>,
    pub max_attn_loss: Option<f64>,
    pub mean_attn_loss_secondary: Option<f64>,
    pub mean_out_loss: Option<f64>,
    pub needle_retention: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub per_layer: PerLayer,
    pub aggregate: Aggregate,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsReport {
    pub fn new(meta: ReportMeta, per_layer: PerLayer, needle_retention: Option<f64>) -> Self {
        let lmbo: Vec<f64> = per_layer.lmbo.iter().map(|&v| v as f64).collect();
        let aggregate = Aggregate {
            mean_lmba: mean(&per_layer.lmba),
            mean_lmbo: mean(&lmbo),
            mean_attn_loss: mean(&per_layer.attn_loss),
            sum_attn_loss: (!per_layer.attn_loss.is_empty()).then(|| per_layer.attn_loss.iter().sum()),
            max_attn_loss: per_layer.attn_loss.iter().copied().reduce(f64::max),
            mean_attn_loss_secondary: mean(&per_layer.attn_loss_secondary),
            mean_out_loss: mean(&per_layer.out_loss),
            needle_retention,
        };
        Self {
            meta,
            per_layer,
            aggregate,
        }
    }
}
