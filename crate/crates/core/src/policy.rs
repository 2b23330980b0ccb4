//! Eviction policies. Each one reads observation-window attention and a
//! budget and returns the positions every head keeps in every layer.
//!
//! All policies compress once, after prefill.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{column_sums, AttentionTrace};
use crate::budget::{self, BudgetPlan};
use crate::cache::EvictionDecision;
use crate::error::{Error, Result};
use crate::metrics;
use crate::tensor::top_k_indices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    FullKV,
    StreamingLLM,
    H2O,
    SnapKV,
    PyramidKV,
    ZigZagKV,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::FullKV,
        PolicyKind::StreamingLLM,
        PolicyKind::H2O,
        PolicyKind::SnapKV,
        PolicyKind::PyramidKV,
        PolicyKind::ZigZagKV,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::FullKV => "fullkv",
            PolicyKind::StreamingLLM => "streamingllm",
            PolicyKind::H2O => "h2o",
            PolicyKind::SnapKV => "snapkv",
            PolicyKind::PyramidKV => "pyramidkv",
            PolicyKind::ZigZagKV => "zigzagkv",
        }
    }

    /// Policies that always keep the observation window and rank the prefix
    /// by pooled window attention.
    pub fn is_snap_family(self) -> bool {
        matches!(
            self,
            PolicyKind::SnapKV | PolicyKind::PyramidKV | PolicyKind::ZigZagKV
        )
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        let key = key.strip_suffix("kv").map_or(key.as_str(), |k| k);
        match key {
            "full" => Ok(PolicyKind::FullKV),
            "streamingllm" | "streaming" | "streamlm" => Ok(PolicyKind::StreamingLLM),
            "h2o" => Ok(PolicyKind::H2O),
            "snap" => Ok(PolicyKind::SnapKV),
            "pyramid" => Ok(PolicyKind::PyramidKV),
            "zigzag" => Ok(PolicyKind::ZigZagKV),
            _ => Err(Error::Policy(format!("unknown policy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub window: usize,
    pub sink_count: usize,
    pub recent_fraction: f64,
    pub pool_kernel: usize,
    pub pyramid_min_ratio: f64,
    /// Per-layer floor for the uncertainty allocation; `None` means half the
    /// mean budget.
    pub b_bound: Option<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::ZigZagKV,
            window: 8,
            sink_count: 4,
            recent_fraction: 0.5,
            pool_kernel: 7,
            pyramid_min_ratio: 0.125,
            b_bound: None,
        }
    }
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn with_pool_kernel(mut self, kernel: usize) -> Self {
        self.pool_kernel = kernel;
        self
    }

    pub fn with_b_bound(mut self, bound: usize) -> Self {
        self.b_bound = Some(bound);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Policy("window must be at least 1".into()));
        }
        if self.pool_kernel == 0 || self.pool_kernel.is_multiple_of(2) {
            return Err(Error::Policy(format!(
                "pool kernel {} must be odd and at least 1",
                self.pool_kernel
            )));
        }
        for (name, v) in [
            ("recent_fraction", self.recent_fraction),
            ("pyramid_min_ratio", self.pyramid_min_ratio),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Policy(format!("{name} {v} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn bound_for(&self, budget: usize) -> usize {
        self.b_bound.unwrap_or(budget / 2)
    }

    pub fn selector(&self) -> SnapSelector {
        SnapSelector {
            window: self.window,
            pool_kernel: self.pool_kernel,
        }
    }

    /// Short label used in file names and summaries, e.g. `zigzagkv-bb16`.
    pub fn label(&self, budget: usize) -> String {
        match self.kind {
            PolicyKind::ZigZagKV => format!("{}-bb{}", self.kind, self.bound_for(budget)),
            k => k.to_string(),
        }
    }
}

/// Window-pooled importance of each prefix position, per layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub window: usize,
    pub scores: Vec<Vec<Vec<f64>>>,
}

/// Column sums of the last `window` rows of `attention`.
pub fn window_column_sums(attention: &crate::tensor::Matrix, window: usize) -> Vec<f64> {
    let first = attention.rows() - window;
    let rows: Vec<usize> = (first..attention.rows()).collect();
    column_sums(&attention.select_rows(&rows))
}

/// Same-length max pooling; the window is clipped at both edges.
pub fn max_pool(scores: &[f64], kernel: usize) -> Vec<f64> {
    let radius = kernel / 2;
    (0..scores.len())
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(scores.len());
            scores[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn check_window(trace: &AttentionTrace, window: usize) -> Result<()> {
    if window == 0 || window > trace.len() {
        return Err(Error::Window {
            window,
            len: trace.len(),
        });
    }
    if window > trace.window() {
        return Err(Error::Window {
            window,
            len: trace.window(),
        });
    }
    Ok(())
}

/// Importance of prefix positions `0..len - window`: summed attention from
/// the last `window` queries, then max-pooled when `pool_kernel > 1`.
pub fn head_importance(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    window: usize,
    pool_kernel: usize,
) -> Vec<f64> {
    let mut sums = window_column_sums(trace.head(layer, head), window);
    sums.truncate(trace.len() - window);
    if pool_kernel > 1 {
        max_pool(&sums, pool_kernel)
    } else {
        sums
    }
}

pub fn importance_scores(
    trace: &AttentionTrace,
    window: usize,
    pool_kernel: usize,
) -> Result<ImportanceScores> {
    check_window(trace, window)?;
    let scores = (0..trace.num_layers())
        .map(|l| {
            (0..trace.num_heads())
                .map(|h| head_importance(trace, l, h, window, pool_kernel))
                .collect()
        })
        .collect();
    Ok(ImportanceScores { window, scores })
}

/// SnapKV-style selection for a single layer: keep the observation window
/// and fill the remaining slots with the highest-scoring prefix positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapSelector {
    pub window: usize,
    pub pool_kernel: usize,
}

impl SnapSelector {
    pub fn select(&self, trace: &AttentionTrace, layer: usize, budget: usize) -> Result<EvictionDecision> {
        check_window(trace, self.window)?;
        let len = trace.len();
        let heads = trace.num_heads();
        if budget >= len {
            return Ok(EvictionDecision::keep_all(heads, len));
        }
        if budget <= self.window {
            return Err(Error::Policy(format!(
                "layer {layer} budget {budget} does not exceed observation window {}",
                self.window
            )));
        }
        let observed = len - self.window..len;
        let heads = (0..heads)
            .map(|h| {
                let scores = head_importance(trace, layer, h, self.window, self.pool_kernel);
                let mut kept = top_k_indices(&scores, budget - self.window);
                kept.extend(observed.clone());
                kept
            })
            .collect();
        Ok(EvictionDecision { budget, heads })
    }

    /// Like [`select`](Self::select), but a budget that cannot hold the whole
    /// observation window keeps only the most recent `budget` positions.
    pub fn select_or_truncate(
        &self,
        trace: &AttentionTrace,
        layer: usize,
        budget: usize,
    ) -> Result<EvictionDecision> {
        if budget <= self.window && budget < trace.len() {
            check_window(trace, self.window)?;
            let recent: Vec<usize> = (trace.len() - budget..trace.len()).collect();
            return Ok(EvictionDecision::uniform(budget, trace.num_heads(), recent));
        }
        self.select(trace, layer, budget)
    }
}

/// Output of a policy: the budget plan and one decision per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub kind: PolicyKind,
    pub plan: BudgetPlan,
    pub layers: Vec<EvictionDecision>,
}

impl PolicyDecision {
    pub fn kept_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|d| d.kept_count(0)).collect()
    }
}

pub fn decide_fullkv(trace: &AttentionTrace) -> Result<PolicyDecision> {
    let layers = trace.num_layers();
    Ok(PolicyDecision {
        kind: PolicyKind::FullKV,
        plan: budget::uniform_plan(trace.len(), layers)?,
        layers: vec![EvictionDecision::keep_all(trace.num_heads(), trace.len()); layers],
    })
}

/// Attention sinks plus a recency window.
pub fn decide_streaming(
    len: usize,
    num_heads: usize,
    plan: &BudgetPlan,
    sink_count: usize,
) -> Result<PolicyDecision> {
    let layers = plan
        .budgets
        .iter()
        .map(|&b| {
            if b >= len {
                return Ok(EvictionDecision::keep_all(num_heads, len));
            }
            if b <= sink_count {
                return Err(Error::Policy(format!(
                    "budget {b} leaves no room after {sink_count} sink tokens"
                )));
            }
            let mut kept: Vec<usize> = (0..sink_count).collect();
            kept.extend(len - (b - sink_count)..len);
            Ok(EvictionDecision::uniform(b, num_heads, kept))
        })
        .collect::<Result<_>>()?;
    Ok(PolicyDecision {
        kind: PolicyKind::StreamingLLM,
        plan: plan.clone(),
        layers,
    })
}

/// Recent tokens plus heavy hitters ranked by cumulative attention. No
/// pooling and no observation window.
pub fn decide_h2o(
    trace: &AttentionTrace,
    plan: &BudgetPlan,
    recent_fraction: f64,
) -> Result<PolicyDecision> {
    if !(recent_fraction > 0.0 && recent_fraction <= 1.0) {
        return Err(Error::Policy(format!(
            "recent_fraction {recent_fraction} outside (0, 1]"
        )));
    }
    let len = trace.len();
    let layers = plan
        .budgets
        .iter()
        .enumerate()
        .map(|(l, &b)| {
            if b >= len {
                return EvictionDecision::keep_all(trace.num_heads(), len);
            }
            let recent = ((recent_fraction * b as f64).ceil() as usize).min(b);
            let heads = (0..trace.num_heads())
                .map(|h| {
                    let mut cumulative = trace.cumulative(l, h);
                    cumulative.truncate(len - recent);
                    let mut kept = top_k_indices(&cumulative, b - recent);
                    kept.extend(len - recent..len);
                    kept
                })
                .collect();
            EvictionDecision { budget: b, heads }
        })
        .collect();
    Ok(PolicyDecision {
        kind: PolicyKind::H2O,
        plan: plan.clone(),
        layers,
    })
}

fn snap_layers(
    trace: &AttentionTrace,
    plan: &BudgetPlan,
    selector: SnapSelector,
    truncate: bool,
) -> Result<Vec<EvictionDecision>> {
    if plan.num_layers() != trace.num_layers() {
        return Err(Error::Policy(format!(
            "plan covers {} layers, trace has {}",
            plan.num_layers(),
            trace.num_layers()
        )));
    }
    plan.capped(trace.len())
        .into_iter()
        .enumerate()
        .map(|(l, b)| {
            if truncate {
                selector.select_or_truncate(trace, l, b)
            } else {
                selector.select(trace, l, b)
            }
        })
        .collect()
}

/// A mean budget of at least the sequence length holds every layer's full
/// cache, so non-uniform plans do not evict anything.
fn fits_whole(trace: &AttentionTrace) -> Vec<EvictionDecision> {
    vec![EvictionDecision::keep_all(trace.num_heads(), trace.len()); trace.num_layers()]
}

pub fn decide_snapkv(
    trace: &AttentionTrace,
    budget: usize,
    selector: SnapSelector,
) -> Result<PolicyDecision> {
    let plan = budget::uniform_plan(budget, trace.num_layers())?;
    let layers = snap_layers(trace, &plan, selector, false)?;
    Ok(PolicyDecision {
        kind: PolicyKind::SnapKV,
        plan,
        layers,
    })
}

pub fn decide_pyramidkv(
    trace: &AttentionTrace,
    budget: usize,
    min_ratio: f64,
    selector: SnapSelector,
) -> Result<PolicyDecision> {
    let plan = budget::pyramid_plan(budget, trace.num_layers(), min_ratio)?;
    let layers = if budget >= trace.len() {
        fits_whole(trace)
    } else {
        snap_layers(trace, &plan, selector, false)?
    };
    Ok(PolicyDecision {
        kind: PolicyKind::PyramidKV,
        plan,
        layers,
    })
}

/// Uncertainty-driven allocation: LMBA of every layer is measured first,
/// normalized into an uncertainty profile, turned into a bounded budget plan,
/// and only then is each layer compressed SnapKV-style under its own budget.
///
/// A layer whose budget cannot hold the observation window keeps its most
/// recent `budget` positions instead of failing, so that unbounded plans
/// (`b_bound = 0`) stay runnable.
pub fn decide_zigzag(
    trace: &AttentionTrace,
    budget: usize,
    b_bound: usize,
    selector: SnapSelector,
) -> Result<PolicyDecision> {
    check_window(trace, selector.window)?;
    let lmba = metrics::lmba_profile(trace, selector.window, metrics::DEFAULT_EPSILON)?;
    let profile = budget::uncertainty_profile(&lmba)?;
    let plan = budget::zigzag_plan(budget, trace.num_layers(), &profile, b_bound)?;
    let layers = if budget >= trace.len() {
        fits_whole(trace)
    } else {
        snap_layers(trace, &plan, selector, true)?
    };
    Ok(PolicyDecision {
        kind: PolicyKind::ZigZagKV,
        plan,
        layers,
    })
}

/// Runs the configured policy at mean budget `budget`.
pub fn decide(config: &PolicyConfig, trace: &AttentionTrace, budget: usize) -> Result<PolicyDecision> {
    config.validate()?;
    let selector = config.selector();
    let layers = trace.num_layers();
    match config.kind {
        PolicyKind::FullKV => decide_fullkv(trace),
        PolicyKind::StreamingLLM => decide_streaming(
            trace.len(),
            trace.num_heads(),
            &budget::uniform_plan(budget, layers)?,
            config.sink_count,
        ),
        PolicyKind::H2O => decide_h2o(
            trace,
            &budget::uniform_plan(budget, layers)?,
            config.recent_fraction,
        ),
        PolicyKind::SnapKV => decide_snapkv(trace, budget, selector),
        PolicyKind::PyramidKV => decide_pyramidkv(trace, budget, config.pyramid_min_ratio, selector),
        PolicyKind::ZigZagKV => decide_zigzag(trace, budget, config.bound_for(budget), selector),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::retained_attention_mass;
    use crate::tensor::Matrix;

    /// Causal trace whose rows put all their mass on `hot` when visible.
    fn one_hot_trace(len: usize, window: usize, layers: usize, heads: usize, hot: usize) -> AttentionTrace {
        let rows: Vec<Vec<f64>> = (0..window)
            .map(|j| {
                let q = len - window + j;
                let mut row = vec![0.0; len];
                if hot <= q {
                    row[hot] = 1.0;
                } else {
                    row[q] = 1.0;
                }
                row
            })
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        AttentionTrace::new(len, window, vec![vec![m; heads]; layers]).unwrap()
    }

    fn uniform_causal(len: usize, window: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..window)
            .map(|j| {
                let q = len - window + j;
                (0..len).map(|k| if k <= q { 1.0 / (q + 1) as f64 } else { 0.0 }).collect()
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn parses_policy_names() {
        for k in PolicyKind::ALL {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
        }
        assert_eq!("SnapKV".parse::<PolicyKind>().unwrap(), PolicyKind::SnapKV);
        assert_eq!("streaming".parse::<PolicyKind>().unwrap(), PolicyKind::StreamingLLM);
        assert!("lru".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PolicyConfig::default().validate().is_ok());
        assert!(PolicyConfig::default().with_pool_kernel(4).validate().is_err());
        assert!(PolicyConfig::default().with_window(0).validate().is_err());
        let mut c = PolicyConfig::default();
        c.recent_fraction = 0.0;
        assert!(c.validate().is_err());
        assert_eq!(PolicyConfig::default().bound_for(32), 16);
        assert_eq!(PolicyConfig::default().with_b_bound(0).label(32), "zigzagkv-bb0");
    }

    #[test]
    fn full_window_scores_are_column_sums() {
        let m = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0],
            vec![0.2, 0.3, 0.5],
        ])
        .unwrap();
        assert_eq!(window_column_sums(&m, 3), vec![1.7, 0.8, 0.5]);
        let trace = AttentionTrace::new(3, 3, vec![vec![m]]).unwrap();
        // the whole sequence is the observation window, so no prefix is scored
        assert!(importance_scores(&trace, 3, 1).unwrap().scores[0][0].is_empty());
    }

    #[test]
    fn one_hot_rows_score_the_window_size() {
        let trace = one_hot_trace(10, 4, 1, 1, 0);
        let s = importance_scores(&trace, 4, 1).unwrap();
        assert_eq!(s.scores[0][0], vec![4.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn hand_column_sums() {
        // three observation queries (positions 2..5) over five keys
        let m = Matrix::from_rows(&[
            vec![0.1, 0.2, 0.7, 0.0, 0.0],
            vec![0.4, 0.1, 0.1, 0.4, 0.0],
            vec![0.3, 0.3, 0.1, 0.1, 0.2],
        ])
        .unwrap();
        let trace = AttentionTrace::new(5, 3, vec![vec![m]]).unwrap();
        let s = importance_scores(&trace, 3, 1).unwrap();
        let expected = [0.8, 0.6];
        for (a, b) in s.scores[0][0].iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        // narrower window uses only the last rows
        let s = importance_scores(&trace, 2, 1).unwrap();
        for (a, b) in s.scores[0][0].iter().zip([0.7, 0.4, 0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(importance_scores(&trace, 4, 1), Err(Error::Window { .. })));
    }

    #[test]
    fn max_pool_clamps_edges() {
        assert_eq!(max_pool(&[0.0, 1.0, 0.0, 0.0, 2.0], 3), vec![1.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(max_pool(&[3.0, 1.0], 7), vec![3.0, 3.0]);
        assert_eq!(max_pool(&[0.5, 0.1], 1), vec![0.5, 0.1]);
    }

    #[test]
    fn streaming_examples() {
        let plan = budget::uniform_plan(5, 1).unwrap();
        let d = decide_streaming(10, 2, &plan, 2).unwrap();
        assert_eq!(d.layers[0].heads[1], vec![0, 1, 7, 8, 9]);
        let big = budget::uniform_plan(12, 1).unwrap();
        assert_eq!(decide_streaming(10, 1, &big, 2).unwrap().layers[0].heads[0].len(), 10);
        let tiny = budget::uniform_plan(2, 1).unwrap();
        assert!(matches!(decide_streaming(10, 1, &tiny, 2), Err(Error::Policy(_))));
    }

    #[test]
    fn h2o_examples() {
        let trace = AttentionTrace::new(8, 8, vec![vec![uniform_causal(8, 8)]]).unwrap();
        let plan = budget::uniform_plan(4, 1).unwrap();
        let d = decide_h2o(&trace, &plan, 1.0).unwrap();
        assert_eq!(d.layers[0].heads[0], vec![4, 5, 6, 7]);
        let all = budget::uniform_plan(8, 1).unwrap();
        assert_eq!(decide_h2o(&trace, &all, 0.5).unwrap().layers[0].heads[0], (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn h2o_keeps_dominant_column() {
        // four tokens; every query gives most of its mass to position 0
        let m = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.8, 0.2, 0.0, 0.0],
            vec![0.7, 0.2, 0.1, 0.0],
            vec![0.6, 0.2, 0.1, 0.1],
        ])
        .unwrap();
        let trace = AttentionTrace::new(4, 4, vec![vec![m]]).unwrap();
        for b in 2..4 {
            let plan = budget::uniform_plan(b, 1).unwrap();
            let d = decide_h2o(&trace, &plan, 0.5).unwrap();
            assert!(d.layers[0].heads[0].contains(&0), "budget {b}");
            assert!(d.layers[0].heads[0].contains(&3));
        }
    }

    #[test]
    fn snapkv_examples() {
        let trace = one_hot_trace(12, 3, 2, 2, 0);
        let sel = SnapSelector { window: 3, pool_kernel: 1 };
        let d = decide_snapkv(&trace, 4, sel).unwrap();
        assert_eq!(d.layers[1].heads[0], vec![0, 9, 10, 11]);
        let d = decide_snapkv(&trace, 12, sel).unwrap();
        assert_eq!(d.layers[0].heads[0].len(), 12);
        assert!(matches!(decide_snapkv(&trace, 3, sel), Err(Error::Policy(_))));
    }

    #[test]
    fn snapkv_matches_exhaustive_window_mass() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let len = rng.gen_range(4..=12);
            let window = rng.gen_range(1..len);
            let rows: Vec<Vec<f64>> = (0..window)
                .map(|j| {
                    let q = len - window + j;
                    let raw: Vec<f64> = (0..=q).map(|_| rng.gen::<f64>()).collect();
                    let t: f64 = raw.iter().sum();
                    let mut row: Vec<f64> = raw.iter().map(|v| v / t).collect();
                    row.resize(len, 0.0);
                    row
                })
                .collect();
            let trace = AttentionTrace::new(len, window, vec![vec![Matrix::from_rows(&rows).unwrap()]]).unwrap();
            let budget = rng.gen_range(window + 1..=len);
            let sel = SnapSelector { window, pool_kernel: 1 };
            let kept = sel.select(&trace, 0, budget).unwrap().heads.remove(0);

            let window_mass = |set: &[usize]| -> f64 {
                rows.iter().map(|r| retained_attention_mass(r, set)).sum()
            };
            let mut best: Option<(f64, Vec<usize>)> = None;
            for mask in 0u32..1 << len {
                if mask.count_ones() as usize != budget {
                    continue;
                }
                let set: Vec<usize> = (0..len).filter(|i| mask & (1 << i) != 0).collect();
                if !(len - window..len).all(|p| set.contains(&p)) {
                    continue;
                }
                let m = window_mass(&set);
                if best.as_ref().is_none_or(|(bm, _)| m > *bm + 1e-12) {
                    best = Some((m, set));
                }
            }
            assert_eq!(kept, best.unwrap().1);
        }
    }

    #[test]
    fn pyramid_degenerates_to_snapkv() {
        let trace = one_hot_trace(40, 4, 3, 2, 5);
        let sel = SnapSelector { window: 4, pool_kernel: 3 };
        let snap = decide_snapkv(&trace, 10, sel).unwrap();
        let pyr = decide_pyramidkv(&trace, 10, 1.0, sel).unwrap();
        assert_eq!(snap.layers, pyr.layers);
    }

    #[test]
    fn pyramid_kept_counts_follow_plan() {
        let trace = one_hot_trace(64, 4, 3, 2, 5);
        let sel = SnapSelector { window: 4, pool_kernel: 3 };
        let d = decide_pyramidkv(&trace, 16, 0.5, sel).unwrap();
        let counts = d.kept_counts();
        assert_eq!(counts, vec![24, 16, 8]);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(counts[0] - counts[2], 24 - 8);
        assert!(decide_pyramidkv(&trace, 8, 0.25, sel).is_err());
    }

    #[test]
    fn zigzag_uniform_profile_matches_snapkv() {
        let trace = one_hot_trace(40, 4, 3, 2, 5);
        let sel = SnapSelector { window: 4, pool_kernel: 7 };
        let snap = decide_snapkv(&trace, 12, sel).unwrap();
        let zz = decide_zigzag(&trace, 12, 6, sel).unwrap();
        assert_eq!(snap.layers, zz.layers);
    }

    #[test]
    fn zigzag_gives_diffuse_layer_more_budget() {
        let len = 20;
        let window = 2;
        let diffuse = uniform_causal(len, window);
        let rows: Vec<Vec<f64>> = (0..window)
            .map(|_| {
                let mut r = vec![0.0; len];
                r[3] = 1.0;
                r
            })
            .collect();
        let focused = Matrix::from_rows(&rows).unwrap();
        let trace = AttentionTrace::new(len, window, vec![vec![diffuse], vec![focused]]).unwrap();
        // mean rows: layer 0 is near-uniform over 19-20 keys, MBA 18; layer 1 MBA 1
        let lmba = metrics::lmba_profile(&trace, window, 0.1).unwrap();
        assert_eq!(lmba, vec![18.0, 1.0]);
        let sel = SnapSelector { window, pool_kernel: 1 };
        let d = decide_zigzag(&trace, 8, 4, sel).unwrap();
        // 4 + 8 * 18/19 = 11.58, 4 + 8 * 1/19 = 4.42
        assert_eq!(d.plan.budgets, vec![12, 4]);
        assert_eq!(d.kept_counts().iter().sum::<usize>(), 16);
        assert!(d.layers[1].heads[0].contains(&3));
    }

    #[test]
    fn zigzag_starved_layer_keeps_most_recent() {
        let len = 20;
        let trace = AttentionTrace::new(len, 2, vec![vec![uniform_causal(len, 2)]; 2]).unwrap();
        let sel = SnapSelector { window: 4, pool_kernel: 1 };
        assert!(decide_zigzag(&trace, 8, 0, sel).is_err(), "trace window narrower than selector");
        let sel = SnapSelector { window: 2, pool_kernel: 1 };
        let d = sel.select_or_truncate(&trace, 0, 1).unwrap();
        assert_eq!(d.heads[0], vec![19]);
    }
}
