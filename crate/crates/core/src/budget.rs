//! Per-layer cache budgets.
//!
//! Every scheme turns a mean per-layer budget `B` and a layer count `L` into
//! integer budgets whose sum is exactly `B * L`:
//!
//! * uniform: every layer gets `B`;
//! * pyramid: an arithmetic ramp from the first layer down to the last;
//! * uncertainty-bounded: each layer gets a guaranteed floor `B_bound` and
//!   the rest of the pool is split in proportion to the layer's normalized
//!   LMBA. With `B_bound = 0` this is the plain proportional split.
//!
//! Real-valued allocations are rounded with the largest-remainder method.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Uniform,
    Pyramid,
    Uncertainty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub budgets: Vec<usize>,
    pub total: usize,
    pub scheme: Scheme,
}

impl BudgetPlan {
    pub fn num_layers(&self) -> usize {
        self.budgets.len()
    }

    /// Budgets clipped to the sequence length. The clipped surplus is not
    /// redistributed.
    pub fn capped(&self, len: usize) -> Vec<usize> {
        self.budgets.iter().map(|&b| b.min(len)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyProfile {
    pub lmba: Vec<f64>,
    pub uncertainty: Vec<f64>,
}

fn check_mean(budget: usize, layers: usize) -> Result<()> {
    if budget == 0 || layers == 0 {
        return Err(Error::Allocation(format!(
            "budget ({budget}) and layer count ({layers}) must be at least 1"
        )));
    }
    Ok(())
}

pub fn uniform_plan(budget: usize, layers: usize) -> Result<BudgetPlan> {
    check_mean(budget, layers)?;
    Ok(BudgetPlan {
        budgets: vec![budget; layers],
        total: budget * layers,
        scheme: Scheme::Uniform,
    })
}

/// Linearly decreasing budgets from `2B - B_min` at layer 0 to
/// `B_min = max(1, round(min_ratio * B))` at the last layer. Intermediate
/// layers are floored; the rounding residue goes to layer 0.
pub fn pyramid_plan(budget: usize, layers: usize, min_ratio: f64) -> Result<BudgetPlan> {
    check_mean(budget, layers)?;
    if !(min_ratio > 0.0 && min_ratio <= 1.0) {
        return Err(Error::Allocation(format!(
            "pyramid min_ratio {min_ratio} outside (0, 1]"
        )));
    }
    let b_min = ((min_ratio * budget as f64).round() as usize).max(1);
    if b_min > budget {
        return Err(Error::Allocation(format!(
            "minimum layer budget {b_min} exceeds mean {budget}"
        )));
    }
    let total = budget * layers;
    if layers == 1 {
        return Ok(BudgetPlan {
            budgets: vec![budget],
            total,
            scheme: Scheme::Pyramid,
        });
    }
    let b_max = 2 * budget - b_min;
    let span = b_max - b_min;
    let steps = layers - 1;
    let mut budgets: Vec<usize> = (0..layers)
        // floor(b_max - l * span / steps), in integers
        .map(|l| b_max - (l * span).div_ceil(steps))
        .collect();
    let assigned: usize = budgets[1..].iter().sum();
    budgets[0] = total - assigned;
    Ok(BudgetPlan {
        budgets,
        total,
        scheme: Scheme::Pyramid,
    })
}

pub fn uncertainty_profile(lmba: &[f64]) -> Result<UncertaintyProfile> {
    if lmba.is_empty() {
        return Err(Error::DegenerateProfile);
    }
    if let Some(bad) = lmba.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Parameter(format!("LMBA value {bad} is not a nonnegative number")));
    }
    let total: f64 = lmba.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateProfile);
    }
    Ok(UncertaintyProfile {
        lmba: lmba.to_vec(),
        uncertainty: lmba.iter().map(|v| v / total).collect(),
    })
}

/// Bounded uncertainty allocation:
/// `b_l = B_bound + (B - B_bound) * L * uncertainty_l`, rounded so the plan
/// sums to `B * L` and no layer is below `max(1, B_bound)`.
pub fn zigzag_plan(
    budget: usize,
    layers: usize,
    profile: &UncertaintyProfile,
    bound: usize,
) -> Result<BudgetPlan> {
    check_mean(budget, layers)?;
    if bound > budget {
        return Err(Error::Allocation(format!(
            "B_bound {bound} exceeds mean budget {budget}"
        )));
    }
    if profile.uncertainty.len() != layers {
        return Err(Error::Allocation(format!(
            "uncertainty profile has {} layers, expected {layers}",
            profile.uncertainty.len()
        )));
    }
    let pool = ((budget - bound) * layers) as f64;
    let ideal: Vec<f64> = profile
        .uncertainty
        .iter()
        .map(|u| bound as f64 + pool * u)
        .collect();
    let total = budget * layers;
    let mut budgets = largest_remainder(&ideal, total);
    lift_to_floor(&mut budgets, &ideal, bound.max(1));
    Ok(BudgetPlan {
        budgets,
        total,
        scheme: Scheme::Uncertainty,
    })
}

/// Hamilton apportionment of `total` units to real-valued shares. Leftover
/// units go to the largest fractional parts, lower index first on ties.
pub fn largest_remainder(ideal: &[f64], total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = ideal.iter().map(|v| v.max(0.0).floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    if assigned >= total {
        // only reachable through float error in the shares; trim the largest
        let mut excess = assigned - total;
        while excess > 0 {
            let i = argmax_by(&out, |&a, &b| out[a].cmp(&out[b]));
            out[i] -= 1;
            excess -= 1;
        }
        return out;
    }
    let mut order: Vec<usize> = (0..ideal.len()).collect();
    let frac = |i: usize| ideal[i] - ideal[i].floor();
    order.sort_by(|&a, &b| {
        frac(b)
            .partial_cmp(&frac(a))
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut left = total - assigned;
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Raises layers below `floor` by taking units from the layer with the most
/// headroom above it. Among equally large donors the one with the smaller
/// ideal share gives first, which keeps the ordering of ideals.
fn lift_to_floor(budgets: &mut [usize], ideal: &[f64], floor: usize) {
    while let Some(short) = budgets.iter().position(|&b| b < floor) {
        let donor = argmax_by(budgets, |&a, &b| {
            budgets[a]
                .cmp(&budgets[b])
                .then(ideal[b].partial_cmp(&ideal[a]).unwrap_or(Ordering::Equal))
        });
        if budgets[donor] <= floor {
            // infeasible; callers guarantee total >= floor * layers
            break;
        }
        budgets[donor] -= 1;
        budgets[short] += 1;
    }
}

fn argmax_by(v: &[usize], cmp: impl Fn(&usize, &usize) -> Ordering) -> usize {
    (0..v.len()).max_by(|a, b| cmp(a, b)).expect("nonempty")
}
