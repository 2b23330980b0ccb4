//! Per-layer KV storage keyed by original token position.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub position: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

/// Retained keys and values of one layer. Each head keeps its own entries in
/// strictly increasing position order.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layer: usize,
    heads: Vec<Vec<CacheEntry>>,
    capacity: usize,
}

impl KvCache {
    pub fn new(layer: usize, num_heads: usize, capacity: usize) -> Self {
        Self {
            layer,
            heads: vec![Vec::new(); num_heads],
            capacity,
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn entries(&self, head: usize) -> &[CacheEntry] {
        &self.heads[head]
    }

    pub fn positions(&self, head: usize) -> Vec<usize> {
        self.heads[head].iter().map(|e| e.position).collect()
    }

    /// Largest position held by any head.
    pub fn last_position(&self) -> Option<usize> {
        self.heads
            .iter()
            .filter_map(|h| h.last().map(|e| e.position))
            .max()
    }

    pub fn push(&mut self, head: usize, entry: CacheEntry) -> Result<()> {
        if let Some(last) = self.heads[head].last() {
            if entry.position <= last.position {
                return Err(Error::Cache(format!(
                    "layer {} head {head}: position {} not after {}",
                    self.layer, entry.position, last.position
                )));
            }
        }
        self.heads[head].push(entry);
        Ok(())
    }

    /// Drops every entry at or beyond `position` in every head.
    pub fn truncate_from(&mut self, position: usize) {
        for head in &mut self.heads {
            head.retain(|e| e.position < position);
        }
    }
}

/// Kept positions per head for one layer, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionDecision {
    pub budget: usize,
    pub heads: Vec<Vec<usize>>,
}

impl EvictionDecision {
    pub fn keep_all(num_heads: usize, len: usize) -> Self {
        Self {
            budget: len,
            heads: vec![(0..len).collect(); num_heads],
        }
    }

    pub fn uniform(budget: usize, num_heads: usize, kept: Vec<usize>) -> Self {
        Self {
            budget,
            heads: vec![kept; num_heads],
        }
    }

    pub fn kept_count(&self, head: usize) -> usize {
        self.heads[head].len()
    }
}

/// Keeps exactly the decided positions of each head, in order.
pub fn apply_eviction(cache: &KvCache, decision: &EvictionDecision) -> Result<KvCache> {
    if decision.heads.len() != cache.num_heads() {
        return Err(Error::Cache(format!(
            "decision covers {} heads, cache has {}",
            decision.heads.len(),
            cache.num_heads()
        )));
    }
    let mut heads = Vec::with_capacity(cache.num_heads());
    for (h, (entries, kept)) in cache.heads.iter().zip(&decision.heads).enumerate() {
        if kept.len() > decision.budget {
            return Err(Error::Cache(format!(
                "layer {} head {h}: {} kept positions exceed budget {}",
                cache.layer,
                kept.len(),
                decision.budget
            )));
        }
        if kept.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Cache(format!(
                "layer {} head {h}: kept positions not strictly ascending",
                cache.layer
            )));
        }
        let mut out = Vec::with_capacity(kept.len());
        let mut cursor = entries.iter().peekable();
        for &p in kept {
            while cursor.next_if(|e| e.position < p).is_some() {}
            match cursor.next_if(|e| e.position == p) {
                Some(e) => out.push(e.clone()),
                None => {
                    return Err(Error::UnknownPosition {
                        layer: cache.layer,
                        head: h,
                        position: p,
                    })
                }
            }
        }
        heads.push(out);
    }
    Ok(KvCache {
        layer: cache.layer,
        heads,
        capacity: decision.budget,
    })
}

/// Attention mass of `row` that falls on `kept` positions.
pub fn retained_attention_mass(row: &[f64], kept: &[usize]) -> f64 {
    let unique: BTreeSet<usize> = kept.iter().copied().collect();
    unique.into_iter().filter_map(|p| row.get(p)).sum()
}
