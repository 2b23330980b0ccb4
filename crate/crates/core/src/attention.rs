//! Observation-window attention, the input every policy and metric consumes.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Per-layer, per-head attention rows of the last `window` prompt queries
/// over all `len` key positions.
///
/// Row `j` belongs to query position `len - window + j` and is zero beyond
/// that position (causal mask).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    len: usize,
    window: usize,
    layers: Vec<Vec<Matrix>>,
    cumulative: Option<Vec<Vec<Vec<f64>>>>,
}

impl AttentionTrace {
    /// Checks shapes only; row sums are validated by the trace loader.
    pub fn new(len: usize, window: usize, layers: Vec<Vec<Matrix>>) -> Result<Self> {
        if window == 0 || window > len {
            return Err(Error::Window { window, len });
        }
        let heads = layers.first().map_or(0, Vec::len);
        for (l, layer) in layers.iter().enumerate() {
            if layer.len() != heads || heads == 0 {
                return Err(Error::Shape(format!(
                    "layer {l} has {} heads, expected {heads} (> 0)",
                    layer.len()
                )));
            }
            for (h, m) in layer.iter().enumerate() {
                if m.rows() != window || m.cols() != len {
                    return Err(Error::Shape(format!(
                        "layer {l} head {h}: {}x{} attention, expected {window}x{len}",
                        m.rows(),
                        m.cols()
                    )));
                }
            }
        }
        Ok(Self {
            len,
            window,
            layers,
            cumulative: None,
        })
    }

    /// Attaches all-query cumulative attention (column sums over every prompt
    /// query), used by heavy-hitter scoring.
    pub fn with_cumulative(mut self, cumulative: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let ok = cumulative.len() == self.layers.len()
            && cumulative
                .iter()
                .all(|l| l.len() == self.num_heads() && l.iter().all(|c| c.len() == self.len));
        if !ok {
            return Err(Error::Shape("cumulative attention shape".into()));
        }
        self.cumulative = Some(cumulative);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn layers(&self) -> &[Vec<Matrix>] {
        &self.layers
    }

    pub fn head(&self, layer: usize, head: usize) -> &Matrix {
        &self.layers[layer][head]
    }

    /// Query position of window row `row`.
    pub fn query_position(&self, row: usize) -> usize {
        self.len - self.window + row
    }

    /// Column sums over every prompt query if available, otherwise over the
    /// observation window.
    pub fn cumulative(&self, layer: usize, head: usize) -> Vec<f64> {
        match &self.cumulative {
            Some(c) => c[layer][head].clone(),
            None => column_sums(self.head(layer, head)),
        }
    }

    pub fn has_full_cumulative(&self) -> bool {
        self.cumulative.is_some()
    }

    /// Mean of the window rows of one head.
    pub fn mean_row(&self, layer: usize, head: usize) -> Vec<f64> {
        let m = self.head(layer, head);
        let mut out = column_sums(m);
        let rows = m.rows() as f64;
        out.iter_mut().for_each(|v| *v /= rows);
        out
    }
}

pub fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
