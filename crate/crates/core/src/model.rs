//! A seeded, untrained, attention-only causal decoder.
//!
//! Each layer adds the sum of its head outputs to a single residual stream.
//! There is no MLP or normalization, so a layer's output `y` is exactly the
//! multi-head attention output that cache eviction perturbs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionTrace;
use crate::cache::{apply_eviction, CacheEntry, EvictionDecision, KvCache};
use crate::error::{Error, Result};
use crate::tensor::{dot, matmul, softmax, Matrix};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            num_layers,
            num_heads,
            head_dim,
            model_dim: num_heads * head_dim,
            vocab_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "num_layers, num_heads and head_dim must be at least 1".into(),
            ));
        }
        if self.model_dim != self.num_heads * self.head_dim {
            return Err(Error::Config(format!(
                "model_dim {} != num_heads {} x head_dim {}",
                self.model_dim, self.num_heads, self.head_dim
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    /// `head_dim x model_dim` block of the output projection.
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    layers: Vec<Vec<HeadWeights>>,
    embedding: Matrix,
}

/// Full-cache state of one layer after prefill.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub layer: usize,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    /// Last-window attention rows per head, `window x len`.
    pub attention: Vec<Matrix>,
    /// Per-head column sums of the full causal attention matrix.
    pub cumulative: Vec<Vec<f64>>,
    /// Attention output of the final prompt token.
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prefill {
    pub window: usize,
    pub layers: Vec<LayerState>,
    /// Next-token logits at the final prompt position.
    pub logits: Vec<f64>,
}

impl Prefill {
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys[0].rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ys(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.y.clone()).collect()
    }

    pub fn trace(&self) -> AttentionTrace {
        let layers = self.layers.iter().map(|l| l.attention.clone()).collect();
        let cumulative = self.layers.iter().map(|l| l.cumulative.clone()).collect();
        AttentionTrace::new(self.len(), self.window, layers)
            .and_then(|t| t.with_cumulative(cumulative))
            .expect("prefill produces well-formed traces")
    }

    /// Full caches for every layer, all positions retained.
    pub fn caches(&self) -> Vec<KvCache> {
        let len = self.len();
        self.layers
            .iter()
            .map(|state| {
                let mut cache = KvCache::new(state.layer, state.keys.len(), len);
                for (h, (k, v)) in state.keys.iter().zip(&state.values).enumerate() {
                    for p in 0..len {
                        cache
                            .push(
                                h,
                                CacheEntry {
                                    position: p,
                                    key: k.row(p).to_vec(),
                                    value: v.row(p).to_vec(),
                                },
                            )
                            .expect("positions ascend");
                    }
                }
                cache
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub logits: Vec<f64>,
    /// Per-layer attention output of the decoded token.
    pub ys: Vec<Vec<f64>>,
    /// Per-layer, per-head attention weights over the cache entries the token
    /// attended to (including itself, last).
    pub attention: Vec<Vec<Vec<f64>>>,
}

pub fn build_model(config: &ModelConfig) -> Result<ToyModel> {
    config.validate()?;
    let d = config.model_dim;
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw = |rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Matrix::from_vec(rows, cols, data).expect("finite weights")
    };
    let embedding = draw(config.vocab_size, d);
    let layers = (0..config.num_layers)
        .map(|_| {
            (0..config.num_heads)
                .map(|_| HeadWeights {
                    query: draw(d, config.head_dim),
                    key: draw(d, config.head_dim),
                    value: draw(d, config.head_dim),
                    output: draw(config.head_dim, d),
                })
                .collect()
        })
        .collect();
    Ok(ToyModel {
        config: config.clone(),
        layers,
        embedding,
    })
}

/// Sinusoidal absolute position encoding.
pub fn positional_encoding(position: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = position as f64 / rate;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl ToyModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadWeights {
        &self.layers[layer][head]
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    /// Multiplies every query and key projection by `factor`, which sharpens
    /// attention by `factor²` in logit space.
    pub fn sharpen(&mut self, factor: f64) {
        for layer in &mut self.layers {
            for head in layer {
                head.query = head.query.scale(factor);
                head.key = head.key.scale(factor);
            }
        }
    }

    /// FNV-1a over the bit patterns of every weight, in storage order.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |m: &Matrix| {
            for v in m.data() {
                for b in v.to_bits().to_le_bytes() {
                    hash ^= u64::from(b);
                    hash = hash.wrapping_mul(0x0100_0000_01b3);
                }
            }
        };
        feed(&self.embedding);
        for layer in &self.layers {
            for h in layer {
                feed(&h.query);
                feed(&h.key);
                feed(&h.value);
                feed(&h.output);
            }
        }
        hash
    }

    fn input(&self, token: usize, position: usize) -> Result<Vec<f64>> {
        if token >= self.config.vocab_size {
            return Err(Error::Input(format!(
                "token {token} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let pe = positional_encoding(position, self.config.model_dim);
        Ok(self.embedding.row(token).iter().zip(pe).map(|(e, p)| e + p).collect())
    }

    fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        self.embedding.iter_rows().map(|e| dot(hidden, e)).collect()
    }

    /// Runs the whole prompt with full causal attention.
    pub fn prefill(&self, tokens: &[usize], window: usize) -> Result<Prefill> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Input("empty token list".into()));
        }
        if window == 0 || window > n {
            return Err(Error::Window { window, len: n });
        }
        let d = self.config.model_dim;
        let mut rows = Vec::with_capacity(n * d);
        for (p, &t) in tokens.iter().enumerate() {
            rows.extend(self.input(t, p)?);
        }
        let mut x = Matrix::from_vec(n, d, rows)?;
        let scale = 1.0 / (self.config.head_dim as f64).sqrt();
        let window_rows: Vec<usize> = (n - window..n).collect();

        let mut states = Vec::with_capacity(self.config.num_layers);
        for (l, heads) in self.layers.iter().enumerate() {
            let mut out = Matrix::zeros(n, d);
            let mut state = LayerState {
                layer: l,
                keys: Vec::new(),
                values: Vec::new(),
                attention: Vec::new(),
                cumulative: Vec::new(),
                y: Vec::new(),
            };
            for w in heads {
                let q = matmul(&x, &w.query)?;
                let k = matmul(&x, &w.key)?;
                let v = matmul(&x, &w.value)?;
                let scores = matmul(&q, &k.transpose())?.scale(scale);
                let attn = causal_softmax(&scores)?;
                let head_out = matmul(&matmul(&attn, &v)?, &w.output)?;
                out = add(&out, &head_out);
                state.cumulative.push(crate::attention::column_sums(&attn));
                state.attention.push(attn.select_rows(&window_rows));
                state.keys.push(k);
                state.values.push(v);
            }
            state.y = out.row(n - 1).to_vec();
            x = add(&x, &out);
            states.push(state);
        }
        let logits = self.logits(x.row(n - 1));
        Ok(Prefill {
            window,
            layers: states,
            logits,
        })
    }

    /// Processes one token at `position` against the given per-layer caches,
    /// appending its keys and values.
    pub fn decode_step(
        &self,
        caches: &mut [KvCache],
        token: usize,
        position: usize,
    ) -> Result<DecodeOutput> {
        if caches.len() != self.config.num_layers {
            return Err(Error::Cache(format!(
                "{} caches for {} layers",
                caches.len(),
                self.config.num_layers
            )));
        }
        for cache in caches.iter() {
            if cache.num_heads() != self.config.num_heads {
                return Err(Error::Cache(format!(
                    "layer {} cache has {} heads",
                    cache.layer(),
                    cache.num_heads()
                )));
            }
            if let Some(last) = cache.last_position() {
                if last >= position {
                    return Err(Error::Cache(format!(
                        "layer {} already holds position {last}, cannot insert {position}",
                        cache.layer()
                    )));
                }
            }
        }
        let mut x = self.input(token, position)?;
        let scale = 1.0 / (self.config.head_dim as f64).sqrt();
        let mut ys = Vec::with_capacity(caches.len());
        let mut attention = Vec::with_capacity(caches.len());
        for (heads, cache) in self.layers.iter().zip(caches.iter_mut()) {
            let mut y = vec![0.0; self.config.model_dim];
            let mut layer_attn = Vec::with_capacity(heads.len());
            for (h, w) in heads.iter().enumerate() {
                let q = w.query.left_mul(&x)?;
                cache.push(
                    h,
                    CacheEntry {
                        position,
                        key: w.key.left_mul(&x)?,
                        value: w.value.left_mul(&x)?,
                    },
                )?;
                let entries = cache.entries(h);
                let scores: Vec<f64> = entries.iter().map(|e| dot(&q, &e.key) * scale).collect();
                let weights = softmax(&scores).ok_or(Error::DegenerateRow { row: 0 })?;
                let mut head_out = vec![0.0; self.config.head_dim];
                for (a, e) in weights.iter().zip(entries) {
                    for (o, v) in head_out.iter_mut().zip(&e.value) {
                        *o += a * v;
                    }
                }
                for (o, p) in y.iter_mut().zip(w.output.left_mul(&head_out)?) {
                    *o += p;
                }
                layer_attn.push(weights);
            }
            for (xi, yi) in x.iter_mut().zip(&y) {
                *xi += yi;
            }
            ys.push(y);
            attention.push(layer_attn);
        }
        Ok(DecodeOutput {
            logits: self.logits(&x),
            ys,
            attention,
        })
    }

    /// Re-runs the final prompt token against caches compressed by
    /// `decisions` (one per layer). Eviction in an upstream layer changes the
    /// residual input of every downstream layer.
    pub fn partial_forward(
        &self,
        tokens: &[usize],
        prefill: &Prefill,
        decisions: &[EvictionDecision],
    ) -> Result<DecodeOutput> {
        let n = tokens.len();
        if n != prefill.len() {
            return Err(Error::Input(format!(
                "{n} tokens for a prefill of length {}",
                prefill.len()
            )));
        }
        if decisions.len() != self.config.num_layers {
            return Err(Error::Cache(format!(
                "{} decisions for {} layers",
                decisions.len(),
                self.config.num_layers
            )));
        }
        let mut caches = prefill
            .caches()
            .iter()
            .zip(decisions)
            .map(|(cache, decision)| {
                let mut evicted = apply_eviction(cache, decision)?;
                evicted.truncate_from(n - 1);
                Ok(evicted)
            })
            .collect::<Result<Vec<_>>>()?;
        self.decode_step(&mut caches, tokens[n - 1], n - 1)
    }
}

/// Row-wise softmax restricted to keys at or before each query; masked
/// entries are exactly zero.
fn causal_softmax(scores: &Matrix) -> Result<Matrix> {
    let n = scores.rows();
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        let row = softmax(&scores.row(i)[..=i]).ok_or(Error::DegenerateRow { row: i })?;
        data.extend(row);
        data.extend(std::iter::repeat_n(0.0, n - i - 1));
    }
    Matrix::from_vec(n, n, data)
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("sum of finite matrices")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig::new(2, 2, 4, 16, 7)
    }

    #[test]
    fn builds_are_deterministic() {
        let a = build_model(&small()).unwrap();
        let b = build_model(&small()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 8;
        assert_ne!(build_model(&other).unwrap().checksum(), a.checksum());
    }

    #[test]
    fn config_validation() {
        assert!(build_model(&ModelConfig::new(1, 1, 4, 8, 0)).is_ok());
        let mut bad = ModelConfig::new(1, 2, 2, 8, 0);
        bad.model_dim = 5;
        assert!(matches!(build_model(&bad), Err(Error::Config(_))));
        assert!(build_model(&ModelConfig::new(0, 1, 4, 8, 0)).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let m = build_model(&small()).unwrap();
        let p = m.prefill(&[3], 1).unwrap();
        for layer in &p.layers {
            for a in &layer.attention {
                assert_eq!(a.data(), &[1.0]);
            }
        }
    }

    #[test]
    fn prefill_rejects_bad_input() {
        let m = build_model(&small()).unwrap();
        assert!(matches!(m.prefill(&[], 1), Err(Error::Input(_))));
        assert!(matches!(m.prefill(&[1, 2], 3), Err(Error::Window { .. })));
        assert!(matches!(m.prefill(&[99], 1), Err(Error::Input(_))));
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let m = build_model(&small()).unwrap();
        let tokens = [1, 5, 2, 9, 9, 0, 3, 14];
        let p = m.prefill(&tokens, 4).unwrap();
        let trace = p.trace();
        for layer in &p.layers {
            for a in &layer.attention {
                for (j, row) in a.iter_rows().enumerate() {
                    let q = trace.query_position(j);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(row[q + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn empty_cache_decode_attends_to_itself() {
        let m = build_model(&small()).unwrap();
        let mut caches: Vec<KvCache> = (0..2).map(|l| KvCache::new(l, 2, 1)).collect();
        let out = m.decode_step(&mut caches, 4, 0).unwrap();
        for layer in &out.attention {
            for head in layer {
                assert_eq!(head, &vec![1.0]);
            }
        }
        assert_eq!(out.logits.len(), 16);
    }

    #[test]
    fn decode_rejects_position_collision() {
        let m = build_model(&small()).unwrap();
        let mut caches: Vec<KvCache> = (0..2).map(|l| KvCache::new(l, 2, 4)).collect();
        m.decode_step(&mut caches, 4, 3).unwrap();
        assert!(matches!(
            m.decode_step(&mut caches, 4, 3),
            Err(Error::Cache(_))
        ));
        // nothing was appended by the rejected step
        assert_eq!(caches[1].positions(0), vec![3]);
    }

    #[test]
    fn keep_all_partial_forward_matches_prefill() {
        let m = build_model(&small()).unwrap();
        let tokens = [1, 5, 2, 9, 9, 0];
        let p = m.prefill(&tokens, 2).unwrap();
        let keep: Vec<_> = (0..2).map(|_| EvictionDecision::keep_all(2, 6)).collect();
        let out = m.partial_forward(&tokens, &p, &keep).unwrap();
        for (a, b) in out.logits.iter().zip(&p.logits) {
            assert!((a - b).abs() < 1e-12);
        }
        for (ya, yb) in out.ys.iter().zip(p.ys()) {
            for (a, b) in ya.iter().zip(yb) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
