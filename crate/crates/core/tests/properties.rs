use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zigzag_core::budget::uniform_plan;
use zigzag_core::metrics::{lmba_profile, retained_mass};
use zigzag_core::model::positional_encoding;
use zigzag_core::policy::decide_streaming;
use zigzag_core::trace_io::{generate_synth, load_trace, save_trace, validate_trace, SynthSpec};
use zigzag_core::{build_model, retained_attention_mass, ModelConfig, ToyModel};

/// Window-free attention rows `[layer][head][query][key]`, per-layer `y` and logits.
type Naive = (Vec<Vec<Vec<Vec<f64>>>>, Vec<Vec<f64>>, Vec<f64>);

/// Textbook attention, one query at a time, with no shared helpers.
fn naive_forward(model: &ToyModel, tokens: &[usize]) -> Naive {
    let cfg = model.config();
    let (n, d, dh) = (tokens.len(), cfg.model_dim, cfg.head_dim);
    let proj = |x: &[f64], m: &zigzag_core::Matrix| -> Vec<f64> {
        (0..m.cols()).map(|c| (0..m.rows()).map(|r| x[r] * m.get(r, c)).sum()).collect()
    };
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            let pe = positional_encoding(p, d);
            (0..d).map(|i| model.embedding().get(t, i) + pe[i]).collect()
        })
        .collect();
    let mut attn_all = Vec::new();
    let mut ys = Vec::new();
    for l in 0..cfg.num_layers {
        let mut out = vec![vec![0.0; d]; n];
        let mut layer_attn = Vec::new();
        for h in 0..cfg.num_heads {
            let w = model.head(l, h);
            let q: Vec<Vec<f64>> = x.iter().map(|r| proj(r, &w.query)).collect();
            let k: Vec<Vec<f64>> = x.iter().map(|r| proj(r, &w.key)).collect();
            let v: Vec<Vec<f64>> = x.iter().map(|r| proj(r, &w.value)).collect();
            let mut head_attn = Vec::new();
            for i in 0..n {
                let e: Vec<f64> = (0..=i)
                    .map(|j| ((0..dh).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()).exp())
                    .collect();
                let z: f64 = e.iter().sum();
                let mut a = vec![0.0; n];
                for j in 0..=i {
                    a[j] = e[j] / z;
                }
                let mixed: Vec<f64> = (0..dh).map(|c| (0..n).map(|j| a[j] * v[j][c]).sum()).collect();
                for (o, p) in out[i].iter_mut().zip(proj(&mixed, &w.output)) {
                    *o += p;
                }
                head_attn.push(a);
            }
            layer_attn.push(head_attn);
        }
        ys.push(out[n - 1].clone());
        for (xi, oi) in x.iter_mut().zip(&out) {
            for (a, b) in xi.iter_mut().zip(oi) {
                *a += b;
            }
        }
        attn_all.push(layer_attn);
    }
    let logits = (0..cfg.vocab_size)
        .map(|t| (0..d).map(|i| x[n - 1][i] * model.embedding().get(t, i)).sum())
        .collect();
    (attn_all, ys, logits)
}

#[test]
fn prefill_matches_naive_attention() {
    let model = build_model(&ModelConfig::new(2, 2, 4, 16, 7)).unwrap();
    let tokens = [3, 1, 4, 1, 5, 9];
    let (window, n) = (2, tokens.len());
    let prefill = model.prefill(&tokens, window).unwrap();
    let (attn, ys, logits) = naive_forward(&model, &tokens);
    for (l, state) in prefill.layers.iter().enumerate() {
        for (h, m) in state.attention.iter().enumerate() {
            for r in 0..window {
                for c in 0..n {
                    let want = attn[l][h][n - window + r][c];
                    assert!((m.get(r, c) - want).abs() < 1e-12, "l{l} h{h} ({r},{c})");
                }
            }
        }
        for (a, b) in state.y.iter().zip(&ys[l]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    for (a, b) in prefill.logits.iter().zip(&logits) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn synth_checksums_do_not_collide() {
    let mut seen = HashSet::new();
    for seed in 0..100 {
        let spec = SynthSpec::new(2, 2, 48, 4, seed, vec![3.0, 12.0]);
        assert!(seen.insert(generate_synth(&spec).unwrap().checksum()), "seed {seed}");
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            out[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    out
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn lmba_tracks_concentration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..20 {
        let kappa: Vec<f64> = (0..8).map(|_| rng.gen_range(1.0..64.0)).collect();
        let trace = generate_synth(&SynthSpec::new(8, 4, 128, 8, seed, kappa.clone())).unwrap().trace;
        let lmba = lmba_profile(&trace, 8, 0.1).unwrap();
        let rho = spearman(&kappa, &lmba);
        assert!(rho > 0.8, "seed {seed}: rho {rho} for {kappa:?} vs {lmba:?}");
    }
}

#[test]
fn streaming_never_beats_best_subset() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..30 {
        let len = rng.gen_range(24..96);
        let window = rng.gen_range(1..8);
        let kappa: Vec<f64> = (0..3).map(|_| rng.gen_range(1.0..len as f64)).collect();
        let trace = generate_synth(&SynthSpec::new(3, 2, len, window, seed, kappa)).unwrap().trace;
        let budget = rng.gen_range(5..len);
        let plan = uniform_plan(budget, 3).unwrap();
        let stream = decide_streaming(len, 2, &plan, 4).unwrap();
        let masses = retained_mass(&trace, &stream, window).unwrap();
        for (l, &m) in masses.iter().enumerate() {
            // top-B of the mean row maximizes mean retained mass
            let mut best = 0.0;
            for h in 0..2 {
                let mean_row = trace.mean_row(l, h);
                let top = zigzag_core::tensor::top_k_indices(&mean_row, budget);
                best += retained_attention_mass(&mean_row, &top) / 2.0;
            }
            assert!(m <= best + 1e-12, "layer {l}: streaming {m} > best {best}");
        }
    }
}

#[test]
fn trace_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ndjson");
    let file = generate_synth(&SynthSpec::new(3, 2, 40, 5, 11, vec![1.0, 7.5, 40.0]).with_needles(vec![17], 0.3))
        .unwrap();
    save_trace(&file, &path).unwrap();
    assert!(validate_trace(&path).unwrap().is_empty());
    let loaded = load_trace(&path).unwrap();
    assert_eq!(loaded.trace, file.trace);
    assert_eq!(loaded.checksum(), file.checksum());
}
