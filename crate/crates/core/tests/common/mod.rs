//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waterseg::mask::Mask;
use waterseg::params::ParamStore;
use waterseg::segformer::{EfficientSelfAttention, Linear, ModelConfig};
use waterseg::tensor::Tensor;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `x·Wᵀ + b` row by row with plain loops.
fn dense(store: &ParamStore<f64>, l: &Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = &store.get(l.weight).value;
    let b = l.bias.map(|id| store.get(id).value.clone());
    x.iter()
        .map(|row| {
            (0..l.out_dim)
                .map(|o| {
                    let mut acc = b.as_ref().map_or(0.0, |b| b.data()[o]);
                    for (i, xv) in row.iter().enumerate() {
                        acc += xv * w.data()[o * l.in_dim + i];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Textbook O(N²) multi-head attention over `[B, N, D]` with no key reduction.
pub fn brute_attention(store: &ParamStore<f64>, attn: &EfficientSelfAttention, x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    let dh = d / attn.heads;
    let mut out = Vec::with_capacity(b * n * d);
    for bi in 0..b {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|c| x.at(&[bi, i, c])).collect()).collect();
        let q = dense(store, &attn.q, &rows);
        let k = dense(store, &attn.k, &rows);
        let v = dense(store, &attn.v, &rows);
        let mut ctx = vec![vec![0.0; d]; n];
        for h in 0..attn.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..n {
                    for c in cols.clone() {
                        ctx[i][c] += e[j] / z * v[j][c];
                    }
                }
            }
        }
        for row in dense(store, &attn.proj, &ctx) {
            out.extend(row);
        }
    }
    Tensor::new([b, n, d], out).unwrap()
}

/// Parameter count of a config summed layer by layer from its definition.
pub fn hand_param_count(c: &ModelConfig) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    let ln = |d: usize| 2 * d;
    let mut total = 0;
    let mut in_c = c.in_channels;
    for s in 0..4 {
        let d = c.embed_dims[s];
        let k = c.patch_specs[s].kernel;
        total += d * in_c * k * k + d + ln(d);
        let r = c.sr_ratios[s];
        let hidden = d * c.mlp_ratio;
        let mut block = ln(d) + ln(d) + 4 * lin(d, d);
        if r > 1 {
            block += d * d * r * r + d + ln(d);
        }
        block += lin(d, hidden) + hidden * 9 + hidden + lin(hidden, d);
        total += c.depths[s] * block + ln(d);
        in_c = d;
    }
    let e = c.decoder_dim;
    total += c.embed_dims.iter().map(|&d| lin(d, e)).sum::<usize>();
    total += 4 * e * e + ln(e) + lin(e, c.num_classes);
    total
}

/// Trainable count of q/v adapters of rank `r`: Σ (d·r + r·k) per target.
pub fn hand_lora_qv_count(c: &ModelConfig, r: usize) -> usize {
    (0..4).map(|s| c.depths[s] * 2 * (c.embed_dims[s] * r + r * c.embed_dims[s])).sum()
}
pub mod grad;

pub struct BruteMetrics {
    /// `(tp, fp, fn, tn)`.
    pub counts: (u64, u64, u64, u64),
    /// OA, IoU, precision, recall, F1.
    pub scores: [Option<f64>; 5],
}

/// Per-pixel confusion counts and scores with water as the positive class.
pub fn brute_metrics(pred: &Mask, gt: &Mask) -> BruteMetrics {
    assert_eq!((pred.width(), pred.height()), (gt.width(), gt.height()));
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let p = pred.get(x, y);
            let g = gt.get(x, y);
            if p && g {
                tp += 1;
            } else if p {
                fp += 1;
            } else if g {
                fn_ += 1;
            } else {
                tn += 1;
            }
        }
    }
    let div = |a: u64, b: u64| if b == 0 { None } else { Some(a as f64 / b as f64) };
    BruteMetrics {
        counts: (tp, fp, fn_, tn),
        scores: [
            div(tp + tn, tp + fp + fn_ + tn),
            div(tp, tp + fp + fn_),
            div(tp, tp + fp),
            div(tp, tp + fn_),
            div(2 * tp, 2 * tp + fp + fn_),
        ],
    }
}
