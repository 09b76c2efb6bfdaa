//! Low-rank adapters on linear layers.
//!
//! An adapted layer computes `x·W₀ᵀ + b + (α/r)·(x·Aᵀ)·Bᵀ` with `A: [r, k]`
//! and `B: [d, r]`. `B` starts at zero so injection leaves the model's output
//! unchanged. Everything outside the adapters is frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::segformer::{Linear, SegFormer};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const DEFAULT_TARGETS: [&str; 2] = ["attn.q", "attn.v"];

/// Adapter settings as they appear in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub enabled: bool,
    /// Name suffixes of the linear layers to adapt.
    pub targets: Vec<String>,
    pub rank: usize,
    /// Defaults to `2·rank` when absent.
    pub alpha: Option<f64>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            targets: DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect(),
            rank: 4,
            alpha: None,
        }
    }
}

impl LoraConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(2.0 * self.rank as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// Name of the adapted linear layer.
    pub target: String,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub merged: bool,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Per-target record of an injection, with any warnings raised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub targets: Vec<AdaptedLayer>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptedLayer {
    pub name: String,
    pub out_dim: usize,
    pub in_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainableReport {
    pub trainable: usize,
    pub frozen: usize,
    pub ratio: f64,
}

pub fn matches_target(name: &str, selectors: &[String]) -> bool {
    selectors
        .iter()
        .any(|s| name == s || (name.len() > s.len() && name.ends_with(s.as_str()) && name[..name.len() - s.len()].ends_with('.')))
}

/// The unmerged adapted forward. Never materializes `B·A`.
pub fn lora_forward<'t, S: Element>(
    adapter: &LoraAdapter,
    layer: &Linear,
    tape: &'t Tape<'t, S>,
    x: Var<'t, S>,
) -> Result<Var<'t, S>> {
    if adapter.merged {
        return Err(Error::State(format!(
            "adapter on {} is merged; the unmerged path is unavailable",
            adapter.target
        )));
    }
    let base = x.linear(tape.param(layer.weight), layer.bias.map(|b| tape.param(b)))?;
    let low = x.linear(tape.param(adapter.a), None)?.linear(tape.param(adapter.b), None)?;
    base.add(low.scale(adapter.scaling()))
}

/// Wraps every linear layer whose name matches `selectors` and freezes all
/// other parameters. `A` is drawn from N(0, 0.02²) with `seed`, `B` is zero.
pub fn inject_lora<S: Element>(
    model: &mut SegFormer<S>,
    selectors: &[String],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<InjectionReport> {
    if rank == 0 {
        return Err(config_err!("LoRA rank must be at least 1"));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(config_err!("LoRA alpha must be positive, got {alpha}"));
    }
    let (layers, store) = model.linears_mut();
    let mut targets: Vec<&mut Linear> = layers.into_iter().filter(|l| matches_target(&l.name, selectors)).collect();
    if targets.is_empty() {
        return Err(config_err!("LoRA selector {selectors:?} matches no linear layer"));
    }
    if let Some(l) = targets.iter().find(|l| l.lora.is_some()) {
        return Err(Error::State(format!("layer {} already carries an adapter", l.name)));
    }
    store.set_all_requires_grad(false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("positive std");
    let mut report = InjectionReport {
        targets: Vec::new(),
        warnings: Vec::new(),
    };
    for layer in targets.iter_mut() {
        let (d, k) = (layer.out_dim, layer.in_dim);
        if rank >= d.min(k) {
            let msg = format!("rank {rank} on {} ({d}x{k}) gives no compression", layer.name);
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
        let a_data = (0..rank * k).map(|_| S::from_f64(normal.sample(&mut rng))).collect();
        let a = store.add(format!("{}.lora_a", layer.name), Tensor::new([rank, k], a_data)?)?;
        let b = store.add(format!("{}.lora_b", layer.name), Tensor::zeros([d, rank]))?;
        layer.lora = Some(LoraAdapter {
            target: layer.name.clone(),
            a,
            b,
            rank,
            alpha,
            merged: false,
        });
        report.targets.push(AdaptedLayer {
            name: layer.name.clone(),
            out_dim: d,
            in_dim: k,
        });
    }
    Ok(report)
}

/// `(α/r)·B·A` as a dense `[d, k]` buffer in f64.
fn delta<S: Element>(adapter: &LoraAdapter, store: &ParamStore<S>) -> Vec<f64> {
    let a = &store.get(adapter.a).value;
    let b = &store.get(adapter.b).value;
    let (r, k) = (a.shape()[0], a.shape()[1]);
    let d = b.shape()[0];
    let s = adapter.scaling();
    let mut out = vec![0.0; d * k];
    for i in 0..d {
        let row = &mut out[i * k..(i + 1) * k];
        for p in 0..r {
            let bip = b.data()[i * r + p].as_f64() * s;
            if bip == 0.0 {
                continue;
            }
            for (o, av) in row.iter_mut().zip(&a.data()[p * k..(p + 1) * k]) {
                *o += bip * av.as_f64();
            }
        }
    }
    out
}

fn apply_delta<S: Element>(layer: &Linear, adapter: &LoraAdapter, store: &mut ParamStore<S>, sign: f64) {
    let dw = delta(adapter, store);
    let w = store.get_mut(layer.weight).value.data_mut();
    for (wv, dv) in w.iter_mut().zip(dw) {
        if dv != 0.0 {
            *wv = S::from_f64(wv.as_f64() + sign * dv);
        }
    }
}

/// Folds one adapter into its base weight.
pub fn merge<S: Element>(layer: &mut Linear, store: &mut ParamStore<S>) -> Result<()> {
    let Some(adapter) = layer.lora.as_mut() else {
        return Err(Error::State(format!("layer {} has no adapter", layer.name)));
    };
    if adapter.merged {
        return Err(Error::State(format!("adapter on {} is already merged", layer.name)));
    }
    adapter.merged = true;
    let adapter = adapter.clone();
    apply_delta(layer, &adapter, store, 1.0);
    Ok(())
}

/// Subtracts a merged adapter back out of its base weight.
pub fn unmerge<S: Element>(layer: &mut Linear, store: &mut ParamStore<S>) -> Result<()> {
    let Some(adapter) = layer.lora.as_mut() else {
        return Err(Error::State(format!("layer {} has no adapter", layer.name)));
    };
    if !adapter.merged {
        return Err(Error::State(format!("adapter on {} is not merged", layer.name)));
    }
    adapter.merged = false;
    let adapter = adapter.clone();
    apply_delta(layer, &adapter, store, -1.0);
    Ok(())
}

pub fn merge_all<S: Element>(model: &mut SegFormer<S>) -> Result<usize> {
    let (layers, store) = model.linears_mut();
    let mut n = 0;
    for layer in layers.into_iter().filter(|l| l.lora.is_some()) {
        merge(layer, store)?;
        n += 1;
    }
    Ok(n)
}

pub fn unmerge_all<S: Element>(model: &mut SegFormer<S>) -> Result<usize> {
    let (layers, store) = model.linears_mut();
    let mut n = 0;
    for layer in layers.into_iter().filter(|l| l.lora.is_some()) {
        unmerge(layer, store)?;
        n += 1;
    }
    Ok(n)
}

pub fn adapters<S: Element>(model: &SegFormer<S>) -> Vec<LoraAdapter> {
    model.linears().into_iter().filter_map(|l| l.lora.clone()).collect()
}

pub fn trainable_param_report<S: Element>(store: &ParamStore<S>) -> TrainableReport {
    let trainable = store.count(true);
    let frozen = store.count(false) - trainable;
    let total = trainable + frozen;
    TrainableReport {
        trainable,
        frozen,
        ratio: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
    }
}
