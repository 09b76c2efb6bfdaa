use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::lora::{self, LoraAdapter};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Conv2dSpec, Element, Tape, Tensor, Var};

fn normal<S: Element, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Fully connected map over the last axis, `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new<S: Element, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), normal(rng, &[out_dim, in_dim], 0.02))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            in_dim,
            out_dim,
            lora: None,
        })
    }

    pub fn forward<'t, S: Element>(&self, tape: &'t Tape<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        match &self.lora {
            Some(adapter) if !adapter.merged => lora::lora_forward(adapter, self, tape, x),
            _ => x.linear(tape.param(self.weight), self.bias.map(|b| tape.param(b))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Element>(store: &mut ParamStore<S>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), Tensor::ones([dim]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim]))?,
            eps,
        })
    }

    pub fn forward<'t, S: Element>(&self, tape: &'t Tape<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.layer_norm(tape.param(self.weight), tape.param(self.bias), self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Element, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Self> {
        let fan_out = kernel * kernel * out_c / spec.groups;
        let std = (2.0 / fan_out as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal(rng, &[out_c, in_c / spec.groups, kernel, kernel], std),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([out_c]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            kernel,
            spec,
        })
    }

    pub fn forward<'t, S: Element>(&self, tape: &'t Tape<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.conv2d(tape.param(self.weight), self.bias.map(|b| tape.param(b)), self.spec)
    }
}

/// `[B,N,D]` tokens on an `h × w` grid to `[B,D,h,w]`.
pub(crate) fn tokens_to_map<'t, S: Element>(x: Var<'t, S>, h: usize, w: usize) -> Result<Var<'t, S>> {
    let s = x.shape();
    x.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], h, w])
}

/// `[B,D,h,w]` to `[B,h·w,D]` tokens.
pub(crate) fn map_to_tokens<S: Element>(x: Var<'_, S>) -> Result<Var<'_, S>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}
