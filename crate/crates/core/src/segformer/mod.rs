//! Hierarchical Mix-Transformer encoder with an all-MLP decoder.
//!
//! Four stages each start with an overlapped patch embedding (strided
//! convolution with kernel > stride) and produce features at 1/4, 1/8, 1/16
//! and 1/32 of the input side. Self-attention reduces keys and values by an
//! `R × R` strided convolution. The feed-forward sublayer carries a 3×3
//! depthwise convolution, which is the only source of positional information:
//! the model has no position-indexed parameters and runs at any input side
//! that is a multiple of 32.
//!
//! The decoder projects every stage to a common width with linear layers,
//! resizes to the 1/4 grid, concatenates, fuses with one more linear layer and
//! predicts a single water logit per pixel.

mod config;
mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, PatchSpec, STAGES};
pub use layers::{Conv2d, LayerNorm, Linear};

use crate::error::{config_err, shape_err, Result};
use crate::params::ParamStore;
use crate::tensor::{Conv2dSpec, Element, Tape, Tensor, Var};
use layers::{map_to_tokens, tokens_to_map};

#[derive(Clone, Debug)]
pub struct OverlapPatchEmbed {
    pub proj: Conv2d,
    pub norm: LayerNorm,
    pub spec: PatchSpec,
}

impl OverlapPatchEmbed {
    /// Returns `[B, H'·W', D]` tokens and the new grid size.
    pub fn forward<'t, S: Element>(&self, tape: &'t Tape<'t, S>, x: Var<'t, S>) -> Result<(Var<'t, S>, usize, usize)> {
        let y = self.proj.forward(tape, x)?;
        let s = y.shape();
        let tokens = self.norm.forward(tape, map_to_tokens(y)?)?;
        Ok((tokens, s[2], s[3]))
    }
}

/// Multi-head attention whose keys/values come from a spatially reduced grid.
#[derive(Clone, Debug)]
pub struct EfficientSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub sr: Option<(Conv2d, LayerNorm)>,
    pub heads: usize,
    pub dim: usize,
    pub sr_ratio: usize,
}

impl EfficientSelfAttention {
    pub fn new<S: Element, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        eps: f64,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(config_err!("{name}: width {dim} not divisible by {heads} heads"));
        }
        if sr_ratio == 0 {
            return Err(config_err!("{name}: reduction ratio must be positive"));
        }
        let q = Linear::new(store, rng, &format!("{name}.q"), dim, dim, true)?;
        let k = Linear::new(store, rng, &format!("{name}.k"), dim, dim, true)?;
        let v = Linear::new(store, rng, &format!("{name}.v"), dim, dim, true)?;
        let proj = Linear::new(store, rng, &format!("{name}.proj"), dim, dim, true)?;
        let sr = if sr_ratio > 1 {
            let spec = Conv2dSpec {
                stride: sr_ratio,
                padding: 0,
                groups: 1,
            };
            let conv = Conv2d::new(store, rng, &format!("{name}.sr"), dim, dim, sr_ratio, spec, true)?;
            Some((conv, LayerNorm::new(store, &format!("{name}.sr_norm"), dim, eps)?))
        } else {
            None
        };
        Ok(Self {
            q,
            k,
            v,
            proj,
            sr,
            heads,
            dim,
            sr_ratio,
        })
    }

    pub fn forward<'t, S: Element>(
        &self,
        tape: &'t Tape<'t, S>,
        x: Var<'t, S>,
        h: usize,
        w: usize,
    ) -> Result<Var<'t, S>> {
        Ok(self.forward_with_weights(tape, x, h, w)?.0)
    }

    /// Also returns the `[B, heads, N, N/R²]` attention weights.
    pub fn forward_with_weights<'t, S: Element>(
        &self,
        tape: &'t Tape<'t, S>,
        x: Var<'t, S>,
        h: usize,
        w: usize,
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        if n != h * w || d != self.dim {
            return Err(shape_err!("attention input {s:?} does not match grid {h}x{w} and width {}", self.dim));
        }
        let r = self.sr_ratio;
        if !h.is_multiple_of(r) || !w.is_multiple_of(r) {
            return Err(shape_err!("reduction ratio {r} does not divide grid {h}x{w}"));
        }
        let dh = d / self.heads;
        let q = self
            .q
            .forward(tape, x)?
            .reshape(&[b, n, self.heads, dh])?
            .permute(&[0, 2, 1, 3])?;
        let kv_src = match &self.sr {
            Some((conv, norm)) => {
                let reduced = conv.forward(tape, tokens_to_map(x, h, w)?)?;
                norm.forward(tape, map_to_tokens(reduced)?)?
            }
            None => x,
        };
        let m = kv_src.shape()[1];
        let kt = self
            .k
            .forward(tape, kv_src)?
            .reshape(&[b, m, self.heads, dh])?
            .permute(&[0, 2, 3, 1])?;
        let v = self
            .v
            .forward(tape, kv_src)?
            .reshape(&[b, m, self.heads, dh])?
            .permute(&[0, 2, 1, 3])?;
        let weights = q.matmul(kt)?.scale(1.0 / (dh as f64).sqrt()).softmax();
        let ctx = weights.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, d])?;
        Ok((self.proj.forward(tape, ctx)?, weights))
    }
}

/// Feed-forward sublayer with a 3×3 depthwise convolution between the linears.
#[derive(Clone, Debug)]
pub struct MixFfn {
    pub fc1: Linear,
    pub dwconv: Conv2d,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new<S: Element, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dim: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let hidden = dim * mlp_ratio;
        let spec = Conv2dSpec {
            stride: 1,
            padding: 1,
            groups: hidden,
        };
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, true)?,
            dwconv: Conv2d::new(store, rng, &format!("{name}.dwconv"), hidden, hidden, 3, spec, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward<'t, S: Element>(
        &self,
        tape: &'t Tape<'t, S>,
        x: Var<'t, S>,
        h: usize,
        w: usize,
    ) -> Result<Var<'t, S>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != h * w {
            return Err(shape_err!("mix-ffn input {s:?} does not match grid {h}x{w}"));
        }
        let hidden = self.fc1.forward(tape, x)?;
        let spatial = self.dwconv.forward(tape, tokens_to_map(hidden, h, w)?)?;
        self.fc2.forward(tape, map_to_tokens(spatial)?.gelu())
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: EfficientSelfAttention,
    pub norm2: LayerNorm,
    pub ffn: MixFfn,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Element, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        mlp_ratio: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, eps)?,
            attn: EfficientSelfAttention::new(store, rng, &format!("{name}.attn"), dim, heads, sr_ratio, eps)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, eps)?,
            ffn: MixFfn::new(store, rng, &format!("{name}.ffn"), dim, mlp_ratio)?,
        })
    }

    pub fn forward<'t, S: Element>(
        &self,
        tape: &'t Tape<'t, S>,
        x: Var<'t, S>,
        h: usize,
        w: usize,
    ) -> Result<Var<'t, S>> {
        let x = x.add(self.attn.forward(tape, self.norm1.forward(tape, x)?, h, w)?)?;
        x.add(self.ffn.forward(tape, self.norm2.forward(tape, x)?, h, w)?)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub patch_embed: OverlapPatchEmbed,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub proj: Vec<Linear>,
    pub fuse: Linear,
    pub fuse_norm: LayerNorm,
    pub head: Linear,
}

/// One row of the layer inventory printed by `summary`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub shape: Vec<usize>,
    pub numel: usize,
    pub trainable: bool,
}

/// The assembled encoder-decoder together with its parameters.
#[derive(Clone, Debug)]
pub struct SegFormer<S> {
    config: ModelConfig,
    params: ParamStore<S>,
    stages: Vec<Stage>,
    decoder: Decoder,
}

impl<S: Element> SegFormer<S> {
    /// Builds a randomly initialized model. Initial values are drawn in
    /// `f64` so the same seed gives the same weights in either precision.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let eps = config.layer_norm_eps;
        let mut stages = Vec::with_capacity(STAGES);
        let mut in_c = config.in_channels;
        for i in 0..STAGES {
            let d = config.embed_dims[i];
            let p = config.patch_specs[i];
            let pre = format!("stage{i}");
            let patch_embed = OverlapPatchEmbed {
                proj: Conv2d::new(
                    &mut store,
                    &mut rng,
                    &format!("{pre}.patch_embed.proj"),
                    in_c,
                    d,
                    p.kernel,
                    Conv2dSpec {
                        stride: p.stride,
                        padding: p.padding,
                        groups: 1,
                    },
                    true,
                )?,
                norm: LayerNorm::new(&mut store, &format!("{pre}.patch_embed.norm"), d, eps)?,
                spec: p,
            };
            let mut blocks = Vec::with_capacity(config.depths[i]);
            for j in 0..config.depths[i] {
                let bp = format!("{pre}.block{j}");
                let (heads, r) = (config.num_heads[i], config.sr_ratios[i]);
                blocks.push(Block::new(&mut store, &mut rng, &bp, d, heads, r, config.mlp_ratio, eps)?);
            }
            let norm = LayerNorm::new(&mut store, &format!("{pre}.norm"), d, eps)?;
            stages.push(Stage {
                patch_embed,
                blocks,
                norm,
            });
            in_c = d;
        }
        let c = config.decoder_dim;
        let proj = (0..STAGES)
            .map(|i| Linear::new(&mut store, &mut rng, &format!("decoder.linear_c{}", i + 1), config.embed_dims[i], c, true))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder {
            proj,
            fuse: Linear::new(&mut store, &mut rng, "decoder.fuse", STAGES * c, c, false)?,
            fuse_norm: LayerNorm::new(&mut store, "decoder.fuse_norm", c, eps)?,
            head: Linear::new(&mut store, &mut rng, "decoder.head", c, config.num_classes, true)?,
        };
        Ok(Self {
            config,
            params: store,
            stages,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Four `[B, Dᵢ, hᵢ, wᵢ]` feature maps at strides 4, 8, 16, 32.
    pub fn encoder_forward<'t>(&self, tape: &'t Tape<'t, S>, x: Var<'t, S>) -> Result<Vec<Var<'t, S>>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(shape_err!(
                "encoder expects [B,{},H,W] input, got {s:?}",
                self.config.in_channels
            ));
        }
        self.config.stage_sides(s[2], s[3])?;
        let mut feats = Vec::with_capacity(STAGES);
        let mut cur = x;
        for stage in &self.stages {
            let (mut tokens, h, w) = stage.patch_embed.forward(tape, cur)?;
            for block in &stage.blocks {
                tokens = block.forward(tape, tokens, h, w)?;
            }
            let tokens = stage.norm.forward(tape, tokens)?;
            cur = tokens_to_map(tokens, h, w)?;
            feats.push(cur);
        }
        Ok(feats)
    }

    /// `[B, 1, H/4, W/4]` logits from the four encoder maps.
    pub fn decoder_forward<'t>(&self, tape: &'t Tape<'t, S>, feats: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        if feats.len() != STAGES {
            return Err(config_err!("decoder needs {STAGES} feature maps, got {}", feats.len()));
        }
        for (i, f) in feats.iter().enumerate() {
            let s = f.shape();
            if s.len() != 4 || s[1] != self.config.embed_dims[i] {
                return Err(config_err!(
                    "feature map {i} has shape {s:?}, expected width {}",
                    self.config.embed_dims[i]
                ));
            }
        }
        let s0 = feats[0].shape();
        let (b, h, w) = (s0[0], s0[2], s0[3]);
        let mut projected = Vec::with_capacity(STAGES);
        for (f, lin) in feats.iter().zip(&self.decoder.proj).rev() {
            let s = f.shape();
            let y = tokens_to_map(lin.forward(tape, map_to_tokens(*f)?)?, s[2], s[3])?;
            let y = if (s[2], s[3]) == (h, w) {
                y
            } else {
                y.upsample_bilinear(h, w)?
            };
            projected.push(y);
        }
        let fused = tape.concat(&projected, 1)?.permute(&[0, 2, 3, 1])?;
        let fused = self.decoder.fuse.forward(tape, fused)?;
        let fused = self.decoder.fuse_norm.forward(tape, fused)?.gelu();
        let logits = self.decoder.head.forward(tape, fused)?;
        debug_assert_eq!(logits.shape(), vec![b, h, w, self.config.num_classes]);
        logits.permute(&[0, 3, 1, 2])
    }

    /// Full-resolution `[B, 1, H, W]` logits.
    pub fn forward<'t>(&self, tape: &'t Tape<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let s = x.shape();
        let feats = self.encoder_forward(tape, x)?;
        self.decoder_forward(tape, &feats)?.upsample_bilinear(s[2], s[3])
    }

    /// Logits without gradient tracking.
    pub fn predict_logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::inference(&self.params);
        let out = self.forward(&tape, tape.constant(x.clone()))?;
        Ok((*out.value()).clone())
    }

    pub fn param_count(&self, trainable_only: bool) -> usize {
        self.params.count(trainable_only)
    }

    /// Every parameter tensor in construction order.
    pub fn summary(&self) -> Vec<ParamSummary> {
        self.params
            .iter()
            .map(|(_, p)| ParamSummary {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                numel: p.value.numel(),
                trainable: p.requires_grad,
            })
            .collect()
    }

    /// Every linear layer with a mutable handle on the parameter store.
    pub fn linears_mut(&mut self) -> (Vec<&mut Linear>, &mut ParamStore<S>) {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                let a = &mut block.attn;
                out.extend([&mut a.q, &mut a.k, &mut a.v, &mut a.proj]);
                out.extend([&mut block.ffn.fc1, &mut block.ffn.fc2]);
            }
        }
        out.extend(self.decoder.proj.iter_mut());
        out.push(&mut self.decoder.fuse);
        out.push(&mut self.decoder.head);
        (out, &mut self.params)
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut out = Vec::new();
        for stage in &self.stages {
            for block in &stage.blocks {
                let a = &block.attn;
                out.extend([&a.q, &a.k, &a.v, &a.proj]);
                out.extend([&block.ffn.fc1, &block.ffn.fc2]);
            }
        }
        out.extend(self.decoder.proj.iter());
        out.push(&self.decoder.fuse);
        out.push(&self.decoder.head);
        out
    }

    /// Copies parameter values into another precision.
    pub fn cast<T: Element>(&self) -> SegFormer<T> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            let id = params.add(p.name.clone(), p.value.cast()).expect("unique names");
            params.get_mut(id).requires_grad = p.requires_grad;
        }
        SegFormer {
            config: self.config.clone(),
            params,
            stages: self.stages.clone(),
            decoder: self.decoder.clone(),
        }
    }
}
