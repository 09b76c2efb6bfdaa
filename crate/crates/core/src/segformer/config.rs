use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::conv_output_size;

/// Kernel/stride/padding of an overlapped patch-embedding convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchSpec {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }
}

pub const STAGES: usize = 4;

/// Architecture hyperparameters of the encoder-decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub embed_dims: [usize; STAGES],
    pub depths: [usize; STAGES],
    pub num_heads: [usize; STAGES],
    pub sr_ratios: [usize; STAGES],
    #[serde(default = "default_patch_specs")]
    pub patch_specs: [PatchSpec; STAGES],
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_in_channels() -> usize {
    3
}
fn default_num_classes() -> usize {
    1
}
fn default_eps() -> f64 {
    1e-6
}
fn default_patch_specs() -> [PatchSpec; STAGES] {
    [
        PatchSpec::new(7, 4, 3),
        PatchSpec::new(3, 2, 1),
        PatchSpec::new(3, 2, 1),
        PatchSpec::new(3, 2, 1),
    ]
}

impl ModelConfig {
    /// Small test configuration.
    pub fn nano() -> Self {
        Self {
            in_channels: 3,
            embed_dims: [16, 32, 64, 128],
            depths: [1, 1, 1, 1],
            num_heads: [1, 2, 4, 8],
            sr_ratios: [8, 4, 2, 1],
            patch_specs: default_patch_specs(),
            mlp_ratio: 4,
            decoder_dim: 64,
            num_classes: 1,
            layer_norm_eps: 1e-6,
        }
    }

    /// Demo configuration with MiT-b0 widths.
    pub fn b0_like() -> Self {
        Self {
            embed_dims: [32, 64, 160, 256],
            depths: [2, 2, 2, 2],
            num_heads: [1, 2, 5, 8],
            decoder_dim: 256,
            ..Self::nano()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "nano" => Ok(Self::nano()),
            "b0-like" | "b0_like" | "b0" => Ok(Self::b0_like()),
            other => Err(config_err!("unknown model config {other:?} (expected \"nano\" or \"b0-like\")")),
        }
    }

    /// Total downsampling factor of the encoder's deepest stage.
    pub fn total_stride(&self) -> usize {
        self.patch_specs.iter().map(|p| p.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.mlp_ratio == 0 || self.decoder_dim == 0 {
            return Err(config_err!("in_channels, mlp_ratio and decoder_dim must be positive"));
        }
        if self.num_classes != 1 {
            return Err(config_err!("only the binary head (num_classes = 1) is supported, got {}", self.num_classes));
        }
        for i in 0..STAGES {
            let (d, h) = (self.embed_dims[i], self.num_heads[i]);
            if d == 0 || h == 0 || self.depths[i] == 0 || self.sr_ratios[i] == 0 {
                return Err(config_err!("stage {i}: dims, heads, depths and sr_ratios must be positive"));
            }
            if d % h != 0 {
                return Err(config_err!("stage {i}: embed dim {d} not divisible by {h} heads"));
            }
            let p = self.patch_specs[i];
            if p.kernel <= p.stride {
                return Err(config_err!(
                    "stage {i}: patch kernel {} must exceed stride {} for overlapping patches",
                    p.kernel,
                    p.stride
                ));
            }
            let want = if i == 0 { 4 } else { 2 };
            if p.stride != want {
                return Err(config_err!("stage {i}: patch stride must be {want}, got {}", p.stride));
            }
        }
        Ok(())
    }

    /// Spatial sides of the four stage outputs for an input of `h × w`.
    pub fn stage_sides(&self, h: usize, w: usize) -> Result<[(usize, usize); STAGES]> {
        let m = self.total_stride();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(shape_err!("input sides must be positive multiples of {m}, got {h}x{w}"));
        }
        let mut sides = [(0, 0); STAGES];
        let (mut ch, mut cw) = (h, w);
        for (i, side) in sides.iter_mut().enumerate() {
            let p = self.patch_specs[i];
            ch = conv_output_size(ch, p.kernel, p.stride, p.padding).ok_or_else(|| shape_err!("stage {i} collapses"))?;
            cw = conv_output_size(cw, p.kernel, p.stride, p.padding).ok_or_else(|| shape_err!("stage {i} collapses"))?;
            let r = self.sr_ratios[i];
            if ch % r != 0 || cw % r != 0 {
                return Err(shape_err!(
                    "stage {i}: reduction ratio {r} does not divide spatial size {ch}x{cw}"
                ));
            }
            *side = (ch, cw);
        }
        Ok(sides)
    }
}
