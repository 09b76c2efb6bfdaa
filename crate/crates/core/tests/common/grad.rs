//! Finite-difference cases for every differentiable op, shared by the
//! per-op tests and the acceptance run.

use waterseg::lora::inject_lora;
use waterseg::segformer::{ModelConfig, SegFormer};
use waterseg::tensor::gradcheck::{check_inputs, check_params, GradCheckReport, DEFAULT_STEP};
use waterseg::tensor::{Conv2dSpec, Tensor};

use super::{randn, rng};

pub const TOL: f64 = 1e-4;

pub fn matmul() -> GradCheckReport {
    let mut r = rng(1);
    let inputs = [randn(&mut r, &[3, 4]), randn(&mut r, &[4, 2])];
    check_inputs(&inputs, DEFAULT_STEP, |_, v| v[0].matmul(v[1])).unwrap()
}

pub fn broadcast_matmul() -> GradCheckReport {
    let mut r = rng(2);
    let inputs = [randn(&mut r, &[2, 3, 4]), randn(&mut r, &[4, 5])];
    check_inputs(&inputs, DEFAULT_STEP, |_, v| v[0].matmul(v[1])).unwrap()
}

pub fn linear() -> GradCheckReport {
    let mut r = rng(3);
    let inputs = [randn(&mut r, &[2, 3, 4]), randn(&mut r, &[5, 4]), randn(&mut r, &[5])];
    check_inputs(&inputs, DEFAULT_STEP, |_, v| v[0].linear(v[1], Some(v[2]))).unwrap()
}

pub fn conv2d() -> GradCheckReport {
    let mut r = rng(4);
    let inputs = [randn(&mut r, &[1, 2, 5, 5]), randn(&mut r, &[3, 2, 3, 3]), randn(&mut r, &[3])];
    let spec = Conv2dSpec {
        stride: 2,
        padding: 1,
        groups: 1,
    };
    check_inputs(&inputs, DEFAULT_STEP, |_, v| v[0].conv2d(v[1], Some(v[2]), spec)).unwrap()
}

pub fn depthwise_conv2d() -> GradCheckReport {
    let mut r = rng(5);
    let inputs = [randn(&mut r, &[2, 4, 4, 5]), randn(&mut r, &[4, 1, 3, 3]), randn(&mut r, &[4])];
    let spec = Conv2dSpec {
        stride: 1,
        padding: 1,
        groups: 4,
    };
    check_inputs(&inputs, DEFAULT_STEP, |_, v| v[0].conv2d(v[1], Some(v[2]), spec)).unwrap()
}

pub fn layer_norm() -> GradCheckReport {
    let mut r = rng(6);
    let inputs = [randn(&mut r, &[3, 6]), randn(&mut r, &[6]), randn(&mut r, &[6])];
    check_inputs(&inputs, DEFAULT_STEP, |_, v| v[0].layer_norm(v[1], v[2], 1e-6)).unwrap()
}

pub fn softmax() -> GradCheckReport {
    let inputs = [randn(&mut rng(7), &[4, 5])];
    check_inputs(&inputs, DEFAULT_STEP, |_, v| Ok(v[0].softmax())).unwrap()
}

pub fn gelu() -> GradCheckReport {
    let inputs = [randn(&mut rng(7), &[4, 5])];
    check_inputs(&inputs, DEFAULT_STEP, |_, v| Ok(v[0].scale(2.0).gelu())).unwrap()
}

pub fn upsample() -> GradCheckReport {
    let inputs = [randn(&mut rng(8), &[1, 2, 3, 4])];
    check_inputs(&inputs, DEFAULT_STEP, |_, v| v[0].upsample_bilinear(7, 9)).unwrap()
}

/// concat, permute, reshape, transpose, mul, sub, add, scale, sum and mean.
pub fn shape_ops() -> GradCheckReport {
    let mut r = rng(9);
    let inputs = [randn(&mut r, &[2, 3, 4]), randn(&mut r, &[2, 1, 4])];
    check_inputs(&inputs, DEFAULT_STEP, |tape, v| {
        let c = tape.concat(&[v[0], v[1]], 1)?;
        let p = c.permute(&[2, 0, 1])?.reshape(&[4, 8])?;
        let q = p.transpose(0, 1)?;
        let s = q.mul(q)?.sub(q.scale(0.5))?.add(q)?;
        s.mean().add(s.sum().scale(0.1))
    })
    .unwrap()
}

pub fn bce() -> GradCheckReport {
    let z = randn(&mut rng(10), &[1, 1, 4, 4]).map(|v| v * 3.0);
    let target = Tensor::new([1, 1, 4, 4], (0..16).map(|i| f64::from((i * 7 % 3 == 0) as u8)).collect()).unwrap();
    check_inputs(&[z], DEFAULT_STEP, |_, v| v[0].bce_with_logits(&target)).unwrap()
}

fn nano_case(lora: bool) -> GradCheckReport {
    let mut model = SegFormer::<f64>::new(ModelConfig::nano(), 9).unwrap();
    if lora {
        inject_lora(&mut model, &["attn.q".to_string(), "attn.v".to_string()], 2, 4.0, 3).unwrap();
        // Non-zero B so gradients reach A.
        let mut r = rng(12);
        for (_, p) in model.params_mut().iter_mut().filter(|(_, p)| p.name.ends_with("lora_b")) {
            p.value = randn(&mut r, p.value.shape()).map(|v| v * 0.1);
        }
    }
    let x = randn(&mut rng(9), &[1, 3, 32, 32]);
    let target = Tensor::new([1, 1, 32, 32], (0..1024).map(|i| f64::from((i / 32 + i % 32) % 3 == 0)).collect()).unwrap();
    let mut store = model.params().clone();
    check_params(&mut store, DEFAULT_STEP, Some(3), 17, |tape| {
        model.forward(tape, tape.constant(x.clone()))?.bce_with_logits(&target)
    })
    .unwrap()
}

/// Every trainable nano parameter tensor, three entries each.
pub fn nano_end_to_end() -> GradCheckReport {
    nano_case(false)
}

/// The nano model with q/v adapters; only adapter tensors are trainable.
pub fn nano_lora() -> GradCheckReport {
    nano_case(true)
}

pub fn all() -> Vec<(&'static str, GradCheckReport)> {
    vec![
        ("matmul", matmul()),
        ("broadcast matmul", broadcast_matmul()),
        ("linear", linear()),
        ("conv2d", conv2d()),
        ("depthwise conv2d", depthwise_conv2d()),
        ("layer_norm", layer_norm()),
        ("softmax", softmax()),
        ("gelu", gelu()),
        ("bilinear upsample", upsample()),
        ("shape and elementwise ops", shape_ops()),
        ("bce with logits", bce()),
        ("nano end to end", nano_end_to_end()),
        ("nano with adapters", nano_lora()),
    ]
}
