mod common;

use common::grad::{self, TOL};
use common::randn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use waterseg::tensor::gradcheck::GradCheckReport;
use waterseg::tensor::{Conv2dSpec, Tape, Tensor};

fn assert_ok(name: &str, report: GradCheckReport) {
    assert!(
        report.max_rel_error < TOL,
        "{name}: max rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
    assert!(report.checked > 0);
}

#[test]
fn matmul_grad() {
    assert_ok("matmul", grad::matmul());
}

#[test]
fn broadcast_matmul_grad() {
    assert_ok("broadcast_matmul", grad::broadcast_matmul());
}

#[test]
fn linear_grad() {
    assert_ok("linear", grad::linear());
}

#[test]
fn conv2d_grad() {
    assert_ok("conv2d", grad::conv2d());
}

#[test]
fn depthwise_conv2d_grad() {
    assert_ok("depthwise_conv2d", grad::depthwise_conv2d());
}

#[test]
fn layer_norm_grad() {
    assert_ok("layer_norm", grad::layer_norm());
}

#[test]
fn softmax_grad() {
    assert_ok("softmax", grad::softmax());
}

#[test]
fn gelu_grad() {
    assert_ok("gelu", grad::gelu());
}

#[test]
fn upsample_grad() {
    assert_ok("upsample", grad::upsample());
}

#[test]
fn shape_ops_grad() {
    assert_ok("shape_ops", grad::shape_ops());
}

#[test]
fn bce_grad() {
    assert_ok("bce", grad::bce());
}

#[test]
fn nano_lora_grad() {
    let r = grad::nano_lora();
    assert!(r.worst.as_ref().is_some_and(|w| w.0.ends_with("lora_a") || w.0.ends_with("lora_b")));
    assert_ok("nano with adapters", r);
}

#[test]
fn upsample_matches_hand_grid() {
    // align-corners=false taps for 2 -> 4 are [1,0], [.75,.25], [.25,.75], [0,1].
    let expect = [
        [0.0, 0.25, 0.75, 1.0],
        [0.5, 0.75, 1.25, 1.5],
        [1.5, 1.75, 2.25, 2.5],
        [2.0, 2.25, 2.75, 3.0],
    ];
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let y = x.upsample_bilinear(4, 4).unwrap().value();
    for (r, row) in expect.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            assert!((y.at(&[0, 0, r, c]) - v).abs() < 1e-12, "({r},{c})");
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tape = Tape::new();
    let logits = randn(&mut rng, &[8, 33]).map(|v| v * 20.0);
    let y = tape.constant(logits.cast::<f32>()).softmax().value();
    for row in y.data().chunks(33) {
        let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v > 0.0 && v < 1.0) || row.contains(&1.0));
    }
}

#[test]
fn tape_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tape = Tape::new();
        let x = tape.leaf(randn(&mut rng, &[2, 3, 6, 6]).cast::<f32>(), true);
        let w = tape.leaf(randn(&mut rng, &[4, 3, 3, 3]).cast::<f32>(), true);
        let y = x.conv2d(w, None, Conv2dSpec { stride: 2, padding: 1, groups: 1 }).unwrap();
        let loss = y.gelu().mean();
        tape.backward(loss).unwrap();
        let bits = |t: Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        (bits((*loss.value()).clone()), bits(tape.grad(x).unwrap()), bits(tape.grad(w).unwrap()))
    };
    assert_eq!(run(), run());
}
