//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of the backward rules it is used to check. Run it in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::params::ParamStore;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Denominator floor: entries whose true gradient is below this are judged
/// on absolute error scaled by the floor.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(label, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = relative_error(analytic, numeric);
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((label.to_string(), index, analytic, numeric));
        }
    }
}

/// Reduces a non-scalar output to `Σ out ⊙ R` with fixed pseudo-random `R`.
fn project<'t>(tape: &'t Tape<'t, f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    if out.value().numel() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = tape.constant(Tensor::new(shape, r)?);
    Ok(out.mul(r)?.sum())
}

fn scalar_of<'t>(tape: &'t Tape<'t, f64>, out: Var<'t, f64>, seed: u64) -> Result<f64> {
    Ok(project(tape, out, seed)?.value().data()[0])
}

/// Checks `f` against finite differences with respect to every element of
/// every input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    const SEED: u64 = 0x5eed;
    let tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &leaves)?;
    let loss = project(&tape, out, SEED)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(l, t)| tape.grad(*l).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &leaves)?;
        scalar_of(&tape, out, SEED)
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(&format!("input{i}"), j, grad.data()[j], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to trainable parameters of `store`.
///
/// `per_param` limits how many entries of each parameter tensor are probed
/// (chosen deterministically from `seed`); `None` probes every entry.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    step: f64,
    per_param: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<'t, f64>) -> Result<Var<'t, f64>>,
{
    let grads = {
        let tape = Tape::with_params(store);
        let out = f(&tape)?;
        let loss = project(&tape, out, seed)?;
        tape.backward(loss)?;
        tape.param_grads()
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::inference(store);
        let out = f(&tape)?;
        scalar_of(&tape, out, seed)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.requires_grad).map(|(id, _)| id).collect();
    for id in ids {
        let (name, numel) = {
            let p = store.get(id);
            (p.name.clone(), p.value.numel())
        };
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros([numel]));
        let picks: Vec<usize> = match per_param {
            Some(k) if k < numel => {
                let mut v = sample(&mut rng, numel, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..numel).collect(),
        };
        for j in picks {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + step;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - step;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            report.record(&name, j, analytic.data()[j], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}
