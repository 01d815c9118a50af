#![allow(dead_code)]

//! Central finite-difference oracle, independent of the tape's backward
//! rules: it only ever evaluates forward values.

use lobforge_autodiff::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Denominator floor so that gradients that are zero up to round-off are
/// compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Checks d(Σ wᵢ·fᵢ(inputs))/d(inputs) for random fixed weights `w`.
/// Returns the worst relative error.
pub fn check<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let eval = |vals: &[Tensor], weights: Option<&Tensor>, tape: &mut Tape| -> (f64, Vec<Var>, Tensor) {
        let vars: Vec<Var> = vals.iter().map(|t| tape.variable(t.clone()).unwrap()).collect();
        let out = f(tape, &vars).expect("forward");
        let ov = tape.value(out).clone();
        let w = match weights {
            Some(w) => w.clone(),
            None => Tensor::zeros(ov.shape()),
        };
        let loss: f64 = ov.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let wc = tape.constant(w.clone()).unwrap();
        let prod = tape.mul(out, wc).unwrap();
        let total = tape.sum(prod).unwrap();
        tape.backward(total).unwrap();
        (loss, vars, w)
    };
    // First pass only to learn the output shape.
    let mut probe = Tape::new();
    let (_, _, w0) = eval(inputs, None, &mut probe);
    let weights = random_tensor(&mut rng, w0.shape(), 1.0);

    let mut tape = Tape::new();
    let (_, vars, _) = eval(inputs, Some(&weights), &mut tape);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let lp = eval(&plus, Some(&weights), &mut Tape::new()).0;
            let lm = eval(&minus, Some(&weights), &mut Tape::new()).0;
            let numeric = (lp - lm) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Same oracle, differentiating with respect to every parameter in `store`.
pub fn check_params<F>(store: &lobforge_autodiff::ParamStore, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &lobforge_autodiff::ParamStore) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut probe = Tape::new();
    let out = f(&mut probe, store).expect("forward");
    let weights = random_tensor(&mut rng, probe.value(out).shape(), 1.0);
    let loss_of = |s: &lobforge_autodiff::ParamStore| -> f64 {
        let mut tape = Tape::new();
        let out = f(&mut tape, s).expect("forward");
        tape.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let out = f(&mut tape, store).unwrap();
    let wc = tape.constant(weights.clone()).unwrap();
    let prod = tape.mul(out, wc).unwrap();
    let total = tape.sum(prod).unwrap();
    tape.backward(total).unwrap();
    let grads = tape.param_grads();

    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for id in store.ids() {
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + STEP;
            let lp = loss_of(&work);
            work.get_mut(id).data_mut()[j] = orig - STEP;
            let lm = loss_of(&work);
            work.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic.data()[j], (lp - lm) / (2.0 * STEP)));
        }
    }
    worst
}
