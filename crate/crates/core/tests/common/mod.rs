//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tartekit::encoder::{Bound, EncoderModel};
use tartekit::numerics::{Tape, Tensor, Var};

pub mod grad_cases;
pub mod oracles;
pub mod synth;
pub mod toy;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `f` on a fresh tape with `inputs` as trainable leaves, then reduces
/// the output to a scalar with fixed random weights.
fn evaluate(
    inputs: &[Tensor<f64>],
    weights_seed: u64,
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> (Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    let mut r = rng(weights_seed);
    let w = tape.constant(random_tensor(&shape, &mut r));
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    (tape, vars, loss)
}

/// Largest relative error, over inputs, between the tape gradient and
/// central finite differences: ‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖).
pub fn gradcheck(inputs: &[Tensor<f64>], seed: u64, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let (tape, vars, loss) = evaluate(inputs, seed, f);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let (tp, _, lp) = evaluate(&plus, seed, f);
            let (tm, _, lm) = evaluate(&minus, seed, f);
            numeric[j] = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        // gradients that vanish identically (e.g. attention key biases) sit at
        // rounding noise on both sides
        if scale > 1e-8 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Like [`gradcheck`] but over every parameter tensor of an encoder.
pub fn gradcheck_params(
    model: &EncoderModel<f64>,
    f: &dyn Fn(&EncoderModel<f64>, &mut Tape<f64>, &Bound) -> Var,
) -> f64 {
    let loss = |m: &EncoderModel<f64>| {
        let mut t = Tape::new();
        let b = m.bind(&mut t, false);
        let out = f(m, &mut t, &b);
        t.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true);
    let out = f(model, &mut tape, &b);
    let grads = tape.backward(out).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for id in model.store().ids() {
        let n = model.store().get(id).len();
        let analytic = grads.get(b.var(id)).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let mut plus = model.clone();
            plus.store_mut().get_mut(id).data_mut()[j] += h;
            let mut minus = model.clone();
            minus.store_mut().get_mut(id).data_mut()[j] -= h;
            numeric[j] = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        // gradients that vanish identically (e.g. attention key biases) sit at
        // rounding noise on both sides
        if scale > 1e-8 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}
