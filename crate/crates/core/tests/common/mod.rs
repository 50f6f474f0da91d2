//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod fd_suite;
pub mod runtime_fixture;

use svbi::tensor::{Tape, Tensor, Var};

/// Norm-wise relative error between the tape gradient and central finite
/// differences, one entry per input. `f` must build a scalar from the
/// inputs it is handed.
pub fn fd_relative_errors<F>(inputs: &[Tensor], f: F, eps: f32) -> Vec<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).expect("backward");
    let eval = |ins: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let l = f(&mut tape, &vars);
        tape.value(l).item() as f64
    };
    let mut errors = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[i]) {
            Some(g) => g.data().iter().map(|&v| v as f64).collect(),
            None => vec![0.0; input.numel()],
        };
        let mut numeric = Vec::with_capacity(input.numel());
        let mut work = inputs.to_vec();
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * eps as f64));
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    errors
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Deterministic pseudo-random tensor in `[-1, 1)` (xorshift, test-local).
pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape.to_vec(), |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    })
}

/// In-memory synthetic shape set, `n` samples cycling through the classes.
pub fn synthetic_dataset(n: usize, seed: u64) -> svbi::data::Dataset {
    let mut rng = svbi::nn::seeded_rng(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let class = i % 10;
        images.extend(svbi::data::render_synthetic(class, &mut rng).into_iter().map(svbi::data::normalize_pixel));
        labels.push(class);
    }
    svbi::data::Dataset::new((3, 32, 32), 10, (0..n as u32).collect(), labels, images).unwrap()
}
