//! Finite-difference gradient checking shared by the integration suites.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serpent_core::nn::Module;
use serpent_core::tensor::{Graph, Tensor, Var};
use serpent_core::{Scalar, TensorError};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative L∞ distance `max|a-b| / max(max|b|, tiny)`.
pub fn rel_linf<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x.as_f64() - y.as_f64()).abs()));
    let scale = b.iter().fold(0.0f64, |m, y| m.max(y.as_f64().abs()));
    diff / scale.max(1e-30)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all probes.
    pub rel_err: f64,
    pub probes: usize,
    /// Probe with the largest individual relative error, for diagnostics.
    pub worst: (String, f64, f64),
}

/// Loss `Σ out ⊙ R` with a fixed random `R`, reduced in f64 outside the graph.
fn loss_value<T, M, F>(module: &M, input: &Tensor<T>, weights: &[f64], forward: &F) -> f64
where
    T: Scalar,
    F: Fn(&M, &mut Graph<T>, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let y = forward(module, &mut g, x).expect("forward");
    g.value(y)
        .unwrap()
        .data()
        .iter()
        .zip(weights)
        .map(|(v, w)| v.as_f64() * w)
        .sum()
}

fn add_scaled<T: Scalar>(t: &mut Tensor<T>, dir: &[f64], step: f64) {
    for (v, d) in t.data_mut().iter_mut().zip(dir) {
        *v = T::of(v.as_f64() + step * d);
    }
}

fn nth_param_mut<T: Scalar, M: Module<T>>(module: &mut M, k: usize, f: &mut dyn FnMut(&mut Tensor<T>)) {
    let mut i = 0;
    module.visit_mut("", &mut |_, t| {
        if i == k {
            f(t);
        }
        i += 1;
    });
}

/// Compares analytic directional derivatives of `Σ forward(input) ⊙ R` with a
/// fourth-order central difference along `probes` random unit directions for
/// every parameter tensor and for the input.
pub fn check<T, M, F>(module: &M, input: &Tensor<T>, forward: F, seed: u64, step: f64, probes: usize) -> GradCheck
where
    T: Scalar,
    M: Module<T> + Clone,
    F: Fn(&M, &mut Graph<T>, Var) -> Result<Var, TensorError>,
{
    let mut r = rng(seed);
    let mut g = Graph::new();
    let x = g.leaf(input.clone(), true);
    let y = forward(module, &mut g, x).expect("forward");
    let out_shape = g.shape(y).unwrap().to_vec();
    let weights = Tensor::<f64>::randn(&out_shape, 1.0, &mut r).into_data();
    let wv = g.input(Tensor::new(&out_shape, weights.iter().map(|&w| T::of(w)).collect()).unwrap());
    let prod = g.mul(y, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let mut targets: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    module.visit("", &mut |name, t| {
        let grad = g
            .param_grad(t)
            .map(|gr| gr.iter().map(|v| v.as_f64()).collect())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        targets.push((name.to_string(), t.shape().to_vec(), grad));
    });
    let input_grad: Vec<f64> = g.grad(x).unwrap().iter().map(|v| v.as_f64()).collect();
    targets.push(("<input>".into(), input.shape().to_vec(), input_grad));

    let n_params = targets.len() - 1;
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut worst = (String::new(), 0.0, 0.0);
    let mut count = 0;
    for (k, (name, shape, grad)) in targets.iter().enumerate() {
        for _ in 0..probes {
            let mut dir = Tensor::<f64>::randn(shape, 1.0, &mut r).into_data();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-30);
            dir.iter_mut().for_each(|d| *d /= norm);
            let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let eval = |s: f64| {
                if k < n_params {
                    let mut m = module.clone();
                    nth_param_mut(&mut m, k, &mut |t| add_scaled(t, &dir, s));
                    loss_value(&m, input, &weights, &forward)
                } else {
                    let mut xi = input.clone();
                    add_scaled(&mut xi, &dir, s);
                    loss_value(module, &xi, &weights, &forward)
                }
            };
            let h = step;
            let numeric = (-eval(2.0 * h) + 8.0 * eval(h) - 8.0 * eval(-h) + eval(-2.0 * h)) / (12.0 * h);
            diff2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.2 {
                worst = (name.clone(), analytic, rel);
            }
            count += 1;
        }
    }
    GradCheck {
        rel_err: diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-30),
        probes: count,
        worst,
    }
}
