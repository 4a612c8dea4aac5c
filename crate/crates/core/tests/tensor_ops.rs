mod common;

use common::{check, rng};
use proptest::prelude::*;
use serpent_core::nn::Module;
use serpent_core::tensor::{read_tensor, write_tensor, Graph, Tensor, Var};
use serpent_core::TensorError;

/// Bag of parameter tensors for checking single ops.
#[derive(Clone)]
struct Params(Vec<Tensor<f32>>);

impl Module<f32> for Params {
    fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        for (i, t) in self.0.iter().enumerate() {
            f(&format!("p{i}"), t);
        }
    }
    fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        for (i, t) in self.0.iter_mut().enumerate() {
            f(&format!("p{i}"), t);
        }
    }
}

const SEEDS: u64 = 20;
const TOL: f64 = 1e-3;
const STEP: f64 = 1e-2;

fn params(shapes: &[&[usize]], seed: u64) -> Params {
    let mut r = rng(seed);
    Params(
        shapes
            .iter()
            .map(|s| Tensor::randn(s, 1.0, &mut r).into_param())
            .collect(),
    )
}

fn run<F>(label: &str, shapes: &[&[usize]], input: &[usize], forward: F)
where
    F: Fn(&Params, &mut Graph<f32>, Var) -> Result<Var, TensorError> + Copy,
{
    for seed in 0..SEEDS {
        let p = params(shapes, seed);
        let x = Tensor::randn(input, 1.0, &mut rng(1000 + seed));
        let res = check(&p, &x, forward, seed, STEP, 2);
        assert!(res.rel_err <= TOL, "{label} seed {seed}: {res:?}");
    }
}

#[test]
fn matmul_grads() {
    run("matmul", &[&[4, 3]], &[5, 4], |p, g, x| {
        let w = g.param(&p.0[0]);
        g.matmul(x, w)
    });
}

#[test]
fn add_and_mul_grads_with_broadcast() {
    run("add", &[&[3], &[]], &[4, 3], |p, g, x| {
        let b = g.param(&p.0[0]);
        let s = g.param(&p.0[1]);
        let y = g.add(x, b)?;
        g.add(y, s)
    });
    run("mul", &[&[3], &[4, 3]], &[4, 3], |p, g, x| {
        let b = g.param(&p.0[0]);
        let c = g.param(&p.0[1]);
        let y = g.mul(x, b)?;
        g.mul(y, c)
    });
}

#[test]
fn unary_grads() {
    run("silu", &[], &[3, 5], |_, g, x| g.silu(x));
    run("softplus", &[], &[3, 5], |_, g, x| g.softplus(x));
    run("exp", &[], &[3, 5], |_, g, x| g.exp(x));
    run("sigmoid", &[], &[3, 5], |_, g, x| g.sigmoid(x));
}

#[test]
fn layer_norm_grads() {
    run("layer_norm", &[&[6], &[6]], &[4, 6], |p, g, x| {
        let gamma = g.param(&p.0[0]);
        let beta = g.param(&p.0[1]);
        g.layer_norm(x, gamma, beta, 1e-5)
    });
}

#[test]
fn depthwise_conv_grads() {
    run("dwconv", &[&[3, 3, 2]], &[5, 5, 2], |p, g, x| {
        let k = g.param(&p.0[0]);
        g.depthwise_conv2d(x, k)
    });
}

#[test]
fn structural_op_grads() {
    run("concat+gather+reshape", &[&[3, 2]], &[3, 2], |p, g, x| {
        let w = g.param(&p.0[0]);
        let c = g.concat_last(x, w)?;
        let idx: std::sync::Arc<[usize]> = (0..12).rev().collect::<Vec<_>>().into();
        let r = g.gather(c, idx, &[12])?;
        let r = g.reshape(r, &[4, 3])?;
        g.mul(r, r)
    });
}

#[test]
fn mlp_grads() {
    run("mlp", &[&[4, 8], &[8], &[8, 3], &[3]], &[5, 4], |p, g, x| {
        let (w1, b1, w2, b2) = (g.param(&p.0[0]), g.param(&p.0[1]), g.param(&p.0[2]), g.param(&p.0[3]));
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.silu(h)?;
        g.linear(h, w2, Some(b2))
    });
}

#[test]
fn shared_subexpression_accumulates() {
    // y = s + s with s = x ⊙ w, versus the same expression built from two
    // independent copies of the subgraph.
    let mut r = rng(3);
    let x = Tensor::<f64>::randn(&[2, 3], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[2, 3], 1.0, &mut r).into_param();

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let wv = g.param(&w);
    let s = g.mul(xv, wv).unwrap();
    let e = g.exp(s).unwrap();
    let y = g.add(e, s).unwrap();
    let y = g.add(y, e).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    let shared = g.grad(xv).unwrap().to_vec();

    let mut g2 = Graph::new();
    let xv2 = g2.leaf(x.clone(), true);
    let w_copy = w.clone();
    let mut terms = Vec::new();
    for (wt, apply_exp) in [(&w, true), (&w_copy, false), (&w_copy, true)] {
        let wv = g2.param(wt);
        let s = g2.mul(xv2, wv).unwrap();
        terms.push(if apply_exp { g2.exp(s).unwrap() } else { s });
    }
    let y = g2.add(terms[0], terms[1]).unwrap();
    let y = g2.add(y, terms[2]).unwrap();
    let l = g2.sum(y).unwrap();
    g2.backward(l).unwrap();
    let dup = g2.grad(xv2).unwrap();

    for (a, b) in shared.iter().zip(dup) {
        assert!((a - b).abs() < 1e-12);
    }
    // and against the closed form 2·w·exp(xw) + w
    for i in 0..6 {
        let (xi, wi) = (x.data()[i], w.data()[i]);
        assert!((shared[i] - (2.0 * wi * (xi * wi).exp() + wi)).abs() < 1e-12);
    }
}

#[test]
fn backward_populates_every_reachable_param() {
    let mut r = rng(5);
    let a = Tensor::<f32>::randn(&[3, 3], 1.0, &mut r).into_param();
    let unused = Tensor::<f32>::randn(&[3], 1.0, &mut r).into_param();
    let mut g = Graph::new();
    let x = g.input(Tensor::ones(&[2, 3]));
    let av = g.param(&a);
    let uv = g.param(&unused);
    let y = g.matmul(x, av).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.param_grad(&a).unwrap().len(), 9);
    assert!(g.grad(uv).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layer_norm_standardizes(rows in 1usize..6, cols in 2usize..32, seed in any::<u64>(), scale in 0.5f64..20.0) {
        let x = Tensor::<f32>::randn(&[rows, cols], scale, &mut rng(seed));
        let mut g = Graph::new();
        let xv = g.input(x);
        let gamma = g.input(Tensor::ones(&[cols]));
        let beta = g.input(Tensor::zeros(&[cols]));
        let y = g.layer_norm(xv, gamma, beta, 1e-5).unwrap();
        let y = g.value(y).unwrap();
        for r in 0..rows {
            let row: Vec<f64> = y.data()[r * cols..(r + 1) * cols].iter().map(|&v| v as f64).collect();
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            // skip degenerate rows whose variance is not ≫ eps
            let raw = g.value(xv).unwrap().data()[r * cols..(r + 1) * cols].to_vec();
            let rm = raw.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let rv = raw.iter().map(|&v| (v as f64 - rm).powi(2)).sum::<f64>() / cols as f64;
            prop_assume!(rv > 1e-2);
            prop_assert!(mean.abs() <= 1e-5, "mean {mean}");
            prop_assert!((var - 1.0).abs() <= 1e-3, "var {var}");
        }
    }

    #[test]
    fn tensor_record_round_trips(
        shape in proptest::collection::vec(1usize..5, 0..4),
        name in "[a-z][a-z0-9_.]{0,20}",
        seed in any::<u64>(),
    ) {
        let t = Tensor::<f32>::randn(&shape, 1.0, &mut rng(seed));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &name, &t).unwrap();
        let (n, back) = read_tensor::<f32, _>(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(n, name);
        prop_assert_eq!(back, t);
    }

    #[test]
    fn broadcast_add_matches_manual(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::<f64>::randn(&[rows, cols], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[cols], 1.0, &mut r);
        let mut g = Graph::new();
        let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
        let y = g.add(av, bv).unwrap();
        let y = g.value(y).unwrap();
        for i in 0..rows * cols {
            prop_assert_eq!(y.data()[i], a.data()[i] + b.data()[i % cols]);
        }
    }
}

#[test]
fn gradcheck_detects_a_detached_parameter() {
    let p = params(&[&[4, 3]], 0);
    let x = Tensor::randn(&[5, 4], 1.0, &mut rng(1));
    let res = check(
        &p,
        &x,
        |p: &Params, g: &mut Graph<f32>, x| {
            let w = g.input(p.0[0].clone());
            g.matmul(x, w)
        },
        0,
        STEP,
        2,
    );
    assert!(res.rel_err > 0.1, "{res:?}");
}
