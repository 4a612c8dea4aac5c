mod common;

use common::{check, rel_linf, rng};
use proptest::prelude::*;
use rand::Rng;
use serpent_core::nn::Module;
use serpent_core::scalar::softplus;
use serpent_core::ssm::{
    lti_scan, lti_scan_chunked, lti_scan_convolutional, lti_scan_recurrent, selective_scan, selective_scan_chunked,
    selective_scan_counted, selective_scan_graph, DiscreteSystem, LtiSystem, OpCounter, ScanMode, SelectiveParams,
};
use serpent_core::tensor::{Graph, Tensor, Var};
use serpent_core::TensorError;

fn random_system<R: Rng>(n: usize, r: &mut R) -> DiscreteSystem<f64> {
    let a = (0..n).map(|_| -r.random_range(0.05..3.0)).collect();
    let b = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let c = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    LtiSystem::new(a, b, c, r.random_range(0.01..0.5)).unwrap().discretize()
}

fn random_system_f32<R: Rng>(n: usize, r: &mut R) -> DiscreteSystem<f32> {
    let a = (0..n).map(|_| -r.random_range(0.05f32..3.0)).collect();
    let b = (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let c = (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect();
    LtiSystem::new(a, b, c, r.random_range(0.01f32..0.5))
        .unwrap()
        .discretize()
}

#[test]
fn lti_modes_agree_on_fifty_systems() {
    let mut r = rng(11);
    let mut count = 0;
    for &n in &[1, 2, 4, 8] {
        for &len in &[1, 4, 16, 64] {
            for _ in 0..4 {
                let sys = random_system_f32(n, &mut r);
                let u: Vec<f32> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
                let rec = lti_scan_recurrent(&sys, &u).unwrap();
                let conv = lti_scan_convolutional(&sys, &u).unwrap();
                assert!(rel_linf(&conv, &rec) <= 1e-5, "N={n} L={len}");
                for chunk in [1, 3, len] {
                    let ch = lti_scan_chunked(&sys, &u, chunk).unwrap();
                    assert!(rel_linf(&ch, &rec) <= 1e-5);
                }
                count += 1;
            }
        }
    }
    assert!(count >= 50);
}

#[test]
fn lti_is_causal_and_linear() {
    let mut r = rng(2);
    let sys = random_system(4, &mut r);
    let u: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
    let yu = lti_scan(&sys, &u, ScanMode::Recurrent).unwrap();
    let yv = lti_scan(&sys, &v, ScanMode::Recurrent).unwrap();
    let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
    let ym = lti_scan(&sys, &mix, ScanMode::Convolutional).unwrap();
    for k in 0..20 {
        assert!((ym[k] - (2.0 * yu[k] - 0.5 * yv[k])).abs() < 1e-12);
    }
    let mut late = u.clone();
    late[12] += 5.0;
    let yl = lti_scan(&sys, &late, ScanMode::Recurrent).unwrap();
    assert_eq!(&yl[..12], &yu[..12]);
    assert_ne!(yl[12], yu[12]);
}

#[test]
fn long_random_walks_stay_finite() {
    let mut r = rng(4);
    let mut walk = vec![0.0f32; 4096 * 4];
    let mut acc = [0.0f32; 4];
    for k in 0..4096 {
        for e in 0..4 {
            acc[e] += r.random_range(-1.0..1.0);
            walk[k * 4 + e] = acc[e];
        }
    }
    let lti = random_system_f32(8, &mut r);
    let u0: Vec<f32> = walk.iter().step_by(4).copied().collect();
    assert!(lti_scan_recurrent(&lti, &u0).unwrap().iter().all(|v| v.is_finite()));
    let p = SelectiveParams::<f32>::init(4, 8, &mut r);
    assert!(selective_scan(&p, &walk).unwrap().iter().all(|v| v.is_finite()));
    assert!(selective_scan_chunked(&p, &walk, 128)
        .unwrap()
        .iter()
        .all(|v| v.is_finite()));
}

#[test]
fn selective_chunked_matches_sequential() {
    let mut r = rng(6);
    for &(len, e, n) in &[(1, 1, 1), (17, 3, 4), (64, 8, 2), (256, 8, 4), (100, 5, 3)] {
        let p = SelectiveParams::<f32>::init(e, n, &mut r);
        let u: Vec<f32> = (0..len * e).map(|_| r.random_range(-2.0..2.0)).collect();
        let seq = selective_scan(&p, &u).unwrap();
        for chunk in [1, 4, 16, len] {
            let ch = selective_scan_chunked(&p, &u, chunk).unwrap();
            assert!(rel_linf(&ch, &seq) <= 1e-5, "L={len} chunk={chunk}");
        }
    }
}

#[test]
fn selective_is_causal() {
    let mut r = rng(8);
    let p = SelectiveParams::<f64>::init(3, 4, &mut r);
    let u: Vec<f64> = (0..30).map(|_| r.random_range(-1.0..1.0)).collect();
    let y = selective_scan(&p, &u).unwrap();
    let mut u2 = u.clone();
    u2[7 * 3 + 1] = 3.0;
    let y2 = selective_scan(&p, &u2).unwrap();
    assert_eq!(&y[..21], &y2[..21]);
}

#[test]
fn selective_reduces_to_lti() {
    let mut r = rng(9);
    for &(e, n) in &[(1, 1), (3, 4), (8, 8)] {
        let mut p = SelectiveParams::<f64>::zeros(e, n);
        for v in p.a.iter_mut() {
            *v = -r.random_range(0.1..2.0);
        }
        for v in p.b_delta.iter_mut() {
            *v = r.random_range(-4.0..1.0);
        }
        for v in p.b_const.iter_mut().chain(p.c_const.iter_mut()) {
            *v = r.random_range(-1.0..1.0);
        }
        let len = 33;
        let u: Vec<f64> = (0..len * e).map(|_| r.random_range(-1.0..1.0)).collect();
        let y = selective_scan(&p, &u).unwrap();
        for d in 0..e {
            let sys = LtiSystem::new(
                p.a[d * n..(d + 1) * n].to_vec(),
                p.b_const.clone(),
                p.c_const.clone(),
                softplus(p.b_delta[d]),
            )
            .unwrap()
            .discretize();
            let ud: Vec<f64> = u.iter().skip(d).step_by(e).copied().collect();
            let want = lti_scan_recurrent(&sys, &ud).unwrap();
            let got: Vec<f64> = y.iter().skip(d).step_by(e).copied().collect();
            assert!(rel_linf(&got, &want) <= 1e-6);
        }
    }
}

#[test]
fn op_count_doubles_with_length() {
    let mut r = rng(1);
    let p = SelectiveParams::<f32>::init(4, 3, &mut r);
    for len in [16, 64, 256, 1024] {
        let count = |l: usize| {
            let u = vec![0.5f32; l * 4];
            let mut ops = OpCounter::default();
            selective_scan_counted(&p, &u, 16, &mut ops).unwrap();
            ops.total()
        };
        let ratio = count(2 * len) as f64 / count(len) as f64;
        assert!((1.9..=2.1).contains(&ratio), "L={len}: {ratio}");
    }
}

/// A, W_B, W_C, W_Δ and b_Δ as free parameters.
#[derive(Clone)]
struct RawScan(Vec<Tensor<f32>>);

impl Module<f32> for RawScan {
    fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        for (name, t) in ["a", "w_b", "w_c", "w_delta", "b_delta"].iter().zip(&self.0) {
            f(name, t);
        }
    }
    fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        for (name, t) in ["a", "w_b", "w_c", "w_delta", "b_delta"].iter().zip(self.0.iter_mut()) {
            f(name, t);
        }
    }
}

fn raw_forward(m: &RawScan, g: &mut Graph<f32>, u: Var) -> Result<Var, TensorError> {
    let v: Vec<Var> = m.0.iter().map(|t| g.param(t)).collect();
    selective_scan_graph(g, u, v[0], v[1], v[2], v[3], v[4])
}

#[test]
fn selective_scan_gradients_match_finite_differences() {
    let (len, e, n) = (8, 3, 4);
    for seed in 0..10 {
        let mut r = rng(seed);
        let p = SelectiveParams::<f32>::init(e, n, &mut r);
        let t = |s: &[usize], v: &[f32]| Tensor::new(s, v.to_vec()).unwrap().into_param();
        // larger step sizes than the default init make the Δ path matter
        let b_delta: Vec<f32> = (0..e).map(|_| r.random_range(-2.0..0.5)).collect();
        let m = RawScan(vec![
            t(&[e, n], &p.a),
            t(&[e, n], &p.w_b),
            t(&[e, n], &p.w_c),
            t(&[e, e], &p.w_delta),
            t(&[e], &b_delta),
        ]);
        let u = Tensor::randn(&[len, e], 1.0, &mut r);
        let res = check(&m, &u, raw_forward, seed, 1e-2, 3);
        assert!(res.rel_err <= 2e-3, "seed {seed}: {res:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lti_modes_agree(n in 1usize..9, len in 1usize..80, seed in any::<u64>()) {
        let mut r = rng(seed);
        let sys = random_system(n, &mut r);
        let u: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
        let rec = lti_scan_recurrent(&sys, &u).unwrap();
        let conv = lti_scan_convolutional(&sys, &u).unwrap();
        prop_assert!(rel_linf(&conv, &rec) <= 1e-9);
    }

    #[test]
    fn selective_chunking_is_exact(e in 1usize..6, n in 1usize..6, len in 1usize..64, chunk in 1usize..70, seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = SelectiveParams::<f64>::init(e, n, &mut r);
        let u: Vec<f64> = (0..len * e).map(|_| r.random_range(-1.0..1.0)).collect();
        prop_assert_eq!(selective_scan_chunked(&p, &u, chunk).unwrap(), selective_scan(&p, &u).unwrap());
    }
}
