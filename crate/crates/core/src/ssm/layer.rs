use rand::Rng;

use super::lti::{zoh_coefficients, ZOH_LIMIT};
use super::selective::{inverse_softplus, SelectiveParams};
use crate::error::TensorError;
use crate::nn::{join, Module};
use crate::scalar::Scalar;
use crate::tensor::{CustomBackward, Graph, Tensor, Var};

/// d/dA of `(exp(Δa) - 1) / a`, accurate as `Δa -> 0`.
fn gain_grad_a<T: Scalar>(a: T, delta: T, a_bar: T, gain: T) -> T {
    let z = delta * a;
    if z.abs() < T::of(0.1) {
        // Δ² Σ_{n>=1} n z^{n-1} / (n+1)!
        let mut term = T::one();
        let mut fact = T::of(2.0);
        let mut sum = T::zero();
        for n in 1..=8 {
            sum += T::of(n as f64) * term / fact;
            term *= z;
            fact *= T::of((n + 2) as f64);
        }
        delta * delta * sum
    } else {
        (delta * a_bar - gain) / a
    }
}

/// Saved hidden states for the reverse pass.
struct ScanBackward<T> {
    len: usize,
    channels: usize,
    state_dim: usize,
    states: Vec<T>,
}

impl<T: Scalar> CustomBackward<T> for ScanBackward<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (l, e, n) = (self.len, self.channels, self.state_dim);
        let (u, dt, a, b, c) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        );
        let mut gu = vec![T::zero(); l * e];
        let mut gdt = vec![T::zero(); l * e];
        let mut ga = vec![T::zero(); e * n];
        let mut gb = vec![T::zero(); l * n];
        let mut gc = vec![T::zero(); l * n];
        let mut gx = vec![T::zero(); e * n];
        let limit = T::of(ZOH_LIMIT);
        for k in (0..l).rev() {
            for d in 0..e {
                let g_out = gy[k * e + d];
                let uk = u[k * e + d];
                let step = dt[k * e + d];
                let mut g_step = T::zero();
                let mut g_in = T::zero();
                for i in 0..n {
                    let s = (k * e + d) * n + i;
                    let x_now = self.states[s];
                    let x_prev = if k > 0 { self.states[s - e * n] } else { T::zero() };
                    let ai = a[d * n + i];
                    let bk = b[k * n + i];
                    gc[k * n + i] += g_out * x_now;
                    let g_x = gx[d * n + i] + c[k * n + i] * g_out;
                    let (a_bar, gain) = zoh_coefficients(ai, step);
                    let g_abar = g_x * x_prev;
                    let g_gain = g_x * bk * uk;
                    gb[k * n + i] += g_x * gain * uk;
                    g_in += g_x * gain * bk;
                    let (dgain_dstep, dgain_da) = if (step * ai).abs() < limit {
                        (T::one(), step * step * T::of(0.5))
                    } else {
                        (a_bar, gain_grad_a(ai, step, a_bar, gain))
                    };
                    g_step += g_abar * ai * a_bar + g_gain * dgain_dstep;
                    ga[d * n + i] += g_abar * step * a_bar + g_gain * dgain_da;
                    gx[d * n + i] = g_x * a_bar;
                }
                gu[k * e + d] += g_in;
                gdt[k * e + d] += g_step;
            }
        }
        vec![Some(gu), Some(gdt), Some(ga), Some(gb), Some(gc)]
    }
}

/// Differentiable selective recurrence on precomputed per-step quantities.
///
/// `u`, `delta`: `L×E`; `a`: `E×N`; `b`, `c`: `L×N`. Returns `y`: `L×E` with
/// `x_k = exp(Δ_k a) ⊙ x_{k-1} + (exp(Δ_k a) - 1)/a ⊙ B_k u_k` and `y_k = C_k · x_k`
/// per channel, `x_0 = 0`.
pub fn scan_op<T: Scalar>(g: &mut Graph<T>, u: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var, TensorError> {
    let vals = g.input_values(&[u, delta, a, b, c])?;
    let su = vals[0].shape();
    if su.len() != 2 {
        return Err(TensorError::invalid(
            "selective_scan",
            format!("input must be L×E, got {su:?}"),
        ));
    }
    let (l, e) = (su[0], su[1]);
    let sa = vals[2].shape();
    if sa.len() != 2 || sa[0] != e {
        return Err(TensorError::shape("selective_scan", su, sa));
    }
    let n = sa[1];
    if vals[1].shape() != su {
        return Err(TensorError::shape("selective_scan", su, vals[1].shape()));
    }
    for v in [vals[3], vals[4]] {
        if v.shape() != [l, n] {
            return Err(TensorError::shape("selective_scan", &[l, n], v.shape()));
        }
    }
    let (ud, dd, ad, bd, cd) = (
        vals[0].data(),
        vals[1].data(),
        vals[2].data(),
        vals[3].data(),
        vals[4].data(),
    );
    let mut states = vec![T::zero(); l * e * n];
    let mut y = vec![T::zero(); l * e];
    for d in 0..e {
        let mut x = vec![T::zero(); n];
        for k in 0..l {
            let step = dd[k * e + d];
            let uk = ud[k * e + d];
            let mut acc = T::zero();
            for i in 0..n {
                let (a_bar, gain) = zoh_coefficients(ad[d * n + i], step);
                x[i] = a_bar * x[i] + gain * bd[k * n + i] * uk;
                acc += cd[k * n + i] * x[i];
            }
            y[k * e + d] = acc;
            states[(k * e + d) * n..(k * e + d + 1) * n].copy_from_slice(&x);
        }
    }
    let out = Tensor::new(&[l, e], y)?;
    let rule = ScanBackward {
        len: l,
        channels: e,
        state_dim: n,
        states,
    };
    g.custom(&[u, delta, a, b, c], out, Box::new(rule))
}

/// Full selective scan on graph variables: `u` is `L×E`, `a` is `E×N`,
/// `w_b`/`w_c` are `E×N`, `w_delta` is `E×E`, `b_delta` is `E`.
pub fn selective_scan_graph<T: Scalar>(
    g: &mut Graph<T>,
    u: Var,
    a: Var,
    w_b: Var,
    w_c: Var,
    w_delta: Var,
    b_delta: Var,
) -> Result<Var, TensorError> {
    let pre = g.linear(u, w_delta, Some(b_delta))?;
    let delta = g.softplus(pre)?;
    let b = g.matmul(u, w_b)?;
    let c = g.matmul(u, w_c)?;
    scan_op(g, u, delta, a, b, c)
}

/// Learnable selective SSM with one independent system per channel.
///
/// `A = -exp(a_log)` keeps every mode stable throughout training.
#[derive(Clone, Debug)]
pub struct SelectiveSsm<T> {
    pub a_log: Tensor<T>,
    pub w_b: Tensor<T>,
    pub w_c: Tensor<T>,
    pub w_delta: Tensor<T>,
    pub b_delta: Tensor<T>,
}

impl<T: Scalar> SelectiveSsm<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, state_dim: usize, rng: &mut R) -> Self {
        let p = SelectiveParams::<T>::init(channels, state_dim, rng);
        Self::from_params(&p)
    }

    /// Layer with the given parameters. `A` must be strictly negative; the
    /// constant B/C terms are not representable and are dropped.
    pub fn from_params(p: &SelectiveParams<T>) -> Self {
        let (e, n) = (p.channels, p.state_dim);
        let t = |shape: &[usize], v: &[T]| Tensor::new(shape, v.to_vec()).expect("validated").into_param();
        Self {
            a_log: t(&[e, n], &p.a.iter().map(|&a| (-a).ln()).collect::<Vec<_>>()),
            w_b: t(&[e, n], &p.w_b),
            w_c: t(&[e, n], &p.w_c),
            w_delta: t(&[e, e], &p.w_delta),
            b_delta: t(&[e], &p.b_delta),
        }
    }

    pub fn to_params(&self) -> SelectiveParams<T> {
        let mut p = SelectiveParams::zeros(self.channels(), self.state_dim());
        p.a = self.a_log.data().iter().map(|&x| -x.exp()).collect();
        p.w_b = self.w_b.data().to_vec();
        p.w_c = self.w_c.data().to_vec();
        p.w_delta = self.w_delta.data().to_vec();
        p.b_delta = self.b_delta.data().to_vec();
        p
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// Sets every step-size bias so that `softplus(b) == dt`.
    pub fn set_step(&mut self, dt: f64) {
        let b = T::of(inverse_softplus(dt));
        self.b_delta.data_mut().iter_mut().for_each(|x| *x = b);
    }

    pub fn forward(&self, g: &mut Graph<T>, u: Var) -> Result<Var, TensorError> {
        let a_log = g.param(&self.a_log);
        let a_pos = g.exp(a_log)?;
        let a = g.neg(a_pos)?;
        let w_b = g.param(&self.w_b);
        let w_c = g.param(&self.w_c);
        let w_delta = g.param(&self.w_delta);
        let b_delta = g.param(&self.b_delta);
        selective_scan_graph(g, u, a, w_b, w_c, w_delta, b_delta)
    }
}

impl<T: Scalar> Module<T> for SelectiveSsm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "a_log"), &self.a_log);
        f(&join(prefix, "w_b"), &self.w_b);
        f(&join(prefix, "w_c"), &self.w_c);
        f(&join(prefix, "w_delta"), &self.w_delta);
        f(&join(prefix, "b_delta"), &self.b_delta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "a_log"), &mut self.a_log);
        f(&join(prefix, "w_b"), &mut self.w_b);
        f(&join(prefix, "w_c"), &mut self.w_c);
        f(&join(prefix, "w_delta"), &mut self.w_delta);
        f(&join(prefix, "b_delta"), &mut self.b_delta);
    }
}
