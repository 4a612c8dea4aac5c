use super::{check_len, SsmError};
use crate::scalar::Scalar;

/// Below this |Δ·A| the zero-order hold input gain uses its first-order limit Δ.
pub const ZOH_LIMIT: f64 = 1e-6;

/// Continuous-time diagonal system `x' = A x + B u`, `y = C x + D u`.
#[derive(Clone, Debug, PartialEq)]
pub struct LtiSystem<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Option<T>,
    pub delta: T,
}

impl<T: Scalar> LtiSystem<T> {
    pub fn new(a: Vec<T>, b: Vec<T>, c: Vec<T>, delta: T) -> Result<Self, SsmError> {
        if a.is_empty() {
            return Err(SsmError::ZeroState);
        }
        check_len("B", a.len(), b.len())?;
        check_len("C", a.len(), c.len())?;
        if let Some((index, v)) = a.iter().enumerate().find(|(_, v)| !(**v < T::zero())) {
            return Err(SsmError::Unstable {
                index,
                value: v.as_f64(),
            });
        }
        if !(delta > T::zero()) {
            return Err(SsmError::NonPositiveStep(delta.as_f64()));
        }
        Ok(Self {
            a,
            b,
            c,
            d: None,
            delta,
        })
    }

    pub fn with_feedthrough(mut self, d: T) -> Self {
        self.d = Some(d);
        self
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }

    pub fn discretize(&self) -> DiscreteSystem<T> {
        let (a_bar, b_bar) = discretize_zoh(&self.a, &self.b, self.delta).expect("validated system");
        DiscreteSystem {
            a_bar,
            b_bar,
            c: self.c.clone(),
            d: self.d,
        }
    }
}

/// `x_k = Ā x_{k-1} + B̄ u_k`, `y_k = C x_k (+ D u_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSystem<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
    pub c: Vec<T>,
    pub d: Option<T>,
}

impl<T: Scalar> DiscreteSystem<T> {
    pub fn new(a_bar: Vec<T>, b_bar: Vec<T>, c: Vec<T>) -> Result<Self, SsmError> {
        if a_bar.is_empty() {
            return Err(SsmError::ZeroState);
        }
        check_len("B̄", a_bar.len(), b_bar.len())?;
        check_len("C", a_bar.len(), c.len())?;
        Ok(Self {
            a_bar,
            b_bar,
            c,
            d: None,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a_bar.len()
    }
}

/// Zero-order hold coefficients `(exp(Δa), (exp(Δa) - 1) / a)` for one mode.
#[inline]
pub fn zoh_coefficients<T: Scalar>(a: T, delta: T) -> (T, T) {
    let z = delta * a;
    let a_bar = z.exp();
    if z.abs() < T::of(ZOH_LIMIT) {
        (a_bar, delta)
    } else {
        (a_bar, z.exp_m1() / a)
    }
}

/// Zero-order hold discretization of a diagonal system.
pub fn discretize_zoh<T: Scalar>(a: &[T], b: &[T], delta: T) -> Result<(Vec<T>, Vec<T>), SsmError> {
    if !(delta > T::zero()) {
        return Err(SsmError::NonPositiveStep(delta.as_f64()));
    }
    check_len("B", a.len(), b.len())?;
    Ok(a.iter()
        .zip(b)
        .map(|(&ai, &bi)| {
            let (ab, gain) = zoh_coefficients(ai, delta);
            (ab, gain * bi)
        })
        .unzip())
}

/// Convolution taps `K[j] = Σ_i C_i Ā_i^j B̄_i`, `j = 0..len`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmKernel<T>(pub Vec<T>);

impl<T> SsmKernel<T> {
    pub fn taps(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn lti_kernel<T: Scalar>(sys: &DiscreteSystem<T>, len: usize) -> Result<SsmKernel<T>, SsmError> {
    if len == 0 {
        return Err(SsmError::EmptySequence);
    }
    let mut power: Vec<T> = sys.b_bar.clone();
    let mut taps = Vec::with_capacity(len);
    for _ in 0..len {
        taps.push(power.iter().zip(&sys.c).map(|(&p, &c)| p * c).sum());
        for (p, &a) in power.iter_mut().zip(&sys.a_bar) {
            *p *= a;
        }
    }
    Ok(SsmKernel(taps))
}

pub fn lti_scan_recurrent<T: Scalar>(sys: &DiscreteSystem<T>, u: &[T]) -> Result<Vec<T>, SsmError> {
    if u.is_empty() {
        return Err(SsmError::EmptySequence);
    }
    let mut x = vec![T::zero(); sys.state_dim()];
    let mut out = Vec::with_capacity(u.len());
    for &uk in u {
        out.push(step(sys, &mut x, uk));
    }
    Ok(out)
}

#[inline]
fn step<T: Scalar>(sys: &DiscreteSystem<T>, x: &mut [T], uk: T) -> T {
    let mut y = T::zero();
    for i in 0..x.len() {
        x[i] = sys.a_bar[i] * x[i] + sys.b_bar[i] * uk;
        y += sys.c[i] * x[i];
    }
    match sys.d {
        Some(d) => y + d * uk,
        None => y,
    }
}

/// Causal convolution `y_k = Σ_{j<=k} K[j] u_{k-j}` with a kernel as long as the input.
pub fn lti_scan_convolutional<T: Scalar>(sys: &DiscreteSystem<T>, u: &[T]) -> Result<Vec<T>, SsmError> {
    let kernel = lti_kernel(sys, u.len())?;
    let k = kernel.taps();
    Ok((0..u.len())
        .map(|t| {
            let y: T = (0..=t).map(|j| k[j] * u[t - j]).sum();
            match sys.d {
                Some(d) => y + d * u[t],
                None => y,
            }
        })
        .collect())
}

/// Blocked recurrence carrying the exact state across chunk boundaries.
pub fn lti_scan_chunked<T: Scalar>(sys: &DiscreteSystem<T>, u: &[T], chunk_len: usize) -> Result<Vec<T>, SsmError> {
    if chunk_len == 0 {
        return Err(SsmError::ZeroChunk);
    }
    if u.is_empty() {
        return Err(SsmError::EmptySequence);
    }
    let mut x = vec![T::zero(); sys.state_dim()];
    let mut out = Vec::with_capacity(u.len());
    for chunk in u.chunks(chunk_len) {
        out.extend(chunk.iter().map(|&uk| step(sys, &mut x, uk)));
    }
    Ok(out)
}

/// Execution strategy for a scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    Recurrent,
    /// Time-invariant systems only.
    Convolutional,
    Chunked(usize),
}

pub fn lti_scan<T: Scalar>(sys: &DiscreteSystem<T>, u: &[T], mode: ScanMode) -> Result<Vec<T>, SsmError> {
    match mode {
        ScanMode::Recurrent => lti_scan_recurrent(sys, u),
        ScanMode::Convolutional => lti_scan_convolutional(sys, u),
        ScanMode::Chunked(n) => lti_scan_chunked(sys, u, n),
    }
}
