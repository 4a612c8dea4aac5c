use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{numel, Tensor};
use crate::error::TensorError;
use crate::scalar::{self, Scalar};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Vector-Jacobian product for an operation defined outside the engine.
pub trait CustomBackward<T>: Send + Sync {
    /// Gradient for each input given the output gradient. Entries whose
    /// `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Silu,
    Softplus,
    Exp,
    Abs,
    Sigmoid,
}

impl Unary {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Silu => scalar::silu(x),
            Unary::Softplus => scalar::softplus(x),
            Unary::Exp => x.exp(),
            Unary::Abs => x.abs(),
            Unary::Sigmoid => scalar::sigmoid(x),
        }
    }

    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Silu => {
                let s = scalar::sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Unary::Softplus => scalar::sigmoid(x),
            Unary::Exp => y,
            Unary::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (T::one() - y),
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Offset(usize),
    Unary(usize, Unary),
    Sum(usize),
    Mean(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    DwConv {
        x: usize,
        kernel: usize,
    },
    Gather {
        x: usize,
        src: Arc<[usize]>,
    },
    Concat(usize, usize),
    Reshape(usize),
    Custom {
        inputs: Vec<usize>,
        rule: Box<dyn CustomBackward<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Tape of operations recorded in creation order.
///
/// Creation order is a topological order, so `backward` walks the tape in
/// reverse and visits each node once. Parameters are bound by the address of
/// the owning [`Tensor`]: binding the same tensor twice yields the same
/// [`Var`], so shared weights accumulate a single gradient.
pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    bound: HashMap<usize, Var>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (na, nb) = (numel(a), numel(b));
    if nb == 1 && a.len() >= b.len() {
        return Ok(a.to_vec());
    }
    if na == 1 && b.len() >= a.len() {
        return Ok(b.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(TensorError::shape(op, a, b))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bound: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var { graph: self.id, index }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor, false)
    }

    pub fn leaf(&mut self, mut tensor: Tensor<T>, requires_grad: bool) -> Var {
        tensor.zero_grad();
        tensor.set_requires_grad(requires_grad);
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Binds a parameter tensor, reusing the existing node if it is already bound.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let key = tensor as *const Tensor<T> as usize;
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(tensor.detach(), tensor.requires_grad());
        self.bound.insert(key, v);
        v
    }

    /// Node bound to `tensor` by [`Graph::param`], if any.
    pub fn bound(&self, tensor: &Tensor<T>) -> Option<Var> {
        self.bound.get(&(tensor as *const Tensor<T> as usize)).copied()
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>, TensorError> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize], TensorError> {
        Ok(self.value(v)?.shape())
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        let i = self.idx(v).ok()?;
        self.nodes[i].grad.as_deref()
    }

    pub fn param_grad(&self, tensor: &Tensor<T>) -> Option<&[T]> {
        self.bound(tensor).and_then(|v| self.grad(v))
    }

    /// Copies the gradient of a bound parameter into its grad slot.
    pub fn store_grad(&self, tensor: &mut Tensor<T>) -> bool {
        match self.param_grad(tensor).map(<[T]>::to_vec) {
            Some(g) => tensor.set_grad(g).is_ok(),
            None => false,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(sa) / k.max(1);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let out = matmul_kernel(self.nodes[ia].value.data(), self.nodes[ib].value.data(), m, k, n);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(ia, ib), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        let shape = broadcast_shape(name, va.shape(), vb.shape())?;
        let (na, nb) = (va.numel(), vb.numel());
        let (da, db) = (va.data(), vb.data());
        let out = Tensor::from_fn(&shape, |i| f(da[i % na], db[i % nb]));
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, op(ia, ib), rg))
    }

    /// Elementwise sum; `b` may be a scalar or match the trailing dims of `a` (or vice versa).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| x * c);
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Scale(ia, c), rg))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.scale(a, -T::one())
    }

    pub fn offset(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| x + c);
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Offset(ia), rg))
    }

    fn unary(&mut self, a: Var, u: Unary) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| u.apply(x));
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Unary(ia, u), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Unary::Silu)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Unary::Exp)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Unary::Abs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let s: T = self.nodes[ia].value.data().iter().copied().sum();
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.numel() as f64);
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(m), Op::Mean(ia), rg))
    }

    /// `x @ w + b` over the last dimension of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Normalizes over the last dimension, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, TensorError> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xs = self.nodes[ix].value.shape().to_vec();
        let c = *xs.last().ok_or_else(|| TensorError::shape("layer_norm", &xs, &[]))?;
        for i in [ig, ib] {
            let s = self.nodes[i].value.shape();
            if s != [c] {
                return Err(TensorError::shape("layer_norm", &xs, s));
            }
        }
        let xd = self.nodes[ix].value.data();
        let gd = self.nodes[ig].value.data();
        let bd = self.nodes[ib].value.data();
        let rows = numel(&xs) / c.max(1);
        let inv_c = T::one() / T::of(c as f64);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        let op = Op::LayerNorm {
            x: ix,
            gamma: ig,
            beta: ib,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(&xs, out)?, op, rg))
    }

    /// Per-channel 2-D convolution of an `H×W×C` map with a `k×k×C` kernel,
    /// zero padded so the spatial size is preserved.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var, TensorError> {
        let (ix, ik) = (self.idx(x)?, self.idx(kernel)?);
        let xs = self.nodes[ix].value.shape();
        let ks = self.nodes[ik].value.shape();
        if xs.len() != 3 || ks.len() != 3 || ks[0] != ks[1] || ks[2] != xs[2] {
            return Err(TensorError::shape("depthwise_conv2d", xs, ks));
        }
        if ks[0].is_multiple_of(2) {
            return Err(TensorError::invalid(
                "depthwise_conv2d",
                format!("kernel size must be odd, got {}", ks[0]),
            ));
        }
        let (h, w, c, k) = (xs[0], xs[1], xs[2], ks[0]);
        let out = dwconv_forward(self.nodes[ix].value.data(), self.nodes[ik].value.data(), h, w, c, k);
        let shape = xs.to_vec();
        let rg = self.rg(ix) || self.rg(ik);
        Ok(self.push(Tensor::new(&shape, out)?, Op::DwConv { x: ix, kernel: ik }, rg))
    }

    /// `out[i] = x[src[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, src: Arc<[usize]>, shape: &[usize]) -> Result<Var, TensorError> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        if numel(shape) != src.len() {
            return Err(TensorError::shape("gather", &[src.len()], shape));
        }
        if let Some(&bad) = src.iter().find(|&&s| s >= xv.numel()) {
            return Err(TensorError::invalid(
                "gather",
                format!("index {bad} out of range for {} elements", xv.numel()),
            ));
        }
        let xd = xv.data();
        let out = Tensor::from_fn(shape, |i| xd[src[i]]);
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Gather { x: ix, src }, rg))
    }

    /// Concatenates along the last dimension.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::shape("concat", sa, sb));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = numel(sa) / ca.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(ia, ib), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.reshape(shape)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Reshape(ia), rg))
    }

    /// Records an externally computed `output` of `inputs` with its own backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        rule: Box<dyn CustomBackward<T>>,
    ) -> Result<Var, TensorError> {
        let idx = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>, _>>()?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(output, Op::Custom { inputs: idx, rule }, rg))
    }

    pub fn input_values(&self, vars: &[Var]) -> Result<Vec<&Tensor<T>>, TensorError> {
        vars.iter().map(|&v| self.value(v)).collect()
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Accumulates d(loss)/d(node) into every node that requires a gradient
    /// and lies on a path to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[il].value.shape().to_vec()));
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_done = true;
        if !self.nodes[il].requires_grad {
            return Ok(());
        }
        self.nodes[il].grad = Some(vec![T::one()]);
        for i in (0..=il).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            for (j, contrib) in local_grads(before, node, g) {
                let target = &mut before[j];
                match target.grad.as_mut() {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += *c;
                        }
                    }
                    None => target.grad = Some(contrib),
                }
            }
        }
        Ok(())
    }
}

fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn dwconv_forward<T: Scalar>(x: &[T], k: &[T], h: usize, w: usize, c: usize, ks: usize) -> Vec<T> {
    let r = (ks / 2) as isize;
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * c..(y * w + xx + 1) * c];
            for i in 0..ks {
                let sy = y as isize + i as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for j in 0..ks {
                    let sx = xx as isize + j as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = &x[(sy as usize * w + sx as usize) * c..][..c];
                    let kk = &k[(i * ks + j) * c..][..c];
                    for ch in 0..c {
                        o[ch] += kk[ch] * src[ch];
                    }
                }
            }
        }
    }
    out
}

fn local_grads<T: Scalar>(before: &[Node<T>], node: &Node<T>, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let needs = |i: usize| before[i].requires_grad;
    let val = |i: usize| &before[i].value;
    let mut out = Vec::with_capacity(2);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(ia, ib) => {
            let (a, b) = (val(*ia), val(*ib));
            let k = b.shape()[0];
            let n = b.shape()[1];
            let m = a.numel() / k.max(1);
            if needs(*ia) {
                let bd = b.data();
                let mut ga = vec![T::zero(); m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                    }
                }
                out.push((*ia, ga));
            }
            if needs(*ib) {
                let ad = a.data();
                let mut gb = vec![T::zero(); k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == T::zero() {
                            continue;
                        }
                        for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                out.push((*ib, gb));
            }
        }
        Op::Add(ia, ib) | Op::Sub(ia, ib) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            for (idx, s) in [(*ia, T::one()), (*ib, sign)] {
                if needs(idx) {
                    let n = val(idx).numel();
                    let mut acc = vec![T::zero(); n];
                    for (i, &gv) in g.iter().enumerate() {
                        acc[i % n] += gv * s;
                    }
                    out.push((idx, acc));
                }
            }
        }
        Op::Mul(ia, ib) => {
            let (a, b) = (val(*ia), val(*ib));
            let (na, nb) = (a.numel(), b.numel());
            if needs(*ia) {
                let mut acc = vec![T::zero(); na];
                for (i, &gv) in g.iter().enumerate() {
                    acc[i % na] += gv * b.data()[i % nb];
                }
                out.push((*ia, acc));
            }
            if needs(*ib) {
                let mut acc = vec![T::zero(); nb];
                for (i, &gv) in g.iter().enumerate() {
                    acc[i % nb] += gv * a.data()[i % na];
                }
                out.push((*ib, acc));
            }
        }
        Op::Scale(ia, c) => {
            if needs(*ia) {
                out.push((*ia, g.iter().map(|&v| v * *c).collect()));
            }
        }
        Op::Offset(ia) | Op::Reshape(ia) => {
            if needs(*ia) {
                out.push((*ia, g.to_vec()));
            }
        }
        Op::Unary(ia, u) => {
            if needs(*ia) {
                let x = val(*ia).data();
                let y = node.value.data();
                out.push((
                    *ia,
                    g.iter()
                        .zip(x.iter().zip(y))
                        .map(|(&gv, (&xv, &yv))| gv * u.derivative(xv, yv))
                        .collect(),
                ));
            }
        }
        Op::Sum(ia) => {
            if needs(*ia) {
                out.push((*ia, vec![g[0]; val(*ia).numel()]));
            }
        }
        Op::Mean(ia) => {
            if needs(*ia) {
                let n = val(*ia).numel();
                out.push((*ia, vec![g[0] / T::of(n as f64); n]));
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = val(*gamma).numel();
            let rows = xhat.len() / c.max(1);
            let gd = val(*gamma).data();
            if needs(*gamma) {
                let mut gg = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        gg[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
                out.push((*gamma, gg));
            }
            if needs(*beta) {
                let mut gb = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        gb[j] += g[r * c + j];
                    }
                }
                out.push((*beta, gb));
            }
            if needs(*x) {
                let inv_c = T::one() / T::of(c as f64);
                let mut gx = vec![T::zero(); xhat.len()];
                for r in 0..rows {
                    let mut mean_g = T::zero();
                    let mut mean_gx = T::zero();
                    for j in 0..c {
                        let gh = g[r * c + j] * gd[j];
                        mean_g += gh;
                        mean_gx += gh * xhat[r * c + j];
                    }
                    mean_g *= inv_c;
                    mean_gx *= inv_c;
                    for j in 0..c {
                        let gh = g[r * c + j] * gd[j];
                        gx[r * c + j] = rstd[r] * (gh - mean_g - xhat[r * c + j] * mean_gx);
                    }
                }
                out.push((*x, gx));
            }
        }
        Op::DwConv { x, kernel } => {
            let xv = val(*x);
            let kv = val(*kernel);
            let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let ks = kv.shape()[0];
            let r = (ks / 2) as isize;
            let (xd, kd) = (xv.data(), kv.data());
            let mut gx = needs(*x).then(|| vec![T::zero(); xd.len()]);
            let mut gk = needs(*kernel).then(|| vec![T::zero(); kd.len()]);
            for y in 0..h {
                for xx in 0..w {
                    let go = &g[(y * w + xx) * c..][..c];
                    for i in 0..ks {
                        let sy = y as isize + i as isize - r;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for j in 0..ks {
                            let sx = xx as isize + j as isize - r;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = (sy as usize * w + sx as usize) * c;
                            let kk = (i * ks + j) * c;
                            for ch in 0..c {
                                if let Some(gx) = gx.as_mut() {
                                    gx[src + ch] += kd[kk + ch] * go[ch];
                                }
                                if let Some(gk) = gk.as_mut() {
                                    gk[kk + ch] += xd[src + ch] * go[ch];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(gx) = gx {
                out.push((*x, gx));
            }
            if let Some(gk) = gk {
                out.push((*kernel, gk));
            }
        }
        Op::Gather { x, src } => {
            if needs(*x) {
                let mut gx = vec![T::zero(); val(*x).numel()];
                for (i, &s) in src.iter().enumerate() {
                    gx[s] += g[i];
                }
                out.push((*x, gx));
            }
        }
        Op::Concat(ia, ib) => {
            let ca = *val(*ia).shape().last().unwrap();
            let cb = *val(*ib).shape().last().unwrap();
            let rows = val(*ia).numel() / ca.max(1);
            if needs(*ia) {
                let mut ga = Vec::with_capacity(rows * ca);
                for r in 0..rows {
                    ga.extend_from_slice(&g[r * (ca + cb)..][..ca]);
                }
                out.push((*ia, ga));
            }
            if needs(*ib) {
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    gb.extend_from_slice(&g[r * (ca + cb) + ca..][..cb]);
                }
                out.push((*ib, gb));
            }
        }
        Op::Custom { inputs, rule } => {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            let flags: Vec<bool> = inputs.iter().map(|&i| needs(i)).collect();
            let grads = rule.backward(&vals, &node.value, g, &flags);
            for ((&i, flag), grad) in inputs.iter().zip(flags).zip(grads) {
                if let (true, Some(grad)) = (flag, grad) {
                    debug_assert_eq!(grad.len(), val(i).numel());
                    out.push((i, grad));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.input(t(&[2, 1], &[1., 1.]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[3., 7.]);
        assert_eq!(g.value(y).unwrap().shape(), &[2, 1]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.input(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0f32 } else { 0.0 }));
        let xt = Tensor::from_fn(&[3, 2], |i| i as f32 - 2.5);
        let x = g.input(xt.clone());
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).unwrap(), &xt);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err, TensorError::shape("matmul", &[2, 3], &[2, 3]));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[3], &[2, 3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[2, 3], &[]).unwrap(), vec![2, 3]);
        assert!(broadcast_shape("t", &[2, 3], &[2]).is_err());
        assert!(broadcast_shape("t", &[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f32>::zeros(&[2, 3, 2]), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn square_sum_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1., 2., 3.]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_twice_requires_reset() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(TensorError::BackwardTwice));
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1., 1.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]), true);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn foreign_var_is_detached() {
        let mut g1 = Graph::<f32>::new();
        let mut g2 = Graph::<f32>::new();
        let x = g1.leaf(Tensor::zeros(&[1]), true);
        assert_eq!(g2.sum(x).unwrap_err(), TensorError::Detached);
        assert_eq!(g2.backward(x).unwrap_err(), TensorError::Detached);
    }

    #[test]
    fn param_binding_is_shared() {
        let w = Tensor::<f32>::ones(&[2]).into_param();
        let mut g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        assert_eq!(a, b);
        let y = g.add(a, b).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.param_grad(&w).unwrap(), &[2., 2.]);
    }

    #[test]
    fn silu_and_softplus_values() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[0.0]));
        let s = g.silu(x).unwrap();
        let p = g.softplus(x).unwrap();
        assert_eq!(g.value(s).unwrap().data()[0], 0.0);
        assert!((g.value(p).unwrap().data()[0] - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_two_values() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1., 3.]));
        let gamma = g.input(Tensor::ones(&[2]));
        let beta = g.input(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let d = g.value(y).unwrap().data();
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[4], 7.0f32));
        let gamma = g.input(Tensor::ones(&[4]));
        let beta = g.input(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[2, 4]));
        let gamma = g.input(Tensor::ones(&[3]));
        let beta = g.input(Tensor::zeros(&[3]));
        assert!(g.layer_norm(x, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn dwconv_delta_kernel_is_identity() {
        let xt = Tensor::from_fn(&[4, 5, 2], |i| (i as f32).sin());
        let mut kt = Tensor::zeros(&[3, 3, 2]);
        kt.data_mut()[4 * 2] = 1.0;
        kt.data_mut()[4 * 2 + 1] = 1.0;
        let mut g = Graph::new();
        let x = g.input(xt.clone());
        let k = g.input(kt);
        let y = g.depthwise_conv2d(x, k).unwrap();
        assert_eq!(g.value(y).unwrap(), &xt);
    }

    #[test]
    fn dwconv_ones_window_sums_nine() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::ones(&[5, 5, 1]));
        let k = g.input(Tensor::ones(&[3, 3, 1]));
        let y = g.depthwise_conv2d(x, k).unwrap();
        let v = g.value(y).unwrap().data();
        assert_eq!(v[2 * 5 + 2], 9.0f32);
        assert_eq!(v[0], 4.0);
    }

    #[test]
    fn dwconv_rejects_even_kernel() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::ones(&[5, 5, 1]));
        let k = g.input(Tensor::ones(&[2, 2, 1]));
        assert!(g.depthwise_conv2d(x, k).is_err());
    }

    #[test]
    fn concat_and_gather_grads_route_back() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 1], &[1., 2.]), true);
        let b = g.leaf(t(&[2, 2], &[3., 4., 5., 6.]), true);
        let c = g.concat_last(a, b).unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[1., 3., 4., 2., 5., 6.]);
        let src: Arc<[usize]> = vec![5, 0, 0].into();
        let p = g.gather(c, src, &[3]).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2., 0.]);
        assert_eq!(g.grad(b).unwrap(), &[0., 0., 0., 1.]);
    }
}
