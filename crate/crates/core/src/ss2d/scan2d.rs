use std::sync::Arc;

use rand::Rng;

use crate::error::TensorError;
use crate::nn::{join, Module};
use crate::scalar::Scalar;
use crate::ssm::SelectiveSsm;
use crate::tensor::{Graph, Tensor, Var};

/// Row-major raster starting from one image corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    /// Top-left to bottom-right.
    TopLeft,
    /// Top-right to bottom-left.
    TopRight,
    /// Bottom-left to top-right.
    BottomLeft,
    /// Bottom-right to top-left.
    BottomRight,
}

impl ScanDirection {
    /// Canonical enumeration; also the reduction order of [`Ss2dLayer`].
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::TopLeft,
        ScanDirection::TopRight,
        ScanDirection::BottomLeft,
        ScanDirection::BottomRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Direction whose raster is this one mirrored left-right.
    pub fn mirrored(self) -> Self {
        match self {
            ScanDirection::TopLeft => ScanDirection::TopRight,
            ScanDirection::TopRight => ScanDirection::TopLeft,
            ScanDirection::BottomLeft => ScanDirection::BottomRight,
            ScanDirection::BottomRight => ScanDirection::BottomLeft,
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            ScanDirection::TopLeft => ScanDirection::BottomRight,
            ScanDirection::BottomRight => ScanDirection::TopLeft,
            ScanDirection::TopRight => ScanDirection::BottomLeft,
            ScanDirection::BottomLeft => ScanDirection::TopRight,
        }
    }

    /// Pixel index (`y*w + x`) visited at each sequence position.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let (flip_rows, flip_cols) = match self {
            ScanDirection::TopLeft => (false, false),
            ScanDirection::TopRight => (false, true),
            ScanDirection::BottomLeft => (true, false),
            ScanDirection::BottomRight => (true, true),
        };
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            let y = if flip_rows { h - 1 - r } else { r };
            for c in 0..w {
                let x = if flip_cols { w - 1 - c } else { c };
                out.push(y * w + x);
            }
        }
        out
    }

    fn element_sources(self, h: usize, w: usize, e: usize, inverse: bool) -> Arc<[usize]> {
        let order = self.order(h, w);
        let mut pix = vec![0usize; h * w];
        if inverse {
            for (p, &q) in order.iter().enumerate() {
                pix[q] = p;
            }
        } else {
            pix = order;
        }
        pix.iter().flat_map(|&p| (0..e).map(move |c| p * e + c)).collect()
    }

    /// `H×W×E` map to `(H·W)×E` sequence on the graph.
    pub fn unroll_var<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let s = g.shape(x)?.to_vec();
        if s.len() != 3 {
            return Err(TensorError::invalid("unroll", format!("expected H×W×E, got {s:?}")));
        }
        let src = self.element_sources(s[0], s[1], s[2], false);
        g.gather(x, src, &[s[0] * s[1], s[2]])
    }

    /// Inverse of [`ScanDirection::unroll_var`].
    pub fn reroll_var<T: Scalar>(self, g: &mut Graph<T>, seq: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let s = g.shape(seq)?.to_vec();
        if s.len() != 2 || s[0] != h * w {
            return Err(TensorError::shape("reroll", &s, &[h, w]));
        }
        let src = self.element_sources(h, w, s[1], true);
        g.gather(seq, src, &[h, w, s[1]])
    }
}

pub fn unroll<T: Scalar>(feat: &Tensor<T>, dir: ScanDirection) -> Result<Tensor<T>, TensorError> {
    let mut g = Graph::new();
    let x = g.input(feat.detach());
    let y = dir.unroll_var(&mut g, x)?;
    Ok(g.value(y)?.clone())
}

pub fn reroll<T: Scalar>(seq: &Tensor<T>, dir: ScanDirection, h: usize, w: usize) -> Result<Tensor<T>, TensorError> {
    let mut g = Graph::new();
    let x = g.input(seq.detach());
    let y = dir.reroll_var(&mut g, x, h, w)?;
    Ok(g.value(y)?.clone())
}

/// Four independent selective SSMs, one per scan direction, whose rerolled
/// outputs are summed.
#[derive(Clone, Debug)]
pub struct Ss2dLayer<T> {
    pub scans: [SelectiveSsm<T>; 4],
}

impl<T: Scalar> Ss2dLayer<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, state_dim: usize, rng: &mut R) -> Self {
        Self {
            scans: std::array::from_fn(|_| SelectiveSsm::new(channels, state_dim, rng)),
        }
    }

    pub fn channels(&self) -> usize {
        self.scans[0].channels()
    }

    pub fn state_dim(&self) -> usize {
        self.scans[0].state_dim()
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        self.forward_ordered(g, x, ScanDirection::ALL)
    }

    /// Evaluates the directional scans in `order`; the reduction always runs
    /// in canonical order, so the result does not depend on `order`.
    pub fn forward_ordered(&self, g: &mut Graph<T>, x: Var, order: [ScanDirection; 4]) -> Result<Var, TensorError> {
        let s = g.shape(x)?.to_vec();
        if s.len() != 3 || s[2] != self.channels() {
            return Err(TensorError::shape("ss2d", &s, &[self.channels()]));
        }
        let (h, w) = (s[0], s[1]);
        let mut outs: [Option<Var>; 4] = [None; 4];
        for dir in order {
            let seq = dir.unroll_var(g, x)?;
            let y = self.scans[dir.index()].forward(g, seq)?;
            outs[dir.index()] = Some(dir.reroll_var(g, y, h, w)?);
        }
        let outs = outs.map(|o| o.expect("order must list every direction once"));
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = g.add(acc, o)?;
        }
        Ok(acc)
    }

    /// Forward pass on a detached feature map.
    pub fn apply(&self, feat: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut g = Graph::new();
        let x = g.input(feat.detach());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y)?.clone())
    }
}

impl<T: Scalar> Module<T> for Ss2dLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, s) in self.scans.iter().enumerate() {
            s.visit(&join(prefix, &format!("dir{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, s) in self.scans.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("dir{i}")), f);
        }
    }
}
