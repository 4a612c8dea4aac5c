use rand::Rng;

use super::Ss2dLayer;
use crate::error::TensorError;
use crate::nn::{join, DepthwiseConv, LayerNorm, Linear, Module};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Visual state space block on an `H×W×E` map.
///
/// ```text
/// z    = norm_in(x)
/// gate = silu(gate_proj(z))
/// h    = silu(dwconv3x3(main_proj(z)))
/// s    = norm_out(ss2d(h) + skip_gain ⊙ h)
/// out  = x + out_proj(s ⊙ gate)
/// ```
///
/// `out_proj` starts at zero so a fresh block is the identity map.
#[derive(Clone, Debug)]
pub struct VssBlock<T> {
    pub norm_in: LayerNorm<T>,
    pub gate_proj: Linear<T>,
    pub main_proj: Linear<T>,
    pub conv: DepthwiseConv<T>,
    pub ss2d: Ss2dLayer<T>,
    pub skip_gain: Tensor<T>,
    pub norm_out: LayerNorm<T>,
    pub out_proj: Linear<T>,
}

pub const VSS_CONV_SIZE: usize = 3;

impl<T: Scalar> VssBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, state_dim: usize, rng: &mut R) -> Self {
        Self {
            norm_in: LayerNorm::new(channels),
            gate_proj: Linear::new(channels, channels, true, rng),
            main_proj: Linear::new(channels, channels, true, rng),
            conv: DepthwiseConv::new(VSS_CONV_SIZE, channels, rng),
            ss2d: Ss2dLayer::new(channels, state_dim, rng),
            skip_gain: Tensor::ones(&[channels]).into_param(),
            norm_out: LayerNorm::new(channels),
            out_proj: Linear::zeros(channels, channels, true),
        }
    }

    pub fn channels(&self) -> usize {
        self.skip_gain.numel()
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let s = g.shape(x)?;
        if s.len() != 3 || s[2] != self.channels() {
            let s = s.to_vec();
            return Err(TensorError::shape("vss_block", &s, &[self.channels()]));
        }
        let z = self.norm_in.forward(g, x)?;
        let gate = self.gate_proj.forward(g, z)?;
        let gate = g.silu(gate)?;
        let h = self.main_proj.forward(g, z)?;
        let h = self.conv.forward(g, h)?;
        let h = g.silu(h)?;
        let scanned = self.ss2d.forward(g, h)?;
        let gain = g.param(&self.skip_gain);
        let skip = g.mul(h, gain)?;
        let s = g.add(scanned, skip)?;
        let s = self.norm_out.forward(g, s)?;
        let m = g.mul(s, gate)?;
        let y = self.out_proj.forward(g, m)?;
        g.add(x, y)
    }

    pub fn apply(&self, feat: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut g = Graph::new();
        let x = g.input(feat.detach());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y)?.clone())
    }
}

impl<T: Scalar> Module<T> for VssBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm_in.visit(&join(prefix, "norm_in"), f);
        self.gate_proj.visit(&join(prefix, "gate_proj"), f);
        self.main_proj.visit(&join(prefix, "main_proj"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.ss2d.visit(&join(prefix, "ss2d"), f);
        f(&join(prefix, "skip_gain"), &self.skip_gain);
        self.norm_out.visit(&join(prefix, "norm_out"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm_in.visit_mut(&join(prefix, "norm_in"), f);
        self.gate_proj.visit_mut(&join(prefix, "gate_proj"), f);
        self.main_proj.visit_mut(&join(prefix, "main_proj"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.ss2d.visit_mut(&join(prefix, "ss2d"), f);
        f(&join(prefix, "skip_gain"), &mut self.skip_gain);
        self.norm_out.visit_mut(&join(prefix, "norm_out"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}
