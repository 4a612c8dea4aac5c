use std::sync::Arc;

use rand::Rng;

use crate::error::TensorError;
use crate::nn::{join, Linear, Module};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

fn dims3<T: Scalar>(g: &Graph<T>, x: Var, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    let s = g.shape(x)?;
    if s.len() != 3 {
        return Err(TensorError::invalid(op, format!("expected H×W×C, got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// `h×w×c -> (h/r)×(w/r)×(r·r·c)`; channel block `dy·r + dx` holds pixel `(dy, dx)` of each patch.
pub fn space_to_depth<T: Scalar>(g: &mut Graph<T>, x: Var, r: usize) -> Result<Var, TensorError> {
    let (h, w, c) = dims3(g, x, "space_to_depth")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(TensorError::invalid(
            "space_to_depth",
            format!("{h}×{w} is not divisible by patch size {r}"),
        ));
    }
    if r == 1 {
        return Ok(x);
    }
    let (oh, ow, oc) = (h / r, w / r, r * r * c);
    let mut src = Vec::with_capacity(h * w * c);
    for y in 0..oh {
        for xx in 0..ow {
            for dy in 0..r {
                for dx in 0..r {
                    let base = ((y * r + dy) * w + xx * r + dx) * c;
                    src.extend(base..base + c);
                }
            }
        }
    }
    g.gather(x, Arc::from(src), &[oh, ow, oc])
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(g: &mut Graph<T>, x: Var, r: usize) -> Result<Var, TensorError> {
    let (h, w, c) = dims3(g, x, "depth_to_space")?;
    if r == 0 || c % (r * r) != 0 {
        return Err(TensorError::invalid(
            "depth_to_space",
            format!("{c} channels cannot be split into {r}×{r} pixels"),
        ));
    }
    if r == 1 {
        return Ok(x);
    }
    let oc = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut src = Vec::with_capacity(h * w * c);
    for y in 0..oh {
        for xx in 0..ow {
            let (py, dy, px, dx) = (y / r, y % r, xx / r, xx % r);
            let base = (py * w + px) * c + (dy * r + dx) * oc;
            src.extend(base..base + oc);
        }
    }
    g.gather(x, Arc::from(src), &[oh, ow, oc])
}

/// Splits an image into `P×P` patches and embeds each to `D` channels.
#[derive(Clone, Debug)]
pub struct PatchEmbed<T> {
    pub patch: usize,
    pub proj: Linear<T>,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new<R: Rng + ?Sized>(patch: usize, in_channels: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            patch,
            proj: Linear::new(patch * patch * in_channels, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, img: Var) -> Result<Var, TensorError> {
        let p = space_to_depth(g, img, self.patch)?;
        self.proj.forward(g, p)
    }
}

/// Maps `D` channels back to `P×P×C` pixels per token. Zero initialized.
#[derive(Clone, Debug)]
pub struct PatchHead<T> {
    pub patch: usize,
    pub proj: Linear<T>,
}

impl<T: Scalar> PatchHead<T> {
    pub fn new(patch: usize, dim: usize, out_channels: usize) -> Self {
        Self {
            patch,
            proj: Linear::zeros(dim, patch * patch * out_channels, true),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let y = self.proj.forward(g, x)?;
        depth_to_space(g, y, self.patch)
    }
}

/// `h×w×c -> (h/2)×(w/2)×2c`: concatenate each 2×2 neighbourhood, then project 4c to 2c.
#[derive(Clone, Debug)]
pub struct PatchMerge<T> {
    pub proj: Linear<T>,
}

impl<T: Scalar> PatchMerge<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(4 * channels, 2 * channels, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let (h, w, _) = dims3(g, x, "patch_merge")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::invalid("patch_merge", format!("{h}×{w} has an odd side")));
        }
        let p = space_to_depth(g, x, 2)?;
        self.proj.forward(g, p)
    }
}

/// `h×w×c -> 2h×2w×(c/2)`: project c to 2c, then spread four channel groups over 2×2 pixels.
#[derive(Clone, Debug)]
pub struct PatchExpand<T> {
    pub proj: Linear<T>,
}

impl<T: Scalar> PatchExpand<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        assert!(channels.is_multiple_of(2), "patch expand needs an even channel count");
        Self {
            proj: Linear::new(channels, 2 * channels, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let (_, _, c) = dims3(g, x, "patch_expand")?;
        if c % 2 != 0 {
            return Err(TensorError::invalid("patch_expand", format!("odd channel count {c}")));
        }
        let y = self.proj.forward(g, x)?;
        depth_to_space(g, y, 2)
    }
}

macro_rules! proj_module {
    ($($ty:ident),*) => {$(
        impl<T: Scalar> Module<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
                self.proj.visit(&join(prefix, "proj"), f);
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
                self.proj.visit_mut(&join(prefix, "proj"), f);
            }
        }
    )*};
}

proj_module!(PatchEmbed, PatchHead, PatchMerge, PatchExpand);
