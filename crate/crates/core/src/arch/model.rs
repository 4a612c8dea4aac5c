use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::SerpentConfig;
use super::patch::{PatchEmbed, PatchExpand, PatchHead, PatchMerge};
use crate::error::{Error, Result, TensorError};
use crate::nn::{join, Linear, Module};
use crate::scalar::Scalar;
use crate::ss2d::VssBlock;
use crate::tensor::{Graph, Tensor, Var};

/// Stack of `n` VSS blocks at one scale; `n = 0` is the identity.
#[derive(Clone, Debug)]
pub struct SerpentBlock<T> {
    pub blocks: Vec<VssBlock<T>>,
}

impl<T: Scalar> SerpentBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, state_dim: usize, depth: usize, rng: &mut R) -> Self {
        Self {
            blocks: (0..depth).map(|_| VssBlock::new(channels, state_dim, rng)).collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, mut x: Var) -> Result<Var, TensorError> {
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        Ok(x)
    }
}

impl<T: Scalar> Module<T> for SerpentBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Encoder stage: Serpent block, then patch merging.
#[derive(Clone, Debug)]
pub struct DownStage<T> {
    pub block: SerpentBlock<T>,
    pub merge: PatchMerge<T>,
}

/// Decoder stage: patch expanding, skip fusion, then Serpent block.
#[derive(Clone, Debug)]
pub struct UpStage<T> {
    pub expand: PatchExpand<T>,
    /// Concatenated `[upsampled, skip]` (2c) projected back to c.
    pub fuse: Linear<T>,
    pub block: SerpentBlock<T>,
}

/// Patchifier, `num_scales - 1` down stages, bottleneck, mirrored up stages
/// with skip connections, and an unpatchifying head.
#[derive(Clone, Debug)]
pub struct SerpentModel<T> {
    pub config: SerpentConfig,
    pub embed: PatchEmbed<T>,
    pub down: Vec<DownStage<T>>,
    pub bottleneck: SerpentBlock<T>,
    /// Indexed by scale: `up[s]` produces scale `s` from scale `s + 1`.
    pub up: Vec<UpStage<T>>,
    pub head: PatchHead<T>,
}

impl<T: Scalar> SerpentModel<T> {
    /// Builds a model whose head and VSS output projections start at zero,
    /// so with the global residual the fresh model maps every image to itself.
    pub fn new(config: SerpentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let embed = PatchEmbed::new(c.patch_size, c.in_channels, c.embed_dim, &mut rng);
        let last = c.num_scales - 1;
        let down = (0..last)
            .map(|s| {
                let ch = c.channels(s);
                DownStage {
                    block: SerpentBlock::new(ch, c.state_dim(ch), c.depth, &mut rng),
                    merge: PatchMerge::new(ch, &mut rng),
                }
            })
            .collect();
        let ch = c.channels(last);
        let bottleneck = SerpentBlock::new(ch, c.state_dim(ch), c.depth, &mut rng);
        let up = (0..last)
            .map(|s| {
                let ch = c.channels(s);
                UpStage {
                    expand: PatchExpand::new(c.channels(s + 1), &mut rng),
                    fuse: Linear::new(2 * ch, ch, true, &mut rng),
                    block: SerpentBlock::new(ch, c.state_dim(ch), c.depth, &mut rng),
                }
            })
            .collect();
        let head = PatchHead::new(c.patch_size, c.embed_dim, c.in_channels);
        Ok(Self {
            config,
            embed,
            down,
            bottleneck,
            up,
            head,
        })
    }

    /// Replaces the zero-initialized weights (head and VSS output projections)
    /// with small Gaussian values.
    pub fn randomize_zero_init<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        self.visit_mut("", &mut |name, t| {
            if name.starts_with("head.") || name.contains(".out_proj.") {
                *t = Tensor::randn(t.shape(), std, rng).into_param();
            }
        });
    }

    pub fn forward(&self, g: &mut Graph<T>, img: Var) -> Result<Var, TensorError> {
        self.forward_impl(g, img, false)
    }

    /// Forward pass with every skip tensor replaced by zeros.
    pub fn forward_without_skips(&self, g: &mut Graph<T>, img: Var) -> Result<Var, TensorError> {
        self.forward_impl(g, img, true)
    }

    fn forward_impl(&self, g: &mut Graph<T>, img: Var, zero_skips: bool) -> Result<Var, TensorError> {
        let s = g.shape(img)?.to_vec();
        if s.len() != 3 || s[2] != self.config.in_channels {
            return Err(TensorError::invalid(
                "serpent",
                format!("expected H×W×{}, got {s:?}", self.config.in_channels),
            ));
        }
        self.config
            .check_input(s[0], s[1])
            .map_err(|e| TensorError::invalid("serpent", e.to_string()))?;
        let mut x = self.embed.forward(g, img)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for stage in &self.down {
            x = stage.block.forward(g, x)?;
            skips.push(x);
            x = stage.merge.forward(g, x)?;
        }
        x = self.bottleneck.forward(g, x)?;
        for (stage, skip) in self.up.iter().zip(skips).rev() {
            x = stage.expand.forward(g, x)?;
            let skip = if zero_skips {
                let shape = g.shape(skip)?.to_vec();
                g.input(Tensor::zeros(&shape))
            } else {
                skip
            };
            let cat = g.concat_last(x, skip)?;
            x = stage.fuse.forward(g, cat)?;
            x = stage.block.forward(g, x)?;
        }
        let y = self.head.forward(g, x)?;
        if self.config.global_residual {
            g.add(y, img)
        } else {
            Ok(y)
        }
    }

    /// Restores one `H×W×C` image.
    pub fn apply(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(img.detach());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y)?.clone())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, _| out.push(n.to_string()));
        out
    }

    /// Loads parameters by name; every model parameter must be present with a matching shape.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let map: BTreeMap<&str, &Tensor<T>> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        self.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match map.get(name) {
                Some(src) if src.shape() == t.shape() => {
                    t.data_mut().copy_from_slice(src.data());
                }
                Some(src) => {
                    err = Some(Error::Format(format!(
                        "tensor `{name}` has shape {:?}, model expects {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(Error::Format(format!("missing tensor `{name}`"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

impl<T: Scalar> Module<T> for SerpentModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (s, st) in self.down.iter().enumerate() {
            st.block.visit(&join(prefix, &format!("down{s}.block")), f);
            st.merge.visit(&join(prefix, &format!("down{s}.merge")), f);
        }
        self.bottleneck.visit(&join(prefix, "bottleneck"), f);
        for (s, st) in self.up.iter().enumerate() {
            st.expand.visit(&join(prefix, &format!("up{s}.expand")), f);
            st.fuse.visit(&join(prefix, &format!("up{s}.fuse")), f);
            st.block.visit(&join(prefix, &format!("up{s}.block")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (s, st) in self.down.iter_mut().enumerate() {
            st.block.visit_mut(&join(prefix, &format!("down{s}.block")), f);
            st.merge.visit_mut(&join(prefix, &format!("down{s}.merge")), f);
        }
        self.bottleneck.visit_mut(&join(prefix, "bottleneck"), f);
        for (s, st) in self.up.iter_mut().enumerate() {
            st.expand.visit_mut(&join(prefix, &format!("up{s}.expand")), f);
            st.fuse.visit_mut(&join(prefix, &format!("up{s}.fuse")), f);
            st.block.visit_mut(&join(prefix, &format!("up{s}.block")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Learnable scalar counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    /// Everything except the patch embedding and the head.
    pub backbone: usize,
    pub patch_embed: usize,
    pub head: usize,
    /// Keyed by the first component of the parameter name (`embed`, `down0`, ...).
    pub per_module: BTreeMap<String, usize>,
}

pub fn count_params<T: Scalar, M: Module<T>>(model: &M) -> ParamReport {
    let mut per_module = BTreeMap::new();
    model.visit("", &mut |name, t| {
        let top = name.split('.').next().unwrap_or(name).to_string();
        *per_module.entry(top).or_insert(0) += t.numel();
    });
    let total = per_module.values().sum();
    let patch_embed = per_module.get("embed").copied().unwrap_or(0);
    let head = per_module.get("head").copied().unwrap_or(0);
    ParamReport {
        total,
        backbone: total - patch_embed - head,
        patch_embed,
        head,
        per_module,
    }
}
