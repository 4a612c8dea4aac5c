use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model family members differing only in patch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Patch size 4.
    B,
    /// Patch size 2.
    L,
    /// Patch size 1.
    H,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::B, Variant::L, Variant::H];

    pub fn patch_size(self) -> usize {
        match self {
            Variant::B => 4,
            Variant::L => 2,
            Variant::H => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::B => "Serpent-B",
            Variant::L => "Serpent-L",
            Variant::H => "Serpent-H",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SerpentConfig {
    /// Side of the square patches embedded by the patchifier, in pixels.
    pub patch_size: usize,
    /// Channels after patch embedding.
    pub embed_dim: usize,
    /// VSS blocks per Serpent block.
    pub depth: usize,
    /// Resolution levels including the bottleneck.
    pub num_scales: usize,
    /// SSM state dimension per channel, as a fraction of the channel count.
    pub state_ratio: f64,
    /// Image channels.
    pub in_channels: usize,
    /// Add the input image to the network output.
    pub global_residual: bool,
}

impl Default for SerpentConfig {
    fn default() -> Self {
        Self {
            patch_size: 1,
            embed_dim: 32,
            depth: 2,
            num_scales: 4,
            state_ratio: 1.0 / 6.0,
            in_channels: 3,
            global_residual: true,
        }
    }
}

impl SerpentConfig {
    pub fn variant(v: Variant) -> Self {
        Self {
            patch_size: v.patch_size(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 {
            return bad("patch_size must be at least 1".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be at least 1".into());
        }
        if self.num_scales == 0 || self.num_scales > 8 {
            return bad(format!("num_scales must be in 1..=8, got {}", self.num_scales));
        }
        if !(self.state_ratio > 0.0 && self.state_ratio.is_finite()) {
            return bad(format!("state_ratio must be positive, got {}", self.state_ratio));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be at least 1".into());
        }
        Ok(())
    }

    /// Channel count at scale `s` (0 = finest).
    pub fn channels(&self, scale: usize) -> usize {
        self.embed_dim << scale
    }

    /// SSM state dimension for a map with `channels` channels: nearest integer to
    /// `channels·state_ratio`, at least 1.
    pub fn state_dim(&self, channels: usize) -> usize {
        ((channels as f64 * self.state_ratio).round() as usize).max(1)
    }

    /// Input side lengths must be multiples of this.
    pub fn size_factor(&self) -> usize {
        self.patch_size << (self.num_scales - 1)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.size_factor();
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "input {h}×{w} is not divisible by {f} (patch size P={} times 2^{})",
                self.patch_size,
                self.num_scales - 1
            )));
        }
        Ok(())
    }

    /// Token grid at scale `s` for an `h×w` input.
    pub fn grid(&self, h: usize, w: usize, scale: usize) -> (usize, usize) {
        ((h / self.patch_size) >> scale, (w / self.patch_size) >> scale)
    }

    /// Field-by-field comparison; the first differing field is reported.
    pub fn ensure_matches(&self, checkpoint: &SerpentConfig) -> Result<()> {
        let fields: [(&str, String, String); 7] = [
            (
                "patch_size",
                checkpoint.patch_size.to_string(),
                self.patch_size.to_string(),
            ),
            (
                "embed_dim",
                checkpoint.embed_dim.to_string(),
                self.embed_dim.to_string(),
            ),
            ("depth", checkpoint.depth.to_string(), self.depth.to_string()),
            (
                "num_scales",
                checkpoint.num_scales.to_string(),
                self.num_scales.to_string(),
            ),
            (
                "state_ratio",
                checkpoint.state_ratio.to_string(),
                self.state_ratio.to_string(),
            ),
            (
                "in_channels",
                checkpoint.in_channels.to_string(),
                self.in_channels.to_string(),
            ),
            (
                "global_residual",
                checkpoint.global_residual.to_string(),
                self.global_residual.to_string(),
            ),
        ];
        for (field, ck, cfg) in fields {
            if ck != cfg {
                return Err(Error::Mismatch {
                    field: field.to_string(),
                    checkpoint: ck,
                    config: cfg,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = SerpentConfig::default();
        assert_eq!((c.embed_dim, c.depth, c.num_scales, c.in_channels), (32, 2, 4, 3));
        assert_eq!(c.channels(3), 256);
        assert_eq!(c.state_dim(32), 5);
        assert_eq!(c.state_dim(256), 43);
        assert_eq!(c.state_dim(2), 1);
    }

    #[test]
    fn divisibility_error_names_sizes() {
        let c = SerpentConfig::variant(Variant::B);
        assert!(c.check_input(32, 64).is_ok());
        let err = c.check_input(36, 32).unwrap_err().to_string();
        assert!(err.contains("36") && err.contains("P=4"), "{err}");
    }

    #[test]
    fn mismatch_names_field() {
        let a = SerpentConfig::variant(Variant::H);
        let b = SerpentConfig::variant(Variant::L);
        match a.ensure_matches(&b) {
            Err(Error::Mismatch { field, .. }) => assert_eq!(field, "patch_size"),
            other => panic!("{other:?}"),
        }
    }
}
