use serde::{Deserialize, Serialize};

use super::config::SerpentConfig;
use crate::error::Result;
use crate::ss2d::ScanDirection;

/// Layer normalization: mean, variance, normalize, affine.
const NORM_PER_ELEM: u64 = 8;
const SILU_PER_ELEM: u64 = 4;
const SOFTPLUS_PER_ELEM: u64 = 4;
/// Discretization, state update and readout per (step, channel, state) triple.
/// Matches the instrumented scan: 8 arithmetic plus 2 transcendental.
pub const SCAN_PER_STATE: u64 = 10;

/// Analytic floating point operation counts for one forward pass.
/// A multiply-add counts as two operations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub height: usize,
    pub width: usize,
    /// Dense projections (patch embed, VSS in/out, merge, expand, fuse, head).
    pub linear: u64,
    pub norm: u64,
    pub conv: u64,
    /// Selective recurrences.
    pub scan: u64,
    /// Step-size, input and output projections feeding the recurrences.
    pub scan_projection: u64,
    pub elementwise: u64,
    pub total: u64,
    /// Same network with every four-directional scan replaced by global
    /// self-attention over the same tokens. Reference only.
    pub attention_reference: u64,
}

impl FlopsReport {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Scan plus its projections.
    pub fn ssm_path(&self) -> u64 {
        self.scan + self.scan_projection
    }

    /// `attention_reference / total`.
    pub fn attention_ratio(&self) -> f64 {
        self.attention_reference as f64 / self.total as f64
    }
}

/// Global self-attention over `tokens` tokens of width `dim`:
/// Q/K/V/O projections `8·L·E²` plus scores and mixing `4·L²·E`.
pub fn attention_flops(tokens: usize, dim: usize) -> u64 {
    let (l, e) = (tokens as u64, dim as u64);
    8 * l * e * e + 4 * l * l * e
}

fn linear(tokens: u64, fan_in: u64, fan_out: u64) -> u64 {
    2 * tokens * fan_in * fan_out + tokens * fan_out
}

struct Ss2dCost {
    projection: u64,
    scan: u64,
    elementwise: u64,
}

fn ss2d_cost(tokens: u64, e: u64, n: u64) -> Ss2dCost {
    let dirs = ScanDirection::ALL.len() as u64;
    Ss2dCost {
        projection: dirs * (linear(tokens, e, e) + SOFTPLUS_PER_ELEM * tokens * e + 2 * 2 * tokens * e * n),
        scan: dirs * SCAN_PER_STATE * tokens * e * n,
        elementwise: (dirs - 1) * tokens * e,
    }
}

/// Adds one Serpent block and returns the part spent in four-directional scanning.
fn add_serpent_block(r: &mut FlopsReport, cfg: &SerpentConfig, tokens: u64, channels: usize) -> u64 {
    let e = channels as u64;
    let n = cfg.state_dim(channels) as u64;
    let k = crate::ss2d::VSS_CONV_SIZE as u64;
    let l = tokens;
    let mut ss2d = 0;
    for _ in 0..cfg.depth {
        r.norm += 2 * NORM_PER_ELEM * l * e;
        r.linear += 3 * linear(l, e, e);
        r.conv += 2 * k * k * l * e + l * e;
        // silu(gate), silu(conv), skip gain mul + add, gating mul, residual add
        r.elementwise += 2 * SILU_PER_ELEM * l * e + 4 * l * e;
        let s = ss2d_cost(l, e, n);
        r.scan_projection += s.projection;
        r.scan += s.scan;
        r.elementwise += s.elementwise;
        ss2d += s.projection + s.scan + s.elementwise;
        r.attention_reference += attention_flops(l as usize, channels);
    }
    ss2d
}

/// Counts operations for an `h×w` input.
pub fn count_flops(cfg: &SerpentConfig, h: usize, w: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    cfg.check_input(h, w)?;
    let mut r = FlopsReport {
        height: h,
        width: w,
        ..FlopsReport::default()
    };
    let tokens = |s: usize| {
        let (gh, gw) = cfg.grid(h, w, s);
        (gh * gw) as u64
    };
    let p2c = (cfg.patch_size * cfg.patch_size * cfg.in_channels) as u64;
    let d = cfg.embed_dim as u64;
    r.linear += linear(tokens(0), p2c, d);
    let last = cfg.num_scales - 1;
    let mut ss2d = 0;
    for s in 0..last {
        let c = cfg.channels(s) as u64;
        ss2d += add_serpent_block(&mut r, cfg, tokens(s), cfg.channels(s));
        r.linear += linear(tokens(s + 1), 4 * c, 2 * c);
    }
    ss2d += add_serpent_block(&mut r, cfg, tokens(last), cfg.channels(last));
    for s in (0..last).rev() {
        let c = cfg.channels(s) as u64;
        r.linear += linear(tokens(s + 1), 2 * c, 4 * c);
        r.linear += linear(tokens(s), 2 * c, c);
        ss2d += add_serpent_block(&mut r, cfg, tokens(s), cfg.channels(s));
    }
    r.linear += linear(tokens(0), d, p2c);
    if cfg.global_residual {
        r.elementwise += (h * w * cfg.in_channels) as u64;
    }
    r.total = r.linear + r.norm + r.conv + r.scan + r.scan_projection + r.elementwise;
    r.attention_reference += r.total - ss2d;
    Ok(r)
}
