use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::save_png;
use super::degrade::{degrade_with_seed, image_seed, DegradationSpec};
use super::metrics::{psnr, ssim};
use crate::arch::{count_flops, count_params, SerpentModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    /// Restored vs clean, dB.
    pub psnr: f64,
    pub ssim: f64,
    /// Degraded input vs clean, dB.
    pub input_psnr: f64,
    pub input_ssim: f64,
}

/// Evaluation results. The serialized form omits `wall_ms` so that repeated
/// runs produce identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_input_psnr: f64,
    pub mean_input_ssim: f64,
    pub params: usize,
    /// Forward FLOPs for one image at the resolution of the first image.
    pub flops: u64,
    #[serde(skip)]
    pub wall_ms: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn psnr_gain(&self) -> f64 {
        self.mean_psnr - self.mean_input_psnr
    }

    pub fn ssim_gain(&self) -> f64 {
        self.mean_ssim - self.mean_input_ssim
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Degrades image `i` with the seed derived from `(spec.seed, i)`, restores it
/// and scores both. With `dump_dir`, writes `input | output | target` strips.
pub fn evaluate<T: Scalar>(
    model: &SerpentModel<T>,
    images: &[(String, Tensor<T>)],
    spec: &DegradationSpec,
    dump_dir: Option<&Path>,
) -> Result<EvalReport> {
    spec.validate()?;
    let start = Instant::now();
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::with_capacity(images.len());
    for (i, (name, clean)) in images.iter().enumerate() {
        let s = clean.shape();
        if s.len() != 3 || s[2] != model.config.in_channels {
            return Err(Error::data(
                name,
                format!("image shape {s:?} does not match {} channels", model.config.in_channels),
            ));
        }
        model
            .config
            .check_input(s[0], s[1])
            .map_err(|e| Error::data(name, e.to_string()))?;
        let noisy = degrade_with_seed(clean, spec, image_seed(spec.seed, i as u64))?;
        let restored = model.apply(&noisy)?;
        if let Some(dir) = dump_dir {
            save_png(dir.join(name), &side_by_side(&[&noisy, &restored, clean]))?;
        }
        rows.push(EvalRow {
            name: name.clone(),
            psnr: psnr(&restored, clean)?,
            ssim: ssim(&restored, clean)?,
            input_psnr: psnr(&noisy, clean)?,
            input_ssim: ssim(&noisy, clean)?,
        });
    }
    let flops = images
        .first()
        .map(|(_, img)| count_flops(&model.config, img.shape()[0], img.shape()[1]))
        .transpose()?
        .map_or(0, |f| f.total);
    Ok(EvalReport {
        mean_psnr: mean(rows.iter().map(|r| r.psnr)),
        mean_ssim: mean(rows.iter().map(|r| r.ssim)),
        mean_input_psnr: mean(rows.iter().map(|r| r.input_psnr)),
        mean_input_ssim: mean(rows.iter().map(|r| r.input_ssim)),
        images: rows,
        params: count_params(model).total,
        flops,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Concatenates equally tall `H×W×C` images left to right.
fn side_by_side<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let (h, c) = (parts[0].shape()[0], parts[0].shape()[2]);
    let total_w: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(h * total_w * c);
    for y in 0..h {
        for p in parts {
            let w = p.shape()[1];
            out.extend_from_slice(&p.data()[y * w * c..(y + 1) * w * c]);
        }
    }
    Tensor::new(&[h, total_w, c], out).expect("matching heights")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_layout() {
        let a = Tensor::<f32>::from_fn(&[2, 1, 1], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 2, 1], |i| 10.0 + i as f32);
        let s = side_by_side(&[&a, &b]);
        assert_eq!(s.shape(), &[2, 3, 1]);
        assert_eq!(s.data(), &[0.0, 10.0, 11.0, 1.0, 12.0, 13.0]);
    }

    #[test]
    fn mean_of_nothing_is_zero() {
        assert_eq!(mean(std::iter::empty()), 0.0);
    }
}
