use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Blur-plus-noise degradation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationSpec {
    /// Odd blur kernel extent in pixels.
    pub kernel_size: usize,
    /// Blur standard deviation in pixels; `None` means `kernel_size / 6`.
    pub blur_sigma: Option<f64>,
    /// Noise standard deviation on the [0, 1] intensity scale.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Clamp to [0, 1] after adding noise.
    pub clamp: bool,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            kernel_size: 9,
            blur_sigma: None,
            noise_sigma: 0.05,
            seed: 0,
            clamp: true,
        }
    }
}

impl DegradationSpec {
    pub fn sigma(&self) -> f64 {
        self.blur_sigma.unwrap_or(self.kernel_size as f64 / 6.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "degradation.kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(self.sigma() > 0.0) {
            return Err(Error::Config(format!(
                "degradation.blur_sigma must be positive, got {}",
                self.sigma()
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "degradation.noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<Vec<f64>> {
        gaussian_kernel(self.kernel_size, self.sigma())
    }
}

/// Normalized isotropic Gaussian, `size × size` row-major.
/// An infinite `sigma` gives the box filter.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size.is_multiple_of(2) {
        return Err(Error::Config(format!("blur kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let dy = (i / size) as f64 - r;
            let dx = (i % size) as f64 - r;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines seeds into one; order matters.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Noise seed for image `index` of a set; independent of processing order.
pub fn image_seed(seed: u64, index: u64) -> u64 {
    mix_seed(&[seed, index])
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Blurs `img` (`H×W×C` or `H×W`) and adds noise drawn from `spec.seed`.
pub fn degrade<T: Scalar>(img: &Tensor<T>, spec: &DegradationSpec) -> Result<Tensor<T>> {
    degrade_with_seed(img, spec, spec.seed)
}

/// As [`degrade`] with an explicit noise seed.
pub fn degrade_with_seed<T: Scalar>(img: &Tensor<T>, spec: &DegradationSpec, seed: u64) -> Result<Tensor<T>> {
    spec.validate()?;
    let s = img.shape();
    let (h, w, c) = match *s {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(TensorError::invalid("degrade", format!("expected H×W or H×W×C, got {s:?}")).into()),
    };
    let k = spec.kernel()?;
    let ks = spec.kernel_size;
    let r = (ks / 2) as isize;
    let src = img.data();
    let mut out = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for ky in 0..ks {
                    let sy = reflect(y as isize + ky as isize - r, h);
                    for kx in 0..ks {
                        let sx = reflect(x as isize + kx as isize - r, w);
                        acc += k[ky * ks + kx] * src[(sy * w + sx) * c + ch].as_f64();
                    }
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        out.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    if spec.clamp {
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(Tensor::new(s, out.into_iter().map(T::of).collect())?)
}
