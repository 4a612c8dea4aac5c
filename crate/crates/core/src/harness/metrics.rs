use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reported PSNR when the images are (numerically) identical.
pub const PSNR_CAP: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, a.shape(), b.shape()).into());
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for intensities in [0, 1].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let n = a.numel().max(1) as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse < MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over valid window positions, averaged over channels.
/// Accepts `H×W` or `H×W×C`.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (h, w, c) = match *a.shape() {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        ref s => return Err(TensorError::invalid("ssim", format!("expected H×W or H×W×C, got {s:?}")).into()),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(TensorError::invalid(
            "ssim",
            format!("image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"),
        )
        .into());
    }
    let r = (SSIM_WINDOW / 2) as f64;
    let mut win: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);

    let mut acc = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = (0..h * w).map(|i| a.data()[i * c + ch].as_f64()).collect();
        let y: Vec<f64> = (0..h * w).map(|i| b.data()[i * c + ch].as_f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &win);
        let my = filter_valid(&y, h, w, &win);
        let exx = filter_valid(&xx, h, w, &win);
        let eyy = filter_valid(&yy, h, w, &win);
        let exy = filter_valid(&xy, h, w, &win);
        let n = mx.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        acc += sum / n as f64;
    }
    Ok(acc / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::<f64>::zeros(&[10, 10]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Tensor::<f64>::full(&[10, 10], 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = Tensor::<f64>::ones(&[10, 10]);
        assert!(psnr(&a, &c).unwrap().abs() < 1e-12);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 2]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let a = Tensor::<f64>::from_fn(&[16, 16, 3], |i| ((i * 37) % 101) as f64 / 100.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_checkerboard_inverse_is_negative() {
        let a = Tensor::<f64>::from_fn(&[16, 16], |i| ((i / 16 + i % 16) % 2) as f64);
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_small() {
        let a = Tensor::<f32>::zeros(&[10, 12]);
        assert!(ssim(&a, &a).is_err());
    }
}
