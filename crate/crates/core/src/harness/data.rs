use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::data(dir, e.to_string()))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::data(dir, e.to_string()))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Decodes a PNG into an `H×W×channels` tensor in [0, 1]; `channels` is 1 or 3.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>, channels: usize) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        _ => {
            return Err(Error::Config(format!(
                "images must have 1 or 3 channels, got {channels}"
            )))
        }
    };
    let data = raw.into_iter().map(|v| T::of(v as f64 / 255.0)).collect();
    Ok(Tensor::new(&[h, w, channels], data)?)
}

/// Writes an `H×W×1` or `H×W×3` tensor as 8-bit PNG, clamping to [0, 1].
pub fn save_png<T: Scalar>(path: impl AsRef<Path>, img: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = match *img.shape() {
        [h, w] => (h, w, 1),
        [h, w, c] if c == 1 || c == 3 => (h, w, c),
        ref s => return Err(TensorError::invalid("save_png", format!("expected H×W×1 or H×W×3, got {s:?}")).into()),
    };
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w32, h32) = (w as u32, h as u32);
    let dynamic = if c == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w32, h32, bytes).expect("sized buffer"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w32, h32, bytes).expect("sized buffer"))
    };
    dynamic.save(path)?;
    Ok(())
}

/// Number of training images when the last 10% (rounded down) are held out.
/// Sets with fewer than ten images hold out nothing.
pub fn split_validation(n: usize) -> usize {
    n - n / 10
}

fn window<T: Scalar>(img: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 || top + h > s[0] || left + w > s[1] {
        return Err(TensorError::invalid("crop", format!("{h}×{w} window at ({top}, {left}) outside {s:?}")).into());
    }
    let (iw, c) = (s[1], s[2]);
    let mut out = Vec::with_capacity(h * w * c);
    for y in top..top + h {
        let start = (y * iw + left) * c;
        out.extend_from_slice(&img.data()[start..start + w * c]);
    }
    Ok(Tensor::new(&[h, w, c], out)?)
}

pub fn center_crop<T: Scalar>(img: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 || h > s[0] || w > s[1] {
        return Err(TensorError::invalid("crop", format!("{h}×{w} does not fit in {s:?}")).into());
    }
    window(img, (s[0] - h) / 2, (s[1] - w) / 2, h, w)
}

pub fn random_crop<T: Scalar, R: Rng + ?Sized>(img: &Tensor<T>, size: usize, rng: &mut R) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 || size > s[0] || size > s[1] {
        return Err(TensorError::invalid("crop", format!("{size}×{size} does not fit in {s:?}")).into());
    }
    let top = rng.random_range(0..=s[0] - size);
    let left = rng.random_range(0..=s[1] - size);
    window(img, top, left, size, size)
}

/// Mirrors an `H×W×C` image left to right.
pub fn hflip<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let s = img.shape();
    let (w, c) = (s[1], s[2]);
    Tensor::from_fn(s, |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        img.data()[(y * w + (w - 1 - x)) * c + ch]
    })
}

/// Named images decoded from a directory, in sorted file-name order.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub items: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Dataset<T> {
    pub fn load(dir: impl AsRef<Path>, channels: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(Error::data(dir, "no PNG images found"));
        }
        let items = files
            .iter()
            .map(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                Ok((name, load_image(p, channels)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Training and validation halves; the validation part is the last 10% of
    /// names, or the whole set when it is too small to hold anything out.
    pub fn split(&self) -> (&[(String, Tensor<T>)], &[(String, Tensor<T>)]) {
        let n = split_validation(self.items.len());
        if n == self.items.len() {
            (&self.items, &self.items)
        } else {
            self.items.split_at(n)
        }
    }
}

/// Writes `count` procedural RGB test images (gradients, rectangles, discs and
/// stripes with hard edges) named `img_0000.png`, ... into `dir`.
pub fn synthesize_dataset(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let img = synth_image(size, &mut rng);
        let path = dir.join(format!("img_{i:04}.png"));
        save_png(&path, &img)?;
        paths.push(path);
    }
    Ok(paths)
}

fn synth_image<R: Rng>(size: usize, rng: &mut R) -> Tensor<f64> {
    let s = size as f64;
    let mut px = vec![0.0f64; size * size * 3];
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let slope: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f64 * angle.cos() + y as f64 * angle.sin()) / s).clamp(-1.0, 1.0);
            for c in 0..3 {
                px[(y * size + x) * 3 + c] = base[c] + slope[c] * t;
            }
        }
    }
    let shapes = rng.random_range(3..8);
    for _ in 0..shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let cx = rng.random_range(0.0..s);
        let cy = rng.random_range(0.0..s);
        let r = rng.random_range(0.08 * s..0.3 * s);
        let kind = rng.random_range(0..3);
        let period = rng.random_range(3.0..8.0);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = match kind {
                    0 => dx.abs() < r && dy.abs() < 0.6 * r,
                    1 => dx * dx + dy * dy < r * r,
                    _ => dx.abs() < r && dy.abs() < r && ((x as f64 / period).floor() as i64) % 2 == 0,
                };
                if inside {
                    px[(y * size + x) * 3..][..3].copy_from_slice(&color);
                }
            }
        }
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(&[size, size, 3], px).expect("sized buffer")
}
