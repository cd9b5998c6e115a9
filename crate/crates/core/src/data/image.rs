//! Frame loading and per-image preprocessing.

use std::io::{self, Cursor};
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrayscalePolicy {
    /// Copy the single luminance channel into R, G and B.
    #[default]
    ReplicateToThreeChannels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocConfig {
    pub target_size: usize,
    /// Added to the standard deviation before dividing.
    pub std_epsilon: f64,
    pub grayscale_policy: GrayscalePolicy,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        PreprocConfig {
            target_size: 224,
            std_epsilon: 1e-6,
            grayscale_policy: GrayscalePolicy::ReplicateToThreeChannels,
        }
    }
}

impl PreprocConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.target_size == 0 || patch_size == 0 || self.target_size % patch_size != 0 {
            return Err(Error::contract(format!(
                "target size {} is not a multiple of patch size {patch_size}",
                self.target_size
            )));
        }
        if !(self.std_epsilon > 0.0) {
            return Err(Error::contract("std_epsilon must be positive"));
        }
        Ok(())
    }
}

/// Decodes a PNG or JPEG file into a channels-first `[3 × H × W]` tensor of
/// raw 8-bit values (0..=255). Grayscale sources are replicated to three
/// channels; alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let reader = ImageReader::new(Cursor::new(&bytes))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Jpeg) => {}
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: match other {
                    Some(f) => format!("{f:?} is not supported (PNG or JPEG only)"),
                    None => "unrecognized image format".to_string(),
                },
            })
        }
    }
    let img = reader
        .decode()
        .map_err(|e| Error::io(path, io::Error::new(io::ErrorKind::InvalidData, e.to_string())))?;
    Ok(image_to_tensor(&img))
}

/// Channels-first tensor of 8-bit values from a decoded image.
pub fn image_to_tensor(img: &DynamicImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = f32::from(px.0[c]);
            }
        }
    } else {
        let luma = img.to_luma8();
        for (i, px) in luma.pixels().enumerate() {
            let v = f32::from(px.0[0]);
            for c in 0..3 {
                data[c * plane + i] = v;
            }
        }
    }
    Tensor::new([3, h, w], data).expect("decoded image has positive dimensions")
}

/// Bilinear resize of a `[C × H × W]` tensor to `[C × out_h × out_w]`,
/// sampling at half-pixel centers with edge clamping.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::dim("resize", img.shape(), &[0, out_h, out_w]));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract("resize target must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, fx) in &xs {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bottom = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

/// Maps 8-bit values to `[0, 1]`.
pub fn normalize01(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| v / 255.0)
}

/// `(x − μ) / (σ + eps)` with μ and the population σ taken over every pixel
/// and channel of the image.
pub fn standardize(img: &Tensor<f32>, eps: f64) -> Tensor<f32> {
    let n = img.numel() as f64;
    let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let denom = var.sqrt() + eps;
    img.map(|v| ((v as f64 - mean) / denom) as f32)
}

/// Resize, scale to `[0, 1]`, then standardize.
pub fn preprocess(raw: &Tensor<f32>, cfg: &PreprocConfig) -> Result<Tensor<f32>> {
    let resized = resize_bilinear(raw, cfg.target_size, cfg.target_size)?;
    Ok(standardize(&normalize01(&resized), cfg.std_epsilon))
}

pub fn load_preprocessed(path: impl AsRef<Path>, cfg: &PreprocConfig) -> Result<Tensor<f32>> {
    preprocess(&load_image(path)?, cfg)
}
