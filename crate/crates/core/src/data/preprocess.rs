use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Preprocessing applied to every image, in field order after the resize:
/// center crop, bilinear resize, grayscale, histogram equalization, clamp to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub resolution: usize,
    pub grayscale: bool,
    /// Crop to the central 3/4 of each side before resizing.
    pub center_crop: bool,
    pub hist_equalize: bool,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            resolution: 32,
            grayscale: true,
            center_crop: false,
            hist_equalize: false,
        }
    }
}

impl PreprocessSpec {
    /// Compact label such as `r32-gray-crop-eq`, used for ordering and file names.
    pub fn label(&self) -> String {
        let mut s = format!("r{}", self.resolution);
        for (on, name) in [(self.grayscale, "gray"), (self.center_crop, "crop"), (self.hist_equalize, "eq")] {
            if on {
                s.push('-');
                s.push_str(name);
            }
        }
        s
    }
}

fn dims(img: &ImageTensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        s => Err(Error::Shape(format!("expected a non-empty [C, H, W] image, got {s:?}"))),
    }
}

/// The `ch x cw` window whose top-left corner is `(y0, x0)`.
pub fn crop(img: &ImageTensor, y0: usize, x0: usize, ch: usize, cw: usize) -> ImageTensor {
    let (c, h, w) = dims(img).expect("crop needs a [C, H, W] image");
    assert!(y0 + ch <= h && x0 + cw <= w, "crop window out of bounds");
    let mut out = Vec::with_capacity(c * ch * cw);
    for plane in img.data().chunks_exact(h * w) {
        for y in y0..y0 + ch {
            out.extend_from_slice(&plane[y * w + x0..y * w + x0 + cw]);
        }
    }
    Tensor::new(vec![c, ch, cw], out).unwrap()
}

/// Central window of `floor(3/4)` of each side.
pub fn center_crop(img: &ImageTensor) -> Result<ImageTensor> {
    let (_, h, w) = dims(img)?;
    let (ch, cw) = ((h * 3 / 4).max(1), (w * 3 / 4).max(1));
    Ok(crop(img, (h - ch) / 2, (w - cw) / 2, ch, cw))
}

fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres and edge clamping (no antialiasing).
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let (c, h, w) = dims(img).expect("resize needs a [C, H, W] image");
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in img.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).unwrap()
}

fn luminance(img: &ImageTensor) -> Vec<f32> {
    let (c, h, w) = dims(img).expect("image");
    let d = img.data();
    if c == 1 {
        return d.to_vec();
    }
    let n = h * w;
    (0..n)
        .map(|i| LUMA[0] * d[i] + LUMA[1] * d[n + i] + LUMA[2] * d[2 * n + i])
        .collect()
}

/// Luminance `0.299 R + 0.587 G + 0.114 B`; single-channel images pass through.
pub fn grayscale(img: &ImageTensor) -> Result<ImageTensor> {
    let (c, h, w) = dims(img)?;
    match c {
        1 => Ok(img.clone()),
        3 => Tensor::new(vec![1, h, w], luminance(img)),
        _ => Err(Error::Shape(format!("grayscale needs 1 or 3 channels, got {c}"))),
    }
}

/// 256-bin histogram equalization of the luminance. Colour images are shifted
/// per pixel by the luminance change. A single occupied bin leaves the image unchanged.
pub fn equalize_histogram(img: &ImageTensor) -> Result<ImageTensor> {
    let (c, h, w) = dims(img)?;
    if !matches!(c, 1 | 3) {
        return Err(Error::Shape(format!("equalization needs 1 or 3 channels, got {c}")));
    }
    let y = luminance(img);
    let bin = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    let mut hist = [0usize; 256];
    for &v in &y {
        hist[bin(v)] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (i, &n) in hist.iter().enumerate() {
        acc += n;
        cdf[i] = acc;
    }
    let total = h * w;
    let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
    if total == cdf_min {
        return Ok(img.clone());
    }
    let denom = (total - cdf_min) as f32;
    let mapped: Vec<f32> = y.iter().map(|&v| (cdf[bin(v)] - cdf_min) as f32 / denom).collect();
    if c == 1 {
        return Tensor::new(vec![1, h, w], mapped);
    }
    let n = h * w;
    let mut out = img.data().to_vec();
    for ch in 0..3 {
        for i in 0..n {
            out[ch * n + i] = (out[ch * n + i] + mapped[i] - y[i]).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, h, w], out)
}

/// Apply `spec` to a decoded image.
pub fn preprocess(img: &ImageTensor, spec: &PreprocessSpec) -> Result<ImageTensor> {
    if spec.resolution == 0 {
        return Err(Error::invalid("preprocess resolution must be >= 1"));
    }
    dims(img)?;
    let mut x = if spec.center_crop {
        center_crop(img)?
    } else {
        img.clone()
    };
    x = resize_bilinear(&x, spec.resolution, spec.resolution);
    if spec.grayscale {
        x = grayscale(&x)?;
    }
    if spec.hist_equalize {
        x = equalize_histogram(&x)?;
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        x = x.map(|v| v.clamp(0.0, 1.0));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> ImageTensor {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn constant_gray_survives_every_option() {
        let x = img(3, 20, 20, |_| 0.4);
        let spec = PreprocessSpec {
            resolution: 8,
            grayscale: true,
            center_crop: true,
            hist_equalize: true,
        };
        let y = preprocess(&x, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8]);
        for v in y.data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn center_crop_takes_three_quarters() {
        let x = img(1, 100, 100, |i| i as f32);
        let c = center_crop(&x).unwrap();
        assert_eq!(c.shape(), &[1, 75, 75]);
        // offset (100 - 75) / 2 = 12
        assert_eq!(c.data()[0], (12 * 100 + 12) as f32);
    }

    #[test]
    fn pure_red_luminance() {
        let x = img(3, 1, 1, |i| if i == 0 { 1.0 } else { 0.0 });
        let g = grayscale(&x).unwrap();
        assert!((g.data()[0] - 0.299).abs() < 1e-7);
    }

    #[test]
    fn off_options_are_byte_identical_no_ops() {
        let x = img(1, 16, 16, |i| ((i * 7919) % 251) as f32 / 255.0);
        let spec = PreprocessSpec {
            resolution: 16,
            grayscale: false,
            center_crop: false,
            hist_equalize: false,
        };
        assert_eq!(preprocess(&x, &spec).unwrap(), x);
        let spec = PreprocessSpec { grayscale: true, ..spec };
        assert_eq!(preprocess(&x, &spec).unwrap(), x);
    }

    #[test]
    fn equalization_spreads_two_levels_to_the_extremes() {
        let x = img(1, 2, 2, |i| if i < 2 { 0.2 } else { 0.6 });
        let y = equalize_histogram(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn resize_preserves_constants_and_is_exact_at_equal_size() {
        let x = img(2, 9, 13, |_| 0.25);
        let y = resize_bilinear(&x, 4, 6);
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let z = img(1, 5, 5, |i| i as f32);
        assert_eq!(resize_bilinear(&z, 5, 5), z);
    }

    #[test]
    fn label_is_compact() {
        let s = PreprocessSpec {
            resolution: 64,
            grayscale: true,
            center_crop: false,
            hist_equalize: true,
        };
        assert_eq!(s.label(), "r64-gray-eq");
    }
}
