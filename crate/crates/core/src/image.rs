//! Channel-first image tensors and the patch (un)flattening used by both
//! transformers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `channels × height × width` image, values in the normalised pixel range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Normalised pixel range endpoints.
pub const PIXEL_MIN: f64 = -1.0;
pub const PIXEL_MAX: f64 = 1.0;

/// Affine map of an 8-bit pixel onto `[PIXEL_MIN, PIXEL_MAX]`.
#[inline]
pub fn normalize_u8(v: u8) -> f64 {
    PIXEL_MIN + (PIXEL_MAX - PIXEL_MIN) * f64::from(v) / 255.0
}

/// Inverse of [`normalize_u8`], clamped and rounded.
#[inline]
pub fn denormalize_u8(v: f64) -> u8 {
    let unit = ((v - PIXEL_MIN) / (PIXEL_MAX - PIXEL_MIN)).clamp(0.0, 1.0);
    libm::round(unit * 255.0) as u8
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::Shape { what: "image data", expected, got: data.len() });
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    /// Builds from interleaved 8-bit samples (`HWC`, as image decoders emit).
    pub fn from_interleaved_u8(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let expected = channels * height * width;
        if bytes.len() != expected {
            return Err(Error::Shape { what: "interleaved pixels", expected, got: bytes.len() });
        }
        let mut data = vec![0.0; expected];
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data[(c * height + y) * width + x] = normalize_u8(bytes[(y * width + x) * channels + c]);
                }
            }
        }
        Ok(Self { channels, height, width, data })
    }

    /// Interleaved 8-bit samples (`HWC`).
    pub fn to_interleaved_u8(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.data.len()];
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out[(y * self.width + x) * self.channels + c] = denormalize_u8(self.get(c, y, x));
                }
            }
        }
        out
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape { what: "image pair", expected: self.data.len(), got: other.data.len() });
        }
        Ok(Self { data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(), ..*self })
    }
}

/// Length of one flattened patch.
pub fn patch_dim(channels: usize, patch: usize) -> usize {
    channels * patch * patch
}

/// Splits an image into non-overlapping `p × p` patches in raster order.
/// Each row holds one patch flattened channel-major, then row, then column.
pub fn patchify(image: &ImageTensor, patch: usize) -> Result<Matrix> {
    let (c, h, w) = image.shape();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config("patch_size", alloc::format!("{h}×{w} is not divisible by patch size {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Matrix::zeros(gh * gw, patch_dim(c, patch));
    for py in 0..gh {
        for px in 0..gw {
            let row = out.row_mut(py * gw + px);
            let mut i = 0;
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        row[i] = image.get(ch, py * patch + dy, px * patch + dx);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Matrix, channels: usize, height: usize, width: usize, patch: usize) -> Result<ImageTensor> {
    let (gh, gw) = (height / patch, width / patch);
    if patches.rows() != gh * gw {
        return Err(Error::Shape { what: "patch count", expected: gh * gw, got: patches.rows() });
    }
    if patches.cols() != patch_dim(channels, patch) {
        return Err(Error::Shape { what: "patch width", expected: patch_dim(channels, patch), got: patches.cols() });
    }
    let mut img = ImageTensor::zeros(channels, height, width);
    for py in 0..gh {
        for px in 0..gw {
            let row = patches.row(py * gw + px);
            let mut i = 0;
            for ch in 0..channels {
                for dy in 0..patch {
                    for dx in 0..patch {
                        img.set(ch, py * patch + dy, px * patch + dx, row[i]);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pixel_range_endpoints() {
        assert_eq!(normalize_u8(255), 1.0);
        assert_eq!(normalize_u8(0), -1.0);
        assert!((normalize_u8(128) - (2.0 * 128.0 / 255.0 - 1.0)).abs() < 1e-15);
        assert!((normalize_u8(128) - 0.003_921_568_627_45).abs() < 1e-12);
    }

    #[test]
    fn patch_shapes() {
        let img = ImageTensor::zeros(1, 4, 4);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), (4, 4));
    }

    #[test]
    fn single_patch_is_identity_flatten() {
        let img = ImageTensor::new(1, 2, 2, alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.row(0), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn patch_index_one_is_top_right_block() {
        // value = 10·row + col
        let data = (0..16).map(|i| (10 * (i / 4) + i % 4) as f64).collect();
        let img = ImageTensor::new(1, 4, 4, data).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.row(1), &[2.0, 3.0, 12.0, 13.0]);
    }

    #[test]
    fn indivisible_resolution_is_config_error() {
        let img = ImageTensor::zeros(3, 5, 4);
        assert!(matches!(patchify(&img, 2), Err(Error::Config { .. })));
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(c in 1usize..4, gh in 1usize..4, gw in 1usize..4, p in 1usize..4, seed in 0u64..1000) {
            let (h, w) = (gh * p, gw * p);
            let data = (0..c * h * w).map(|i| ((i as u64 * 2654435761 + seed) % 997) as f64).collect();
            let img = ImageTensor::new(c, h, w, data).unwrap();
            let back = unpatchify(&patchify(&img, p).unwrap(), c, h, w, p).unwrap();
            prop_assert_eq!(back, img);
        }
    }

    #[test]
    fn u8_round_trip() {
        let bytes: Vec<u8> = (0..=255u8).cycle().take(3 * 4 * 5).collect();
        let img = ImageTensor::from_interleaved_u8(3, 4, 5, &bytes).unwrap();
        assert_eq!(img.to_interleaved_u8(), bytes);
    }
}
