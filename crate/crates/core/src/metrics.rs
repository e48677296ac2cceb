//! Reconstruction and likelihood metrics.

use crate::error::{Error, Result};
use crate::image::{ImageTensor, PIXEL_MAX, PIXEL_MIN};

/// Reported instead of infinity when two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal value: the span of the normalised pixel range.
pub const PSNR_PEAK: f64 = PIXEL_MAX - PIXEL_MIN;

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape { what: "image pair", expected: a.as_slice().len(), got: b.as_slice().len() });
    }
    let n = a.as_slice().len().max(1) as f64;
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10·log10(peak² / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * libm::log10(peak * peak / mse)).min(PSNR_CAP_DB)
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, PSNR_PEAK))
}

/// `exp(mean NLL)`; `None` for an empty window.
pub fn perplexity(nlls: &[f64]) -> Option<f64> {
    if nlls.is_empty() {
        return None;
    }
    Some(libm::exp(nlls.iter().sum::<f64>() / nlls.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cases() {
        let a = ImageTensor::filled(3, 2, 2, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!(psnr_from_mse(4.0, 2.0).abs() < 1e-12);
        assert!((psnr_from_mse(0.04, 2.0) - 20.0).abs() < 1e-12);
        let b = ImageTensor::filled(3, 2, 2, 0.7);
        // mse 0.04 between constant images 0.2 apart
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn perplexity_cases() {
        assert_eq!(perplexity(&[]), None);
        assert_eq!(perplexity(&[0.0, 0.0]), Some(1.0));
        let p = perplexity(&[libm::log(2.0), libm::log(8.0)]).unwrap();
        assert!((p - 4.0).abs() < 1e-12);
        let w = 256.0;
        assert!((perplexity(&[libm::log(w); 5]).unwrap() - w).abs() < 1e-9);
    }
}
