//! Rectified-flow interpolation and prefix conditioning.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Matrix;

/// `x_t = t·ε + (1−t)·x_0`.
pub fn add_noise(x0: &ImageTensor, t: f64, eps: &ImageTensor) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain("diffusion time", format!("t = {t} is outside [0, 1]")));
    }
    eps.zip_map(x0, |e, x| t * e + (1.0 - t) * x)
}

/// Standard-normal image of the given shape.
pub fn gaussian_image<R: Rng + ?Sized>(rng: &mut R, channels: usize, height: usize, width: usize) -> ImageTensor {
    let data = (0..channels * height * width).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    ImageTensor::new(channels, height, width, data).expect("length matches shape")
}

/// Number of condition rows visible at continuous time `t`: `round(t·T)`.
pub fn active_len(t: f64, tokens: usize) -> usize {
    (libm::round(t.clamp(0.0, 1.0) * tokens as f64) as usize).min(tokens)
}

/// Token condition visible to the decoder: the first `active_len` rows of
/// the quantized sequence, everything after zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixCondition {
    pub tokens: Matrix,
    pub active_len: usize,
}

impl PrefixCondition {
    pub fn mask(&self) -> Vec<bool> {
        (0..self.tokens.rows()).map(|i| i < self.active_len).collect()
    }
}

/// Keeps rows `0..t_index` of `full_tokens` and zero-fills the rest.
pub fn prefix_mask(full_tokens: &Matrix, t_index: usize) -> Result<PrefixCondition> {
    if t_index > full_tokens.rows() {
        return Err(Error::domain(
            "prefix length",
            format!("t_index {t_index} exceeds sequence length {}", full_tokens.rows()),
        ));
    }
    let mut tokens = full_tokens.clone();
    let cols = tokens.cols();
    tokens.as_mut_slice()[t_index * cols..].fill(0.0);
    Ok(PrefixCondition { tokens, active_len: t_index })
}
