//! Fixed sinusoidal embeddings: 1-D for query/token indices, 2-D for patch
//! grid coordinates, and the diffusion timestep embedding.

use crate::tensor::Matrix;

const MAX_PERIOD: f64 = 10_000.0;

/// Scale applied to `t ∈ [0, 1]` before the timestep sinusoid so that the
/// lowest frequency spans the unit interval usefully.
pub const TIMESTEP_SCALE: f64 = 1000.0;

/// Angular frequency of channel pair `k` in a `dim`-wide embedding.
#[inline]
pub fn frequency(k: usize, dim: usize) -> f64 {
    let half = dim / 2;
    libm::pow(MAX_PERIOD, -(k as f64) / half as f64)
}

/// Writes `[sin(p·ω_0), …, sin(p·ω_{h-1}), cos(p·ω_0), …, cos(p·ω_{h-1})]`
/// into `out` (`h = out.len() / 2`; an odd trailing channel stays zero).
pub fn sinusoid_into(position: f64, out: &mut [f64]) {
    let dim = out.len();
    let half = dim / 2;
    for k in 0..half {
        let angle = position * frequency(k, dim);
        out[k] = libm::sin(angle);
        out[half + k] = libm::cos(angle);
    }
}

/// Row `i` embeds position `i`, for `i in 0..count`.
pub fn sincos_1d(count: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(count, dim);
    for i in 0..count {
        sinusoid_into(i as f64, m.row_mut(i));
    }
    m
}

/// Raster-ordered embeddings of a `grid_h × grid_w` patch grid: the first
/// half of the channels encodes the row coordinate, the second half the
/// column coordinate.
pub fn sincos_2d(grid_h: usize, grid_w: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut m = Matrix::zeros(grid_h * grid_w, dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            let row = m.row_mut(r * grid_w + c);
            sinusoid_into(r as f64, &mut row[..half]);
            sinusoid_into(c as f64, &mut row[half..2 * half]);
        }
    }
    m
}

/// `1 × dim` embedding of a continuous timestep `t ∈ [0, 1]`.
pub fn timestep(t: f64, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(1, dim);
    sinusoid_into(t * TIMESTEP_SCALE, m.row_mut(0));
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn position_zero_is_sin0_cos1() {
        let e = sincos_1d(1, 8);
        assert_eq!(e.row(0), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn position_three_matches_closed_form() {
        let dim = 16;
        let e = sincos_1d(4, dim);
        for k in 0..dim / 2 {
            // ω_k = 10000^(-2k/dim)
            let w = 1.0 / libm::pow(10_000.0, (2 * k) as f64 / dim as f64);
            assert!((e.get(3, k) - libm::sin(3.0 * w)).abs() < 1e-15);
            assert!((e.get(3, dim / 2 + k) - libm::cos(3.0 * w)).abs() < 1e-15);
        }
    }

    #[test]
    fn distinct_positions_distinct_embeddings() {
        let e = sincos_1d(10_000, 16);
        // The ω_0 = 1 pair alone separates integer positions.
        let mut keys: Vec<(u64, u64)> =
            (0..e.rows()).map(|i| (e.get(i, 0).to_bits(), e.get(i, 8).to_bits())).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), 10_000);
    }

    #[test]
    fn grid_embedding_separates_rows_and_columns() {
        let e = sincos_2d(2, 3, 8);
        // patch (0, 2): row half is position 0, column half is position 2
        assert_eq!(&e.row(2)[..4], sincos_1d(1, 4).row(0));
        assert_eq!(&e.row(2)[4..], sincos_1d(3, 4).row(2));
        assert_ne!(e.row(1), e.row(3));
    }
}
