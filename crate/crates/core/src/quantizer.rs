//! Cosine-similarity vector quantizer with an EMA-maintained codebook and
//! dead-entry revival.
//!
//! Lookup compares L2-normalised features against L2-normalised entries.
//! The vector handed downstream is the stored (unnormalised) EMA mean, and
//! the commitment loss is measured against it in code space.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::randn;
use crate::tensor::Matrix;

/// Floor on the moving-average count when forming the cluster mean.
pub const EMA_COUNT_EPS: f64 = 1e-5;

/// Quantizer dictionary plus its moving-average statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Matrix,
    ema_count: Vec<f64>,
    ema_sum: Matrix,
    usage: Vec<u32>,
    degenerate_inputs: u64,
}

/// Outcome of looking up one feature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lookup {
    pub id: usize,
    pub cosine: f64,
    /// The feature had zero norm; `id` is 0 by convention.
    pub degenerate: bool,
}

/// Quantization of one item's `T × m` features.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub ids: Vec<u32>,
    pub quantized: Matrix,
    /// `Σ_i ‖V̂_i − V_i‖²`.
    pub commitment_loss: f64,
    pub degenerate: usize,
}

fn l2_normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

impl Codebook {
    /// Random unit-scale entries with zero counts, so every entry is dead
    /// until the first revival seeds it from real features.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, size: usize, dim: usize) -> Self {
        let entries = randn(rng, size, dim, 1.0);
        Self {
            ema_sum: Matrix::zeros(size, dim),
            ema_count: vec![0.0; size],
            usage: vec![0; size],
            entries,
            degenerate_inputs: 0,
        }
    }

    /// Builds a codebook from explicit entries with the given counts;
    /// running sums are set consistently (`sum = entry · count`).
    pub fn from_entries(entries: Matrix, ema_count: Vec<f64>) -> Result<Self> {
        if ema_count.len() != entries.rows() {
            return Err(Error::Shape { what: "codebook counts", expected: entries.rows(), got: ema_count.len() });
        }
        let ema_sum = Matrix::from_fn(entries.rows(), entries.cols(), |r, c| entries.get(r, c) * ema_count[r]);
        Ok(Self { usage: vec![0; entries.rows()], ema_count, ema_sum, entries, degenerate_inputs: 0 })
    }

    /// Restores full state (e.g. from a checkpoint).
    pub fn from_parts(entries: Matrix, ema_count: Vec<f64>, ema_sum: Matrix) -> Result<Self> {
        if ema_count.len() != entries.rows() {
            return Err(Error::Shape { what: "codebook counts", expected: entries.rows(), got: ema_count.len() });
        }
        if ema_sum.shape() != entries.shape() {
            return Err(Error::Shape { what: "codebook sums", expected: entries.len(), got: ema_sum.len() });
        }
        Ok(Self { usage: vec![0; entries.rows()], ema_count, ema_sum, entries, degenerate_inputs: 0 })
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn ema_count(&self) -> &[f64] {
        &self.ema_count
    }

    pub fn ema_sum(&self) -> &Matrix {
        &self.ema_sum
    }

    /// Assignments per entry in the most recent [`Codebook::ema_update`].
    pub fn usage_window(&self) -> &[u32] {
        &self.usage
    }

    /// Zero-norm features seen by lookups so far.
    pub fn degenerate_inputs(&self) -> u64 {
        self.degenerate_inputs
    }

    /// Entry rows scaled to unit norm (zero rows stay zero).
    pub fn normalized_entries(&self) -> Matrix {
        let mut out = self.entries.clone();
        for r in 0..out.rows() {
            if let Some(n) = l2_normalized(self.entries.row(r)) {
                out.row_mut(r).copy_from_slice(&n);
            } else {
                out.row_mut(r).fill(0.0);
            }
        }
        out
    }

    /// Entry with the largest cosine similarity to `feature`; ties go to the
    /// lowest index.
    pub fn nearest_code(&self, feature: &[f64]) -> Result<Lookup> {
        self.nearest_in(&self.normalized_entries(), feature)
    }

    fn nearest_in(&self, normalized: &Matrix, feature: &[f64]) -> Result<Lookup> {
        if feature.len() != self.dim() {
            return Err(Error::Shape { what: "code-space feature", expected: self.dim(), got: feature.len() });
        }
        if self.size() == 0 {
            return Err(Error::config("codebook_size", "codebook is empty"));
        }
        let Some(f) = l2_normalized(feature) else {
            return Ok(Lookup { id: 0, cosine: 0.0, degenerate: true });
        };
        let mut best = Lookup { id: 0, cosine: f64::NEG_INFINITY, degenerate: false };
        for k in 0..normalized.rows() {
            let cos: f64 = f.iter().zip(normalized.row(k)).map(|(a, b)| a * b).sum();
            if cos > best.cosine {
                best = Lookup { id: k, cosine: cos, degenerate: false };
            }
        }
        Ok(best)
    }

    /// Quantizes every row of `features` (`T × m`).
    pub fn quantize(&mut self, features: &Matrix) -> Result<QuantizationResult> {
        let r = self.lookup(features)?;
        self.degenerate_inputs += r.degenerate as u64;
        Ok(r)
    }

    /// [`Codebook::quantize`] without touching the diagnostic counter.
    pub fn lookup(&self, features: &Matrix) -> Result<QuantizationResult> {
        self.lookup_normalized(&self.normalized_entries(), features)
    }

    /// Lookup against entries already returned by [`Codebook::normalized_entries`].
    pub fn lookup_normalized(&self, normalized: &Matrix, features: &Matrix) -> Result<QuantizationResult> {
        let mut ids = Vec::with_capacity(features.rows());
        let mut quantized = Matrix::zeros(features.rows(), self.dim());
        let mut commitment_loss = 0.0;
        let mut degenerate = 0;
        for r in 0..features.rows() {
            let hit = self.nearest_in(normalized, features.row(r))?;
            if hit.degenerate {
                degenerate += 1;
            }
            let entry = self.entries.row(hit.id);
            commitment_loss += features.row(r).iter().zip(entry).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            quantized.row_mut(r).copy_from_slice(entry);
            ids.push(hit.id as u32);
        }
        Ok(QuantizationResult { ids, quantized, commitment_loss, degenerate })
    }

    /// Element-wise [`Codebook::quantize`] over a batch of items.
    pub fn quantize_batch(&mut self, batch: &[Matrix]) -> Result<Vec<QuantizationResult>> {
        let normalized = self.normalized_entries();
        let out: Vec<QuantizationResult> = batch.iter().map(|f| self.lookup_normalized(&normalized, f)).collect::<Result<_>>()?;
        self.degenerate_inputs += out.iter().map(|r| r.degenerate as u64).sum::<u64>();
        Ok(out)
    }

    /// One moving-average step with the vectors (`rows`) assigned to `ids`:
    /// `count ← γ·count + (1−γ)·n_k`, `sum ← γ·sum + (1−γ)·Σ v`, and
    /// `entry ← sum / max(count, ε)`.
    pub fn ema_update(&mut self, features: &Matrix, ids: &[u32], decay: f64) -> Result<()> {
        if features.rows() != ids.len() {
            return Err(Error::Shape { what: "ema assignments", expected: features.rows(), got: ids.len() });
        }
        if features.cols() != self.dim() {
            return Err(Error::Shape { what: "ema feature width", expected: self.dim(), got: features.cols() });
        }
        let k = self.size();
        let mut counts = vec![0u32; k];
        let mut sums = Matrix::zeros(k, self.dim());
        for (r, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= k {
                return Err(Error::domain("code id", alloc::format!("{id} ≥ codebook size {k}")));
            }
            counts[id] += 1;
            for (s, v) in sums.row_mut(id).iter_mut().zip(features.row(r)) {
                *s += v;
            }
        }
        let keep = 1.0 - decay;
        for e in 0..k {
            self.ema_count[e] = decay * self.ema_count[e] + keep * f64::from(counts[e]);
            let denom = self.ema_count[e].max(EMA_COUNT_EPS);
            let (sum_row, new_row) = (self.ema_sum.row_mut(e), sums.row(e));
            for (s, n) in sum_row.iter_mut().zip(new_row) {
                *s = decay * *s + keep * n;
            }
            for (entry, s) in self.entries.row_mut(e).iter_mut().zip(self.ema_sum.row(e)) {
                *entry = s / denom;
            }
        }
        self.usage = counts;
        Ok(())
    }

    /// Overwrites every entry whose moving-average count is below
    /// `threshold` with a uniformly drawn row of `batch`, re-seeding its
    /// statistics so the entry equals that row. Returns the number reset.
    pub fn reset_dead_codes<R: Rng + ?Sized>(&mut self, batch: &Matrix, threshold: f64, rng: &mut R) -> Result<usize> {
        if batch.rows() == 0 {
            return Err(Error::Shape { what: "revival batch", expected: 1, got: 0 });
        }
        if batch.cols() != self.dim() {
            return Err(Error::Shape { what: "revival feature width", expected: self.dim(), got: batch.cols() });
        }
        let count = threshold.max(1.0);
        let mut reset = 0;
        for e in 0..self.size() {
            if self.ema_count[e] < threshold {
                let pick = rng.random_range(0..batch.rows());
                let v = batch.row(pick);
                self.entries.row_mut(e).copy_from_slice(v);
                for (s, x) in self.ema_sum.row_mut(e).iter_mut().zip(v) {
                    *s = x * count;
                }
                self.ema_count[e] = count;
                reset += 1;
            }
        }
        Ok(reset)
    }
}

/// Fraction of the codebook observed in `ids`.
pub fn codebook_usage(ids: &[u32], codebook_size: usize) -> f64 {
    if codebook_size == 0 {
        return 0.0;
    }
    let mut seen = vec![false; codebook_size];
    for &id in ids {
        if let Some(s) = seen.get_mut(id as usize) {
            *s = true;
        }
    }
    seen.iter().filter(|&&s| s).count() as f64 / codebook_size as f64
}
