//! Analysis experiments: order perturbation of token corpora, a k-means
//! patch tokenizer baseline, token interpolation and prefix decoding.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LmConfig, RunConfig};
use crate::decoder::{sample_image, Denoiser};
use crate::error::{Error, Result};
use crate::flow::prefix_mask;
use crate::image::{patchify, ImageTensor};
use crate::lm::{build_pretrain_sequence, LmModel, LmTrainer, VocabularyLayout};
use crate::rng::stream;
use crate::tensor::Matrix;

/// How strongly a token sequence is reordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Degree {
    None,
    /// Independent shuffles of consecutive windows of this many positions.
    Local(usize),
    Global,
}

impl fmt::Display for Degree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degree::None => f.write_str("none"),
            Degree::Local(w) => write!(f, "local{w}"),
            Degree::Global => f.write_str("global"),
        }
    }
}

impl FromStr for Degree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" => Ok(Degree::None),
            "global" => Ok(Degree::Global),
            _ => {
                let w = s
                    .strip_prefix("local")
                    .map(|r| r.trim_start_matches(['-', '_']))
                    .and_then(|r| r.parse::<usize>().ok())
                    .ok_or_else(|| Error::config("degrees", format!("unknown perturbation degree `{s}`")))?;
                if w < 2 {
                    return Err(Error::config("degrees", "local window must be at least 2"));
                }
                Ok(Degree::Local(w))
            }
        }
    }
}

impl From<Degree> for String {
    fn from(d: Degree) -> Self {
        d.to_string()
    }
}

impl TryFrom<String> for Degree {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Parses a comma-separated degree list such as `none,local4,global`.
pub fn parse_degrees(list: &str) -> Result<Vec<Degree>> {
    let out: Vec<Degree> = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::config("degrees", "degree list is empty"));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub degree: Degree,
    pub seed: u64,
}

/// Reorders `seq` according to `spec`; the multiset of ids is preserved.
pub fn perturb(seq: &[u32], spec: &PerturbationSpec) -> Vec<u32> {
    perturb_indexed(seq, spec, 0)
}

/// [`perturb`] for the `index`-th sequence of a corpus: each sequence gets
/// its own shuffle stream.
pub fn perturb_indexed(seq: &[u32], spec: &PerturbationSpec, index: u64) -> Vec<u32> {
    let mut out = seq.to_vec();
    let mut rng = stream(spec.seed, index, 0);
    match spec.degree {
        Degree::None => {}
        Degree::Global => out.shuffle(&mut rng),
        Degree::Local(w) => {
            for window in out.chunks_mut(w.max(1)) {
                window.shuffle(&mut rng);
            }
        }
    }
    out
}

/// Loss curve of one language model trained on a perturbed corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeCurve {
    pub degree: Degree,
    pub curve: Vec<(u64, f64)>,
    /// Mean training loss over the last tenth of the steps.
    pub final_loss: f64,
}

/// Minimum corpus size for the order-perturbation study.
pub const MIN_PERTURBATION_CORPUS: usize = 1000;

/// Trains one language model per degree on the caption-free sequences
/// `[BOS][BOV] tokens [EOV][EOS]` of the perturbed corpus. Model init,
/// batch order and every other setting are shared across degrees.
pub fn perturbation_experiment(
    corpus: &[Vec<u32>],
    codebook_size: usize,
    degrees: &[Degree],
    lm: &LmConfig,
    run: &RunConfig,
    perturb_seed: u64,
) -> Result<Vec<DegreeCurve>> {
    if degrees.is_empty() {
        return Err(Error::config("degrees", "degree list is empty"));
    }
    if corpus.len() < MIN_PERTURBATION_CORPUS {
        return Err(Error::config(
            "corpus",
            format!("{} sequences given, at least {MIN_PERTURBATION_CORPUS} required", corpus.len()),
        ));
    }
    let tokens = corpus[0].len();
    if let Some(bad) = corpus.iter().position(|s| s.len() != tokens) {
        return Err(Error::Shape { what: "corpus sequence", expected: tokens, got: corpus[bad].len() });
    }
    let layout = VocabularyLayout::new(codebook_size);
    degrees
        .iter()
        .map(|&degree| {
            let spec = PerturbationSpec { degree, seed: perturb_seed };
            let seqs = corpus
                .iter()
                .enumerate()
                .map(|(i, s)| build_pretrain_sequence(&[], &perturb_indexed(s, &spec, i as u64), &layout, tokens))
                .collect::<Result<Vec<_>>>()?;
            let mut trainer = LmTrainer::new(LmModel::new(lm.clone(), layout, run.seed)?, run.clone())?;
            let mut curve = Vec::with_capacity(run.total_steps as usize);
            for step in 0..run.total_steps {
                let batch: Vec<_> = (0..run.batch_size)
                    .map(|slot| seqs[stream(run.seed, step, slot as u64).random_range(0..seqs.len())].clone())
                    .collect();
                curve.push((step, trainer.train_step(&batch)?.loss));
            }
            let tail = (curve.len() / 10).max(1);
            let final_loss = curve[curve.len() - tail..].iter().map(|p| p.1).sum::<f64>() / tail as f64;
            Ok(DegreeCurve { degree, curve, final_loss })
        })
        .collect()
}

/// Squared-distance k-means codebook over flattened patches.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Matrix,
    /// Centroids that ended up with distinct positions.
    pub effective: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KMeans {
    /// k-means++ seeding followed by `iterations` Lloyd steps.
    pub fn fit<R: Rng + ?Sized>(points: &Matrix, k: usize, iterations: usize, rng: &mut R) -> Result<Self> {
        let n = points.rows();
        if k == 0 || k > n {
            return Err(Error::config("k", format!("need 1 ≤ k ≤ {n} training patches, got {k}")));
        }
        let dim = points.cols();
        let mut centroids = Matrix::zeros(k, dim);
        centroids.row_mut(0).copy_from_slice(points.row(rng.random_range(0..n)));
        let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
        for c in 1..k {
            let total: f64 = nearest.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut idx = n - 1;
                for (i, &d) in nearest.iter().enumerate() {
                    if u < d {
                        idx = i;
                        break;
                    }
                    u -= d;
                }
                idx
            } else {
                rng.random_range(0..n)
            };
            centroids.row_mut(c).copy_from_slice(points.row(pick));
            for (i, d) in nearest.iter_mut().enumerate() {
                *d = d.min(sq_dist(points.row(i), centroids.row(c)));
            }
        }
        let mut model = Self { centroids, effective: k };
        let mut assign = vec![0usize; n];
        for _ in 0..iterations {
            for (i, a) in assign.iter_mut().enumerate() {
                *a = model.nearest(points.row(i));
            }
            let mut sums = Matrix::zeros(k, dim);
            let mut counts = vec![0usize; k];
            for (i, &a) in assign.iter().enumerate() {
                counts[a] += 1;
                for (s, v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    let inv = 1.0 / counts[c] as f64;
                    for (dst, s) in model.centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                        *dst = s * inv;
                    }
                }
            }
        }
        let mut distinct: Vec<&[f64]> = Vec::new();
        for c in 0..k {
            let row = model.centroids.row(c);
            if !distinct.contains(&row) {
                distinct.push(row);
            }
        }
        model.effective = distinct.len();
        if model.effective < k {
            log::warn!("k-means: only {} of {k} centroids are distinct", model.effective);
        }
        Ok(model)
    }

    /// Index of the closest centroid; ties go to the lowest index.
    pub fn nearest(&self, point: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.centroids.rows() {
            let d = sq_dist(point, self.centroids.row(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }
}

/// Raster-ordered k-means ids of every image's patches, with the fitted
/// codebook.
pub fn patch_vq_baseline<R: Rng + ?Sized>(
    images: &[ImageTensor],
    patch_size: usize,
    k: usize,
    iterations: usize,
    rng: &mut R,
) -> Result<(KMeans, Vec<Vec<u32>>)> {
    let per_image = images.iter().map(|img| patchify(img, patch_size)).collect::<Result<Vec<_>>>()?;
    let Some(first) = per_image.first() else {
        return Err(Error::config("images", "no images for the patch baseline"));
    };
    let dim = first.cols();
    let data: Vec<f64> = per_image.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let points = Matrix::from_vec(data.len() / dim, dim, data)?;
    let km = KMeans::fit(&points, k, iterations, rng)?;
    let ids = per_image.iter().map(|m| (0..m.rows()).map(|r| km.nearest(m.row(r)) as u32).collect()).collect();
    Ok((km, ids))
}

/// Positions to take from the second sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpolationMask {
    pub take_from_b: Vec<bool>,
}

impl InterpolationMask {
    /// Parses `all`, `none`, or comma-separated positions and inclusive
    /// ranges such as `0,2,8-15`.
    pub fn parse(spec: &str, tokens: usize) -> Result<Self> {
        let mut take = vec![false; tokens];
        let spec = spec.trim();
        match spec {
            "all" => take.fill(true),
            "none" | "" => {}
            _ => {
                let bad = |p: &str| Error::config("mask", format!("cannot parse mask element `{p}`"));
                for part in spec.split(',').map(str::trim) {
                    let (lo, hi) = match part.split_once('-') {
                        Some((a, b)) => (a.trim().parse::<usize>().map_err(|_| bad(part))?, b.trim().parse::<usize>().map_err(|_| bad(part))?),
                        None => {
                            let v = part.parse::<usize>().map_err(|_| bad(part))?;
                            (v, v)
                        }
                    };
                    if lo > hi || hi >= tokens {
                        return Err(Error::config("mask", format!("`{part}` is outside 0..{tokens}")));
                    }
                    take[lo..=hi].fill(true);
                }
            }
        }
        Ok(Self { take_from_b: take })
    }
}

/// Position `i` comes from `b` where the mask is set and from `a` otherwise.
pub fn counterfactual_interpolate(a: &[u32], b: &[u32], mask: &InterpolationMask) -> Result<Vec<u32>> {
    if a.len() != b.len() {
        return Err(Error::Shape { what: "interpolation pair", expected: a.len(), got: b.len() });
    }
    if mask.take_from_b.len() != a.len() {
        return Err(Error::Shape { what: "interpolation mask", expected: a.len(), got: mask.take_from_b.len() });
    }
    Ok(a.iter().zip(b).zip(&mask.take_from_b).map(|((&x, &y), &m)| if m { y } else { x }).collect())
}

/// Decodes each prefix length in `t_list` from the same starting noise.
pub fn prefix_decode_series<D: Denoiser + ?Sized>(
    denoiser: &D,
    tokens: &Matrix,
    t_list: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    let t_max = tokens.rows();
    for (i, &t) in t_list.iter().enumerate() {
        if t == 0 || t > t_max {
            return Err(Error::domain("prefix length", format!("{t} is outside 1..={t_max}")));
        }
        if i > 0 && t <= t_list[i - 1] {
            return Err(Error::domain("prefix length", "prefix lengths must be strictly increasing".to_string()));
        }
    }
    t_list.iter().map(|&t| sample_image(denoiser, &prefix_mask(tokens, t)?.tokens, steps, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::randn;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degree_parsing() {
        assert_eq!(parse_degrees("none,local4,local-16,global").unwrap(), [Degree::None, Degree::Local(4), Degree::Local(16), Degree::Global]);
        assert!(parse_degrees("").is_err());
        assert!(parse_degrees("local1").is_err());
        assert!(parse_degrees("sideways").is_err());
        assert_eq!(Degree::Local(4).to_string(), "local4");
    }

    #[test]
    fn none_is_identity_and_global_is_reproducible() {
        let s: Vec<u32> = (0..16).collect();
        assert_eq!(perturb(&s, &PerturbationSpec { degree: Degree::None, seed: 3 }), s);
        let g = PerturbationSpec { degree: Degree::Global, seed: 7 };
        let a = perturb(&[0, 1, 2, 3], &g);
        assert_eq!(a, perturb(&[0, 1, 2, 3], &g));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, [0, 1, 2, 3]);
    }

    #[test]
    fn local_windows_stay_in_place() {
        let s: Vec<u32> = (0..16).collect();
        let out = perturb(&s, &PerturbationSpec { degree: Degree::Local(4), seed: 1 });
        for (w, chunk) in out.chunks(4).enumerate() {
            let mut c = chunk.to_vec();
            c.sort_unstable();
            assert_eq!(c, (4 * w as u32..4 * w as u32 + 4).collect::<Vec<_>>());
        }
    }

    proptest! {
        #[test]
        fn multiset_preserved(seq in proptest::collection::vec(0u32..50, 0..40), seed in 0u64..100, w in 2usize..9) {
            for degree in [Degree::None, Degree::Local(w), Degree::Global] {
                let out = perturb(&seq, &PerturbationSpec { degree, seed });
                let (mut a, mut b) = (seq.clone(), out.clone());
                a.sort_unstable();
                b.sort_unstable();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn experiment_rejects_bad_inputs() {
        let corpus = vec![vec![0u32; 4]; 10];
        let lm = LmConfig::default();
        let run = RunConfig::lm_default();
        assert!(matches!(perturbation_experiment(&corpus, 8, &[], &lm, &run, 0), Err(Error::Config { field, .. }) if field == "degrees"));
        assert!(matches!(perturbation_experiment(&corpus, 8, &[Degree::None], &lm, &run, 0), Err(Error::Config { field, .. }) if field == "corpus"));
    }

    #[test]
    fn equal_degrees_give_equal_curves() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let corpus: Vec<Vec<u32>> = (0..1000).map(|_| (0..4).map(|_| rand::Rng::random_range(&mut rng, 0..8)).collect()).collect();
        let lm = LmConfig { layers: 1, dim: 8, heads: 1, mlp_ratio: 2, max_len: 16, caption_dropout: 0.0 };
        let run = RunConfig { batch_size: 2, total_steps: 3, warmup_steps: 0, ..RunConfig::lm_default() };
        let out = perturbation_experiment(&corpus, 8, &[Degree::None, Degree::None], &lm, &run, 0).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0].curve.len(), 3);
    }

    #[test]
    fn constant_image_single_cluster() {
        let img = ImageTensor::filled(3, 8, 8, 0.4);
        let (km, ids) = patch_vq_baseline(&[img], 4, 1, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ids, [vec![0; 4]]);
        assert_eq!(km.effective, 1);
    }

    #[test]
    fn kmeans_assignment_is_brute_force_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = randn(&mut rng, 200, 5, 1.0);
        let km = KMeans::fit(&pts, 12, 8, &mut rng).unwrap();
        for i in 0..200 {
            let p = pts.row(i);
            let want = (0..12)
                .map(|c| (c, sq_dist(p, km.centroids.row(c))))
                .fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b })
                .0;
            assert_eq!(km.nearest(p), want);
        }
        let again = KMeans::fit(&pts, 12, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let first = KMeans::fit(&pts, 12, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(again, first);
    }

    #[test]
    fn degenerate_kmeans_reports_fewer_centroids() {
        let pts = Matrix::filled(10, 3, 1.0);
        let km = KMeans::fit(&pts, 4, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(km.effective, 1);
        assert!(KMeans::fit(&pts, 11, 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn interpolation_cases() {
        let a = [10, 11, 12, 13];
        let b = [20, 21, 22, 23];
        let none = InterpolationMask::parse("none", 4).unwrap();
        let all = InterpolationMask::parse("all", 4).unwrap();
        assert_eq!(counterfactual_interpolate(&a, &b, &none).unwrap(), a);
        assert_eq!(counterfactual_interpolate(&a, &b, &all).unwrap(), b);
        let m = InterpolationMask::parse("0,2", 4).unwrap();
        assert_eq!(counterfactual_interpolate(&a, &b, &m).unwrap(), [20, 11, 22, 13]);
        assert_eq!(InterpolationMask::parse("1-2", 4).unwrap().take_from_b, [false, true, true, false]);
        assert!(InterpolationMask::parse("3-9", 4).is_err());
        assert!(counterfactual_interpolate(&a, &b[..3], &m).is_err());
    }

    struct Echo;

    impl Denoiser for Echo {
        fn image_shape(&self) -> (usize, usize, usize) {
            (1, 1, 4)
        }
        fn predict_x0(&self, x_t: &ImageTensor, _: f64, cond: &Matrix) -> Result<ImageTensor> {
            let s = cond.sum();
            Ok(x_t.map(|v| 0.1 * v + 0.01 * s))
        }
    }

    #[test]
    fn prefix_series_contract() {
        let tokens = randn(&mut ChaCha8Rng::seed_from_u64(0), 4, 2, 1.0);
        let series = prefix_decode_series(&Echo, &tokens, &[1, 2, 4], 3, 9).unwrap();
        assert_eq!(series.len(), 3);
        assert_eq!(series[2], sample_image(&Echo, &tokens, 3, 9).unwrap());
        assert!(prefix_decode_series(&Echo, &tokens, &[2, 2], 3, 9).is_err());
        assert!(prefix_decode_series(&Echo, &tokens, &[0], 3, 9).is_err());
        assert!(prefix_decode_series(&Echo, &tokens, &[5], 3, 9).is_err());
    }
}
