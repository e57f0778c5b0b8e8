//! Discretization of 3D coordinates and distances into a fixed vocabulary of
//! special tokens.
//!
//! Bins are equal-mass quantiles of the fit data between its 1st and 99th
//! percentiles, so token usage on data from the fit distribution is close to
//! uniform. Each token decodes to the median of the fit samples in its bin.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3::Vec3;

pub const VOCAB_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_BINS: usize = 1024;
/// Shrinkage weight toward the scaled identity for rank-deficient covariances.
pub const COVARIANCE_SHRINKAGE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizerError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("token index {index} out of range for {n_bins} bins")]
    IndexOutOfRange { index: usize, n_bins: usize },
    #[error("covariance is not positive definite after shrinkage")]
    DegenerateCovariance,
    #[error("unsupported vocabulary format version {0}")]
    UnsupportedVersion(u32),
}

/// How bin edges are placed between `z_min` and `z_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    #[default]
    EqualMass,
    /// Equal-width bins; kept for comparison against equal-mass binning.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenVocab3D {
    pub format_version: u32,
    pub n_bins: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub edges: Vec<f64>,
    pub centers: Vec<f64>,
}

/// Linear-interpolated quantile of sorted data (numpy's default rule).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn sorted_finite(samples: &[f64]) -> Result<Vec<f64>, TokenizerError> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(TokenizerError::InsufficientData("non-finite sample".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

pub fn fit_vocab(samples: &[f64], n_bins: usize) -> Result<TokenVocab3D, TokenizerError> {
    fit_vocab_with(samples, n_bins, Binning::EqualMass)
}

pub fn fit_vocab_with(samples: &[f64], n_bins: usize, binning: Binning) -> Result<TokenVocab3D, TokenizerError> {
    if n_bins == 0 {
        return Err(TokenizerError::InsufficientData("n_bins must be positive".into()));
    }
    if samples.len() < 10 * n_bins {
        return Err(TokenizerError::InsufficientData(format!(
            "{} samples for {} bins, need at least {}",
            samples.len(),
            n_bins,
            10 * n_bins
        )));
    }
    let sorted = sorted_finite(samples)?;
    let z_min = quantile_sorted(&sorted, 0.01);
    let z_max = quantile_sorted(&sorted, 0.99);
    if !(z_max > z_min) {
        return Err(TokenizerError::InsufficientData("degenerate distribution: z_min == z_max".into()));
    }
    // Samples inside the range, still sorted.
    let lo = sorted.partition_point(|v| *v < z_min);
    let hi = sorted.partition_point(|v| *v <= z_max);
    let inside = &sorted[lo..hi];

    let mut edges: Vec<f64> = match binning {
        Binning::EqualMass => (0..=n_bins)
            .map(|i| quantile_sorted(inside, i as f64 / n_bins as f64))
            .collect(),
        Binning::Uniform => (0..=n_bins)
            .map(|i| z_min + (z_max - z_min) * i as f64 / n_bins as f64)
            .collect(),
    };
    edges[0] = z_min;
    edges[n_bins] = z_max;
    if edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(TokenizerError::InsufficientData(
            "degenerate distribution: repeated values produce empty bins".into(),
        ));
    }

    let centers = (0..n_bins)
        .map(|i| {
            let (a, b) = (edges[i], edges[i + 1]);
            let s = inside.partition_point(|v| *v < a);
            let e = if i + 1 == n_bins {
                inside.len()
            } else {
                inside.partition_point(|v| *v < b)
            };
            let mid = 0.5 * (a + b);
            if s >= e {
                return mid;
            }
            let m = median_sorted(&inside[s..e]);
            if m > a && m < b {
                m
            } else {
                mid
            }
        })
        .collect();

    Ok(TokenVocab3D {
        format_version: VOCAB_FORMAT_VERSION,
        n_bins,
        z_min,
        z_max,
        edges,
        centers,
    })
}

fn median_sorted(s: &[f64]) -> f64 {
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl TokenVocab3D {
    /// Bin of `clamp(v, z_min, z_max)`. An interior edge belongs to the bin
    /// it opens; `z_max` belongs to the last bin.
    pub fn encode(&self, v: f64) -> usize {
        encode(v, self)
    }

    pub fn decode(&self, idx: usize) -> Result<f64, TokenizerError> {
        decode(idx, self)
    }

    pub fn bin_width(&self, idx: usize) -> f64 {
        self.edges[idx + 1] - self.edges[idx]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Checks the structural invariants of a loaded vocabulary.
    pub fn validate(&self) -> Result<(), TokenizerError> {
        if self.format_version != VOCAB_FORMAT_VERSION {
            return Err(TokenizerError::UnsupportedVersion(self.format_version));
        }
        let ok = self.n_bins > 0
            && self.edges.len() == self.n_bins + 1
            && self.centers.len() == self.n_bins
            && self.edges.windows(2).all(|w| w[1] > w[0])
            && self.edges[0] == self.z_min
            && self.edges[self.n_bins] == self.z_max
            && self
                .centers
                .iter()
                .enumerate()
                .all(|(i, c)| *c > self.edges[i] && *c < self.edges[i + 1]);
        if ok {
            Ok(())
        } else {
            Err(TokenizerError::InsufficientData("vocabulary violates its invariants".into()))
        }
    }
}

pub fn encode(v: f64, vocab: &TokenVocab3D) -> usize {
    let n = vocab.n_bins;
    if !(v > vocab.z_min) {
        // Also catches NaN.
        return 0;
    }
    if v >= vocab.z_max {
        return n - 1;
    }
    // Number of interior edges <= v.
    vocab.edges[1..n].partition_point(|e| *e <= v)
}

pub fn decode(idx: usize, vocab: &TokenVocab3D) -> Result<f64, TokenizerError> {
    vocab
        .centers
        .get(idx)
        .copied()
        .ok_or(TokenizerError::IndexOutOfRange {
            index: idx,
            n_bins: vocab.n_bins,
        })
}

/// Coordinate-major: `x, y, z`.
pub fn encode_point(p: Vec3, vocab: &TokenVocab3D) -> [usize; 3] {
    [encode(p[0], vocab), encode(p[1], vocab), encode(p[2], vocab)]
}

pub fn decode_point(t: [usize; 3], vocab: &TokenVocab3D) -> Result<Vec3, TokenizerError> {
    Ok([decode(t[0], vocab)?, decode(t[1], vocab)?, decode(t[2], vocab)?])
}

/// Encodes already-ordered box vertices: 8 vertices times 3 coordinates.
pub fn encode_vertices(vertices: &[Vec3; 8], vocab: &TokenVocab3D) -> Vec<usize> {
    vertices.iter().flat_map(|v| encode_point(*v, vocab)).collect()
}

/// Human-readable placeholder for a token, e.g. `<loc3d_0437>`.
pub fn render_token(idx: usize) -> String {
    format!("<loc3d_{idx:04}>")
}

pub fn render_tokens(tokens: &[usize]) -> String {
    tokens.iter().map(|t| render_token(*t)).collect()
}

/// Parses a run of `<loc3d_NNNN>` placeholders back into indices.
pub fn parse_tokens(text: &str) -> Vec<usize> {
    text.split("<loc3d_")
        .skip(1)
        .filter_map(|rest| rest.split_once('>').and_then(|(n, _)| n.parse().ok()))
        .collect()
}

/// Pooled: one vocabulary for x, y, z and distances. Per-channel: one per axis,
/// with distances using the pooled fit over all three.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum VocabSet {
    Pooled { vocab: TokenVocab3D },
    PerChannel { x: TokenVocab3D, y: TokenVocab3D, z: TokenVocab3D, distance: TokenVocab3D },
}

impl VocabSet {
    pub fn fit_pooled(points: &[Vec3], n_bins: usize) -> Result<Self, TokenizerError> {
        let pooled: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
        Ok(VocabSet::Pooled {
            vocab: fit_vocab(&pooled, n_bins)?,
        })
    }

    pub fn fit_per_channel(points: &[Vec3], n_bins: usize) -> Result<Self, TokenizerError> {
        let chan = |i: usize| -> Vec<f64> { points.iter().map(|p| p[i]).collect() };
        let pooled: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
        Ok(VocabSet::PerChannel {
            x: fit_vocab(&chan(0), n_bins)?,
            y: fit_vocab(&chan(1), n_bins)?,
            z: fit_vocab(&chan(2), n_bins)?,
            distance: fit_vocab(&pooled, n_bins)?,
        })
    }

    pub fn axis(&self, i: usize) -> &TokenVocab3D {
        match self {
            VocabSet::Pooled { vocab } => vocab,
            VocabSet::PerChannel { x, y, z, .. } => [x, y, z][i],
        }
    }

    pub fn distance(&self) -> &TokenVocab3D {
        match self {
            VocabSet::Pooled { vocab } => vocab,
            VocabSet::PerChannel { distance, .. } => distance,
        }
    }

    pub fn encode_point(&self, p: Vec3) -> [usize; 3] {
        [self.axis(0).encode(p[0]), self.axis(1).encode(p[1]), self.axis(2).encode(p[2])]
    }
}

/// Per-token counts over in-range samples.
///
/// Values outside `[z_min, z_max]` are clamped into the end tokens by
/// [`encode`]; they are counted separately so that `ratio` measures the
/// balance of the binning itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageHistogram {
    pub counts: Vec<u64>,
    pub below_range: u64,
    pub above_range: u64,
    /// Max count over min count across tokens; infinite if some token is unused.
    pub ratio: f64,
}

pub fn usage_histogram(vocab: &TokenVocab3D, samples: &[f64]) -> UsageHistogram {
    let mut counts = vec![0u64; vocab.n_bins];
    let (mut below, mut above) = (0, 0);
    for &v in samples {
        if v < vocab.z_min {
            below += 1;
        } else if v > vocab.z_max {
            above += 1;
        } else {
            counts[encode(v, vocab)] += 1;
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    let ratio = if min == 0 { f64::INFINITY } else { max as f64 / min as f64 };
    UsageHistogram {
        counts,
        below_range: below,
        above_range: above,
        ratio,
    }
}

/// Row-major matrix of embedding vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * dim, "embedding shape mismatch");
        Self { rows, dim, values }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Sample mean and unbiased covariance of the rows, with shrinkage toward
/// `tr(Σ)/d · I` when the rows cannot determine a full-rank covariance.
pub fn embedding_stats(existing: &EmbeddingMatrix) -> Result<(DVector<f64>, DMatrix<f64>), TokenizerError> {
    let (n, d) = (existing.rows, existing.dim);
    if n < 2 || d == 0 {
        return Err(TokenizerError::InsufficientData("need at least 2 embedding rows".into()));
    }
    if existing.values.iter().any(|v| !v.is_finite()) {
        return Err(TokenizerError::InsufficientData("non-finite embedding value".into()));
    }
    let x = DMatrix::from_row_slice(n, d, &existing.values);
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut r in centered.row_iter_mut() {
        r -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let full_rank = n > d && cov.clone().cholesky().is_some();
    if !full_rank {
        let scale = cov.trace() / d as f64;
        cov = cov * (1.0 - COVARIANCE_SHRINKAGE) + DMatrix::identity(d, d) * (COVARIANCE_SHRINKAGE * scale);
    }
    Ok((mean, cov))
}

/// Draws `n_new` rows from N(mean, cov) of the existing rows.
pub fn init_embeddings<R: Rng + ?Sized>(
    existing: &EmbeddingMatrix,
    n_new: usize,
    rng: &mut R,
) -> Result<EmbeddingMatrix, TokenizerError> {
    let (mean, cov) = embedding_stats(existing)?;
    let d = existing.dim;
    let chol = cov.cholesky().ok_or(TokenizerError::DegenerateCovariance)?;
    let l = chol.l();
    let mut values = Vec::with_capacity(n_new * d);
    let mut z = DVector::<f64>::zeros(d);
    for _ in 0..n_new {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let row = &mean + &l * &z;
        values.extend(row.iter());
    }
    Ok(EmbeddingMatrix::new(n_new, d, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use rand::Rng;

    fn uniform(n: usize, seed: u64) -> Vec<f64> {
        let mut r = seeding::rng(seed);
        (0..n).map(|_| r.random::<f64>()).collect()
    }

    #[test]
    fn uniform_four_bins() {
        let v = fit_vocab(&uniform(100_000, 1), 4).unwrap();
        let expect = [0.01, 0.2575, 0.505, 0.7525, 0.99];
        for (e, x) in v.edges.iter().zip(expect) {
            assert!((e - x).abs() < 0.01, "{:?}", v.edges);
        }
        v.validate().unwrap();
    }

    #[test]
    fn constant_samples_rejected() {
        assert!(matches!(
            fit_vocab(&vec![3.0; 1000], 4),
            Err(TokenizerError::InsufficientData(_))
        ));
        assert!(matches!(fit_vocab(&[0.0, 1.0], 4), Err(TokenizerError::InsufficientData(_))));
    }

    #[test]
    fn encode_clamps_and_hits_centers() {
        let v = fit_vocab(&uniform(10_000, 2), 16).unwrap();
        assert_eq!(v.encode(-5.0), 0);
        assert_eq!(v.encode(5.0), 15);
        assert_eq!(v.encode(v.z_max), 15);
        assert_eq!(v.encode(v.z_min), 0);
        assert_eq!(v.encode(v.edges[3]), 3);
        for (k, c) in v.centers.iter().enumerate() {
            assert_eq!(v.encode(*c), k);
            assert_eq!(v.decode(k).unwrap(), *c);
        }
        assert_eq!(
            v.decode(16),
            Err(TokenizerError::IndexOutOfRange { index: 16, n_bins: 16 })
        );
    }

    #[test]
    fn two_bins_split_symmetric_data_evenly() {
        let data: Vec<f64> = uniform(200_000, 3).into_iter().map(|u| 2.0 * u - 1.0).collect();
        let v = fit_vocab(&data, 2).unwrap();
        let h = usage_histogram(&v, &data);
        let (a, b) = (h.counts[0] as f64, h.counts[1] as f64);
        assert!((a - b).abs() / a.max(b) < 0.01);
    }

    #[test]
    fn render_and_parse_tokens() {
        assert_eq!(render_token(437), "<loc3d_0437>");
        let s = render_tokens(&[1, 22, 1023]);
        assert_eq!(s, "<loc3d_0001><loc3d_0022><loc3d_1023>");
        assert_eq!(parse_tokens(&format!("a {s} b")), vec![1, 22, 1023]);
    }

    #[test]
    fn embeddings_fixed_seed_and_shrinkage() {
        let mut r = seeding::rng(9);
        let vals: Vec<f64> = (0..3 * 5).map(|_| r.random::<f64>()).collect();
        // 3 rows in 5 dimensions: rank-deficient, shrinkage must kick in.
        let e = EmbeddingMatrix::new(3, 5, vals);
        let a = init_embeddings(&e, 4, &mut seeding::rng(1)).unwrap();
        let b = init_embeddings(&e, 4, &mut seeding::rng(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows, 4);
        let same = EmbeddingMatrix::new(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(
            init_embeddings(&same, 1, &mut seeding::rng(1)),
            Err(TokenizerError::DegenerateCovariance)
        );
    }
}
