//! Social diversity and influence dispersion measures.

use serde::{Deserialize, Serialize};

use crate::corpus::UserId;
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 10.0;

/// Order of a community entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EntropyParams {
    /// Rényi entropy of order `alpha` (`alpha > 0`, `alpha != 1`).
    Renyi { alpha: f64 },
    /// The `alpha -> 1` limit.
    Shannon,
}

impl Default for EntropyParams {
    fn default() -> Self {
        EntropyParams::Renyi { alpha: DEFAULT_ALPHA }
    }
}

impl EntropyParams {
    pub fn renyi(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) || alpha == 1.0 {
            return Err(Error::config(
                "diversity.alpha",
                format!("alpha must be positive and not 1, got {alpha}"),
            ));
        }
        Ok(EntropyParams::Renyi { alpha })
    }
}

fn shannon(weights: impl Iterator<Item = f64> + Clone) -> f64 {
    let total: f64 = weights.clone().sum();
    let h = -weights
        .filter(|&w| w > 0.0)
        .map(|w| {
            let p = w / total;
            p * p.ln()
        })
        .sum::<f64>();
    // a single non-zero weight yields -0.0
    h + 0.0
}

/// Community entropy of a user from the sizes of their communities:
/// `ln(Σ (|c|/|F|)^α) / (1 - α)`, or Shannon entropy in the limit mode.
pub fn community_entropy(sizes: &[usize], params: EntropyParams) -> Result<f64> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::contract("community sizes must be non-empty and positive"));
    }
    let total: usize = sizes.iter().sum();
    let ps = sizes.iter().map(|&s| s as f64 / total as f64);
    Ok(match params {
        EntropyParams::Shannon => shannon(sizes.iter().map(|&s| s as f64)),
        EntropyParams::Renyi { alpha } => ps.map(|p| p.powf(alpha)).sum::<f64>().ln() / (1.0 - alpha) + 0.0,
    })
}

/// `counts[i]`: the owner's check-ins whose influential community is `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfluenceProfile {
    pub owner: UserId,
    pub counts: Vec<usize>,
}

impl InfluenceProfile {
    pub fn zeros(owner: UserId, n_communities: usize) -> Self {
        InfluenceProfile {
            owner,
            counts: vec![0; n_communities],
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.total() == 0
    }

    /// Communities that influence at least one check-in.
    pub fn n_influential(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Shannon entropy of the check-in distribution over influential
/// communities, with `0 ln 0 = 0`.
pub fn influence_entropy(profile: &InfluenceProfile) -> Result<f64> {
    if profile.is_zero() {
        return Err(Error::contract(format!(
            "influence profile of {} has no check-ins",
            profile.owner
        )));
    }
    Ok(shannon(profile.counts.iter().map(|&c| c as f64)))
}

/// Cosine similarity of two influence count vectors over the same
/// community indexing.
pub fn influence_similarity(a: &InfluenceProfile, b: &InfluenceProfile) -> Result<f64> {
    if a.owner != b.owner || a.counts.len() != b.counts.len() {
        return Err(Error::contract("influence profiles must share owner and indexing"));
    }
    if a.is_zero() || b.is_zero() {
        return Err(Error::UndefinedSimilarity);
    }
    let dot: f64 = a.counts.iter().zip(&b.counts).map(|(&x, &y)| x as f64 * y as f64).sum();
    let norm = |v: &[usize]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    Ok((dot / (norm(&a.counts) * norm(&b.counts))).min(1.0))
}

/// Sample Pearson correlation coefficient.
pub fn pearson_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::UndefinedCorrelation("need two equal-length series of length >= 2"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Index of the half-open bucket holding `v`; the small epsilon keeps
/// values like `0.6` with width `0.2` out of the lower bucket.
pub fn bucket_index(v: f64, width: f64) -> usize {
    (v.max(0.0) / width + 1e-9).floor() as usize
}

/// Lower edge of bucket `k`, rounded so that `3 × 0.2` prints as `0.6`.
pub fn bucket_edge(k: usize, width: f64) -> f64 {
    (k as f64 * width * 1e9).round() / 1e9
}

/// Counts of `values` in half-open buckets `[k·width, (k+1)·width)` from 0
/// up to the largest value.
pub fn bucket_histogram(values: &[f64], width: f64) -> Vec<(f64, f64, usize)> {
    let Some(max) = values.iter().copied().filter(|v| v.is_finite()).reduce(f64::max) else {
        return Vec::new();
    };
    let n_buckets = bucket_index(max, width) + 1;
    let mut counts = vec![0usize; n_buckets];
    for &v in values.iter().filter(|v| v.is_finite()) {
        counts[bucket_index(v, width).min(n_buckets - 1)] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| (bucket_edge(k, width), bucket_edge(k + 1, width), c))
        .collect()
}
