//! Training-time unit sampling: uniform, sparse, and shot-based.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::FeatureMap;

/// Sampled units plus their original unit indices (strictly increasing).
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub features: FeatureMap,
    pub indices: Vec<usize>,
}

impl Sampled {
    pub fn full(features: &FeatureMap) -> Self {
        Self {
            features: features.clone(),
            indices: (0..features.len()).collect(),
        }
    }

    fn gather(features: &FeatureMap, indices: Vec<usize>) -> Self {
        Self {
            features: features.select_rows(&indices),
            indices,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SamplerConfig {
    Uniform { interval: usize },
    Sparse { segments: usize },
    Shot { threshold: f64 },
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig::Sparse { segments: 32 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplerConfig::Uniform { interval } => ensure!(interval >= 1, Validation, "uniform interval must be >= 1"),
            SamplerConfig::Sparse { segments } => ensure!(segments >= 1, Validation, "sparse segment count must be >= 1"),
            SamplerConfig::Shot { threshold } => {
                ensure!(threshold >= 0.0 && threshold.is_finite(), Validation, "shot threshold must be >= 0")
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            SamplerConfig::Uniform { .. } => "uniform",
            SamplerConfig::Sparse { .. } => "sparse",
            SamplerConfig::Shot { .. } => "shot",
        }
    }

    /// Apply the sampler. Sparse sampling clamps `P` to the sequence length so
    /// short videos are used whole.
    pub fn sample<R: Rng + ?Sized>(&self, features: &FeatureMap, rng: &mut R) -> Result<Sampled> {
        match *self {
            SamplerConfig::Uniform { interval } => sample_uniform(features, interval),
            SamplerConfig::Sparse { segments } => sample_sparse(features, segments.min(features.len()), rng),
            SamplerConfig::Shot { threshold } => {
                if features.len() < 2 {
                    Ok(Sampled::full(features))
                } else {
                    sample_shot(features, threshold)
                }
            }
        }
    }

    /// Deterministic variant used at inference. Sparse sampling is a training
    /// augmentation, so inference sees every unit instead.
    pub fn sample_for_inference(&self, features: &FeatureMap) -> Result<Sampled> {
        match *self {
            SamplerConfig::Sparse { .. } => Ok(Sampled::full(features)),
            SamplerConfig::Uniform { interval } => sample_uniform(features, interval),
            SamplerConfig::Shot { threshold } => {
                if features.len() < 2 {
                    Ok(Sampled::full(features))
                } else {
                    sample_shot(features, threshold)
                }
            }
        }
    }
}

/// Keep units `0, sigma, 2 sigma, ...`.
pub fn sample_uniform(features: &FeatureMap, interval: usize) -> Result<Sampled> {
    ensure!(interval >= 1, Validation, "uniform interval must be >= 1");
    let indices = (0..features.len()).step_by(interval).collect();
    Ok(Sampled::gather(features, indices))
}

/// Bounds of segment `i` when `len` units are split into `parts` equal parts.
pub fn segment_bounds(len: usize, parts: usize, i: usize) -> (usize, usize) {
    (i * len / parts, (i + 1) * len / parts)
}

/// One uniformly drawn unit from each of `segments` equal-length segments.
pub fn sample_sparse<R: Rng + ?Sized>(features: &FeatureMap, segments: usize, rng: &mut R) -> Result<Sampled> {
    ensure!(segments >= 1, Validation, "sparse segment count must be >= 1");
    ensure!(
        segments <= features.len(),
        Validation,
        "cannot draw {segments} sparse segments from {} units",
        features.len()
    );
    let indices = (0..segments)
        .map(|i| {
            let (lo, hi) = segment_bounds(features.len(), segments, i);
            rng.random_range(lo..hi)
        })
        .collect();
    Ok(Sampled::gather(features, indices))
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Shot boundaries: unit `j` starts a new shot when the distance from unit
/// `j - 1` exceeds `threshold` times the median consecutive distance.
pub fn shot_boundaries(features: &FeatureMap, threshold: f64) -> Vec<usize> {
    if features.len() < 2 {
        return Vec::new();
    }
    let dists: Vec<f64> = (1..features.len())
        .map(|j| l2_distance(features.row(j - 1), features.row(j)))
        .collect();
    let cut = threshold * median(&dists);
    dists
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > cut)
        .map(|(i, _)| i + 1)
        .collect()
}

/// One medoid unit per detected shot.
pub fn sample_shot(features: &FeatureMap, threshold: f64) -> Result<Sampled> {
    ensure!(features.len() >= 2, Validation, "shot sampling needs at least two units");
    let mut starts = vec![0];
    starts.extend(shot_boundaries(features, threshold));
    starts.push(features.len());
    let indices = starts
        .windows(2)
        .map(|w| {
            let shot = w[0]..w[1];
            shot.clone()
                .map(|i| {
                    let cost: f64 = shot.clone().map(|j| l2_distance(features.row(i), features.row(j))).sum();
                    (i, cost)
                })
                .fold((w[0], f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                .0
        })
        .collect();
    Ok(Sampled::gather(features, indices))
}
