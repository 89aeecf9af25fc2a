//! Synthetic datasets with planted action segments.
//!
//! Every class owns a random unit-norm signature direction per stream, scaled
//! by `margin`. Units inside a planted instance of class `c` are
//! `signature_c + noise`; every other unit is pure Gaussian noise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotation::{Dataset, DatasetManifest, GtSegment, ManifestEntry, Split, Video, VideoRecord};
use super::features::UnitFeatureSequence;
use crate::error::{ensure, Result};
use crate::train::config_hash;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantLayout {
    /// Independent instances with random classes.
    #[default]
    Random,
    /// Exactly two disjoint instances of one class per video. The second
    /// instance in a random order is planted at `weak_scale` times the margin.
    TwoSegments { weak_scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    /// Inclusive range of unit counts per video.
    pub length_range: (usize, usize),
    /// Inclusive range of planted instances per video.
    pub instances_range: (usize, usize),
    /// Distinct classes a single video may contain.
    pub max_classes_per_video: usize,
    /// Inclusive range of instance lengths in units.
    pub instance_length_range: (usize, usize),
    /// Minimum background units between two instances.
    pub min_gap: usize,
    pub margin: f64,
    pub noise: f64,
    pub frames_per_unit: u32,
    pub layout: PlantLayout,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            feature_dim: 16,
            train_videos: 60,
            test_videos: 20,
            length_range: (80, 200),
            instances_range: (1, 3),
            max_classes_per_video: 2,
            instance_length_range: (10, 20),
            min_gap: 8,
            margin: 10.0,
            noise: 1.0,
            frames_per_unit: 5,
            layout: PlantLayout::Random,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 1, Validation, "need at least one class");
        ensure!(self.max_classes_per_video >= 1, Validation, "max_classes_per_video must be >= 1");
        ensure!(self.feature_dim >= 1, Validation, "feature dim must be >= 1");
        ensure!(self.train_videos + self.test_videos >= 1, Validation, "need at least one video");
        let ranges = [self.length_range, self.instances_range, self.instance_length_range];
        ensure!(ranges.iter().all(|r| r.0 <= r.1), Validation, "ranges must be non-empty (min <= max)");
        ensure!(self.length_range.0 >= 1, Validation, "videos need at least one unit");
        ensure!(self.instance_length_range.0 >= 1, Validation, "instances need at least one unit");
        ensure!(self.margin >= 0.0 && self.margin.is_finite(), Validation, "margin must be >= 0");
        ensure!(self.noise >= 0.0 && self.noise.is_finite(), Validation, "noise must be >= 0");
        let max_instances = match self.layout {
            PlantLayout::Random => {
                ensure!(self.instances_range.0 >= 1, Validation, "every video needs at least one instance");
                self.instances_range.1
            }
            PlantLayout::TwoSegments { weak_scale } => {
                ensure!(weak_scale >= 0.0 && weak_scale.is_finite(), Validation, "weak_scale must be >= 0");
                2
            }
        };
        let needed = max_instances * self.instance_length_range.1 + (max_instances - 1) * self.min_gap;
        ensure!(
            needed <= self.length_range.0,
            Validation,
            "{max_instances} instances of up to {} units with gap {} need {needed} units, but videos may have only {}",
            self.instance_length_range.1,
            self.min_gap,
            self.length_range.0
        );
        Ok(())
    }

    /// True when planted and background units share one distribution.
    pub fn is_degenerate(&self) -> bool {
        self.margin == 0.0
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Generated dataset split into train and test, plus the class signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Dataset,
    pub test: Dataset,
    /// `signatures[stream][class]`, stream 0 = RGB, 1 = flow.
    pub signatures: [Vec<Vec<f64>>; 2],
}

impl SyntheticDataset {
    pub fn videos_with_split(&self) -> impl Iterator<Item = (&Video, Split)> {
        self.train
            .videos
            .iter()
            .map(|v| (v, Split::Train))
            .chain(self.test.videos.iter().map(|v| (v, Split::Test)))
    }

    /// Write `features/{id}.cpft`, `annotations/{id}.json` and `manifest.json`
    /// under `dir`. Returns the manifest path.
    pub fn save(&self, dir: &Path, spec: &SyntheticSpec) -> Result<PathBuf> {
        fs::create_dir_all(dir.join("features"))?;
        fs::create_dir_all(dir.join("annotations"))?;
        let mut entries = Vec::new();
        for (video, split) in self.videos_with_split() {
            let id = &video.record.video_id;
            let features = PathBuf::from("features").join(format!("{id}.cpft"));
            let annotation = PathBuf::from("annotations").join(format!("{id}.json"));
            video.features.save(dir.join(&features))?;
            video.record.save(dir.join(&annotation))?;
            entries.push(ManifestEntry {
                features,
                annotation,
                split,
            });
        }
        let mut warnings = Vec::new();
        if spec.is_degenerate() {
            warnings.push("degenerate: margin is 0, planted units are indistinguishable from background".into());
        }
        let manifest = DatasetManifest {
            num_classes: spec.num_classes,
            feature_dim: spec.feature_dim,
            warnings,
            config_hash: Some(spec.hash()),
            entries,
        };
        let path = dir.join("manifest.json");
        manifest.save(&path)?;
        Ok(path)
    }
}

fn unit_direction<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Lay out `lengths` left to right with at least `gap` units between them,
/// spreading the slack uniformly.
fn place<R: Rng>(rng: &mut R, total: usize, lengths: &[usize], gap: usize) -> Vec<usize> {
    let n = lengths.len();
    let used: usize = lengths.iter().sum::<usize>() + n.saturating_sub(1) * gap;
    let slack = total - used;
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut starts = Vec::with_capacity(n);
    let mut pos = 0;
    let mut prev_cut = 0;
    for (i, (&len, &cut)) in lengths.iter().zip(&cuts).enumerate() {
        pos += cut - prev_cut;
        prev_cut = cut;
        starts.push(pos);
        pos += len + if i + 1 < n { gap } else { 0 };
    }
    starts
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signatures: [Vec<Vec<f64>>; 2] = std::array::from_fn(|_| {
        (0..spec.num_classes)
            .map(|_| {
                unit_direction(&mut rng, spec.feature_dim)
                    .into_iter()
                    .map(|x| x * spec.margin)
                    .collect()
            })
            .collect()
    });
    let noise = Normal::new(0.0, spec.noise).map_err(|e| crate::Error::Validation(e.to_string()))?;

    let total = spec.train_videos + spec.test_videos;
    let mut videos = Vec::with_capacity(total);
    for v in 0..total {
        let len = rng.random_range(spec.length_range.0..=spec.length_range.1);
        let (count, classes, scales): (usize, Vec<usize>, Vec<f64>) = match spec.layout {
            PlantLayout::Random => {
                let n = rng.random_range(spec.instances_range.0..=spec.instances_range.1);
                let mut pool: Vec<usize> = (0..spec.num_classes).collect();
                pool.shuffle(&mut rng);
                pool.truncate(spec.max_classes_per_video);
                let classes = (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect();
                (n, classes, vec![1.0; n])
            }
            PlantLayout::TwoSegments { weak_scale } => {
                let c = rng.random_range(0..spec.num_classes);
                let mut scales = vec![1.0, weak_scale];
                scales.shuffle(&mut rng);
                (2, vec![c, c], scales)
            }
        };
        let lengths: Vec<usize> = (0..count)
            .map(|_| rng.random_range(spec.instance_length_range.0..=spec.instance_length_range.1))
            .collect();
        let starts = place(&mut rng, len, &lengths, spec.min_gap);

        let mut streams = [Vec::with_capacity(len * spec.feature_dim), Vec::with_capacity(len * spec.feature_dim)];
        let mut owner: Vec<Option<usize>> = vec![None; len];
        for (i, (&s, &l)) in starts.iter().zip(&lengths).enumerate() {
            owner[s..s + l].iter_mut().for_each(|o| *o = Some(i));
        }
        for unit in owner.iter() {
            for (stream, out) in streams.iter_mut().enumerate() {
                for d in 0..spec.feature_dim {
                    let mean = unit.map_or(0.0, |i| scales[i] * signatures[stream][classes[i]][d]);
                    out.push((mean + noise.sample(&mut rng)) as f32);
                }
            }
        }
        let segments: Vec<GtSegment> = starts
            .iter()
            .zip(&lengths)
            .zip(&classes)
            .map(|((&s, &l), &c)| GtSegment::new(s, s + l - 1, c))
            .collect();
        let mut labels: Vec<usize> = classes.clone();
        labels.sort_unstable();
        labels.dedup();
        let video_id = format!("video_{v:04}");
        let [rgb, flow] = streams;
        let features = UnitFeatureSequence::new(
            video_id.clone(),
            spec.frames_per_unit,
            (0..len as u32).map(|j| j * spec.frames_per_unit).collect(),
            spec.feature_dim,
            rgb,
            flow,
        )?;
        videos.push(Video {
            features,
            record: VideoRecord {
                video_id,
                labels,
                segments: Some(segments),
            },
        });
    }
    let test = videos.split_off(spec.train_videos);
    Ok(SyntheticDataset {
        train: Dataset::new(spec.num_classes, videos)?,
        test: Dataset::new(spec.num_classes, test)?,
        signatures,
    })
}
