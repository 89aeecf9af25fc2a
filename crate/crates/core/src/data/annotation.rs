use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::UnitFeatureSequence;
use crate::error::{ensure, Result};

/// Ground-truth action instance: inclusive unit range and class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct GtSegment {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

impl GtSegment {
    pub fn new(start: usize, end: usize, class: usize) -> Self {
        Self { start, end, class }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl From<[usize; 3]> for GtSegment {
    fn from([start, end, class]: [usize; 3]) -> Self {
        Self { start, end, class }
    }
}

impl From<GtSegment> for [usize; 3] {
    fn from(s: GtSegment) -> Self {
        [s.start, s.end, s.class]
    }
}

/// Annotation document for one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<GtSegment>>,
}

impl VideoRecord {
    pub fn validate(&self, num_classes: usize, num_units: usize) -> Result<()> {
        ensure!(!self.labels.is_empty(), Validation, "video {} has an empty label set", self.video_id);
        ensure!(
            self.labels.iter().all(|&c| c < num_classes),
            Validation,
            "video {} has a label outside [0, {num_classes})",
            self.video_id
        );
        for seg in self.segments.iter().flatten() {
            ensure!(
                seg.start <= seg.end && seg.end < num_units,
                Validation,
                "video {}: segment {:?} outside [0, {num_units})",
                self.video_id,
                seg
            );
            ensure!(
                self.labels.contains(&seg.class),
                Validation,
                "video {}: segment class {} missing from the label set",
                self.video_id,
                seg.class
            );
        }
        Ok(())
    }

    pub fn label_set(&self) -> LabelSet {
        LabelSet::new(self.labels.iter().copied())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Video-level class label set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelSet(BTreeSet<usize>);

impl LabelSet {
    pub fn new(classes: impl IntoIterator<Item = usize>) -> Self {
        Self(classes.into_iter().collect())
    }

    pub fn contains(&self, c: usize) -> bool {
        self.0.contains(&c)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Binary target vector of length `num_classes`.
    pub fn targets(&self, num_classes: usize) -> Vec<f64> {
        (0..num_classes).map(|c| if self.contains(c) { 1.0 } else { 0.0 }).collect()
    }
}

/// A video's features together with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub features: UnitFeatureSequence,
    pub record: VideoRecord,
}

impl Video {
    /// Drop everything but features and video-level labels.
    pub fn weak(&self) -> TrainingVideo<'_> {
        TrainingVideo {
            features: &self.features,
            labels: self.record.label_set(),
        }
    }
}

/// What training code is allowed to see: features and video-level labels.
/// There is no path from here back to segment annotations.
#[derive(Debug, Clone)]
pub struct TrainingVideo<'a> {
    pub features: &'a UnitFeatureSequence,
    pub labels: LabelSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub features: PathBuf,
    pub annotation: PathBuf,
    #[serde(default)]
    pub split: Split,
}

/// Dataset manifest: feature/annotation path pairs, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub feature_dim: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// In-memory dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn new(num_classes: usize, videos: Vec<Video>) -> Result<Self> {
        ensure!(num_classes >= 1, Validation, "dataset needs at least one class");
        for v in &videos {
            ensure!(
                v.features.video_id == v.record.video_id,
                Validation,
                "feature id {:?} does not match annotation id {:?}",
                v.features.video_id,
                v.record.video_id
            );
            v.record.validate(num_classes, v.features.len())?;
        }
        Ok(Self { num_classes, videos })
    }

    pub fn weak(&self) -> Vec<TrainingVideo<'_>> {
        self.videos.iter().map(Video::weak).collect()
    }

    /// Longest ground-truth segment, when annotations carry segments.
    pub fn max_segment_len(&self) -> Option<usize> {
        self.videos
            .iter()
            .flat_map(|v| v.record.segments.iter().flatten())
            .map(GtSegment::len)
            .max()
    }

    /// Load every manifest entry of the requested split.
    pub fn load_manifest(path: impl AsRef<Path>, split: Option<Split>) -> Result<(DatasetManifest, Self)> {
        let path = path.as_ref();
        let manifest = DatasetManifest::load(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut videos = Vec::new();
        for entry in &manifest.entries {
            if split.is_some_and(|s| s != entry.split) {
                continue;
            }
            let features = UnitFeatureSequence::load(base.join(&entry.features))?;
            let record = VideoRecord::load(base.join(&entry.annotation))?;
            ensure!(
                features.feature_dim() == manifest.feature_dim,
                Validation,
                "{}: feature dim {} != manifest dim {}",
                entry.features.display(),
                features.feature_dim(),
                manifest.feature_dim
            );
            videos.push(Video { features, record });
        }
        let ds = Self::new(manifest.num_classes, videos)?;
        Ok((manifest, ds))
    }
}
