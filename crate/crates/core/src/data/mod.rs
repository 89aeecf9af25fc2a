//! Feature and annotation ingestion, synthetic data, and training-time samplers.

pub mod annotation;
pub mod features;
pub mod sampling;
pub mod synth;

pub use annotation::{
    Dataset, DatasetManifest, GtSegment, LabelSet, ManifestEntry, Split, TrainingVideo, Video, VideoRecord,
};
pub use features::{load_features, save_features, Modality, UnitFeatureSequence};
pub use sampling::{sample_shot, sample_sparse, sample_uniform, Sampled, SamplerConfig};
pub use synth::{generate_synthetic, PlantLayout, SyntheticDataset, SyntheticSpec};
