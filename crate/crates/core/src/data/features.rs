//! Unit feature sequences and the `CPFT` binary format.
//!
//! Layout (little-endian): magic `CPFT`, `u16` version, `u32` id length and
//! UTF-8 video id, `u32` unit count, `u32` frames per unit, `u32` per-stream
//! feature dim, `u32` start frame per unit, then the RGB block and the flow
//! block, each row-major `f32`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::checkpoint::Cursor;
use crate::nn::FeatureMap;

pub const FEATURE_MAGIC: &[u8; 4] = b"CPFT";
pub const FEATURE_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Flow,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Rgb, Modality::Flow];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "flow" => Ok(Modality::Flow),
            other => Err(Error::Validation(format!("unknown modality {other:?}"))),
        }
    }
}

/// Per-video unit features: one row per unit, RGB and flow halves of width `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFeatureSequence {
    pub video_id: String,
    pub frames_per_unit: u32,
    pub unit_start_frames: Vec<u32>,
    feature_dim: usize,
    rgb: Vec<f32>,
    flow: Vec<f32>,
}

impl UnitFeatureSequence {
    pub fn new(
        video_id: impl Into<String>,
        frames_per_unit: u32,
        unit_start_frames: Vec<u32>,
        feature_dim: usize,
        rgb: Vec<f32>,
        flow: Vec<f32>,
    ) -> Result<Self> {
        let len = unit_start_frames.len();
        ensure!(len >= 1, Validation, "feature sequence has no units");
        ensure!(feature_dim >= 1, Validation, "feature dim must be at least 1");
        ensure!(
            rgb.len() == len * feature_dim && flow.len() == len * feature_dim,
            Validation,
            "rgb ({}) and flow ({}) blocks must both hold {len}x{feature_dim} values",
            rgb.len(),
            flow.len()
        );
        ensure!(
            rgb.iter().chain(&flow).all(|v| v.is_finite()),
            Validation,
            "feature values must be finite"
        );
        Ok(Self {
            video_id: video_id.into(),
            frames_per_unit,
            unit_start_frames,
            feature_dim,
            rgb,
            flow,
        })
    }

    /// Unit count `l_u`.
    pub fn len(&self) -> usize {
        self.unit_start_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_start_frames.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn stream(&self, modality: Modality) -> &[f32] {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
        }
    }

    pub fn unit(&self, modality: Modality, j: usize) -> &[f32] {
        &self.stream(modality)[j * self.feature_dim..(j + 1) * self.feature_dim]
    }

    pub fn to_map(&self, modality: Modality) -> FeatureMap {
        let data = self.stream(modality).iter().map(|&v| v as f64).collect();
        FeatureMap::from_vec(self.len(), self.feature_dim, data).expect("validated at construction")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + self.video_id.len() + self.len() * (4 + 8 * self.feature_dim));
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        w.write_all(&(self.video_id.len() as u32).to_le_bytes())?;
        w.write_all(self.video_id.as_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&self.frames_per_unit.to_le_bytes())?;
        w.write_all(&(self.feature_dim as u32).to_le_bytes())?;
        for s in &self.unit_start_frames {
            w.write_all(&s.to_le_bytes())?;
        }
        for v in self.rgb.iter().chain(&self.flow) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        ensure!(cur.take(4)? == FEATURE_MAGIC, Format, "bad feature-file magic");
        let version = cur.u16()?;
        ensure!(version == FEATURE_VERSION, Format, "unsupported feature-file version {version}");
        let id_len = cur.u32()? as usize;
        let video_id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|_| Error::Corrupt("video id is not UTF-8".into()))?
            .to_string();
        let len = cur.u32()? as usize;
        let frames_per_unit = cur.u32()?;
        let dim = cur.u32()? as usize;
        ensure!(len >= 1, Validation, "feature file {video_id:?} has zero units");
        ensure!(dim >= 1, Validation, "feature file {video_id:?} has zero feature dim");
        let starts = (0..len).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let block = len
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt("feature block size overflows".into()))?;
        ensure!(
            cur.remaining() == 2 * block,
            Corrupt,
            "expected two {len}x{dim} f32 blocks ({} bytes), found {} bytes",
            2 * block,
            cur.remaining()
        );
        let read_block = |raw: &[u8]| -> Vec<f32> {
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
        };
        let rgb = read_block(cur.take(block)?);
        let flow = read_block(cur.take(block)?);
        Self::new(video_id, frames_per_unit, starts, dim, rgb, flow)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<UnitFeatureSequence> {
    UnitFeatureSequence::load(path)
}

pub fn save_features(seq: &UnitFeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    seq.save(path)
}
