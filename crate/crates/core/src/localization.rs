//! From activations to scored, suppressed detections.
//!
//! The cascaded T-CAS is spread back to full unit resolution, squashed with a
//! sigmoid and weighted by the pyramid heatmap. Per class and modality, runs of
//! units above a fraction of the peak become proposals; each is scored by its
//! mean activation over both modalities times the video-level class score, and
//! greedy per-class NMS removes overlaps.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ccm::Tcas;
use crate::data::{Modality, UnitFeatureSequence};
use crate::error::{ensure, Result};
use crate::interval::{temporal_iou, Interval};
use crate::nn::{sigmoid, FeatureMap};
use crate::pam::ClassHeatmap;
use crate::signal::expand_to_units;

/// Fraction of the per-class peak used as the proposal threshold.
pub const PEAK_FRACTION: f64 = 0.2;
pub const TOP_CLASSES: usize = 2;

/// How the activation entering the proposal score is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreForm {
    /// `sigmoid(M) * H`, the same map that drives extraction.
    #[default]
    Sigmoid,
    /// `M * H` with the raw cascaded activation.
    Raw,
}

/// Per-unit activation used for extraction and scoring, `l_u x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedActivation {
    pub values: FeatureMap,
    pub modality: Modality,
}

/// Cascaded T-CAS at full unit resolution.
pub fn expand_tcas(cas: &Tcas, num_units: usize) -> FeatureMap {
    expand_to_units(&cas.values, &cas.indices, num_units)
}

fn weighted(cas: &Tcas, heat: &ClassHeatmap, squash: bool) -> Result<FusedActivation> {
    ensure!(cas.modality == heat.modality, Shape, "T-CAS is {} but heatmap is {}", cas.modality, heat.modality);
    ensure!(
        cas.values.channels() == heat.values.channels(),
        Shape,
        "T-CAS has {} classes, heatmap {}",
        cas.values.channels(),
        heat.values.channels()
    );
    let full = expand_tcas(cas, heat.values.len());
    let mut values = full.clone();
    for (v, h) in values.as_mut_slice().iter_mut().zip(heat.values.as_slice()) {
        let m = if squash { sigmoid(*v) } else { *v };
        *v = m * h;
    }
    Ok(FusedActivation {
        values,
        modality: cas.modality,
    })
}

/// `sigmoid(M) * H`, elementwise at unit resolution.
pub fn attention_fuse(cas: &Tcas, heat: &ClassHeatmap) -> Result<FusedActivation> {
    weighted(cas, heat, true)
}

/// `M_cas * H` without the sigmoid.
pub fn raw_attention(cas: &Tcas, heat: &ClassHeatmap) -> Result<FusedActivation> {
    weighted(cas, heat, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub score: f64,
}

/// Average the sigmoid of each logit vector and keep the `k` best classes,
/// lower index first on ties.
pub fn select_top_classes(logits: &[Vec<f64>], k: usize) -> Result<Vec<ClassScore>> {
    ensure!(!logits.is_empty(), Validation, "no video-level predictions to rank");
    let classes = logits[0].len();
    ensure!(classes >= 1, Validation, "empty class vocabulary");
    ensure!(logits.iter().all(|l| l.len() == classes), Shape, "video-level predictions disagree on class count");
    let mut scores: Vec<ClassScore> = (0..classes)
        .map(|c| ClassScore {
            class: c,
            score: logits.iter().map(|l| sigmoid(l[c])).sum::<f64>() / logits.len() as f64,
        })
        .collect();
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class.cmp(&b.class)));
    scores.truncate(k.min(classes));
    Ok(scores)
}

/// Maximal runs of consecutive values strictly above `threshold`, in order.
pub fn extract_runs(values: &[f64], threshold: f64) -> Vec<Interval> {
    let mut runs = Vec::new();
    let mut open: Option<usize> = None;
    for (t, &v) in values.iter().enumerate() {
        match (v > threshold, open) {
            (true, None) => open = Some(t),
            (false, Some(s)) => {
                runs.push(Interval::new(s, t - 1));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        runs.push(Interval::new(s, values.len() - 1));
    }
    runs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub interval: Interval,
    pub class: usize,
    pub modality: Modality,
}

/// Per class: runs above `PEAK_FRACTION` of that class's peak activation.
pub fn extract_proposals(phi: &FusedActivation, classes: &[usize]) -> Result<Vec<Candidate>> {
    ensure!(!classes.is_empty(), Validation, "no classes selected for extraction");
    let mut out = Vec::new();
    for &c in classes {
        ensure!(c < phi.values.channels(), Validation, "class {c} out of range");
        let column = phi.values.column(c);
        let peak = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let threshold = PEAK_FRACTION * peak;
        out.extend(extract_runs(&column, threshold).into_iter().map(|interval| Candidate {
            interval,
            class: c,
            modality: phi.modality,
        }));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub interval: Interval,
    pub class: usize,
    pub p_act: f64,
    pub p_class: f64,
    pub p_conf: f64,
    pub modality: Modality,
}

/// Mean of the two-modality average over the interval, times the class score.
pub fn score_proposal(cand: &Candidate, rgb: &FeatureMap, flow: &FeatureMap, p_class: f64) -> Result<Proposal> {
    let Interval { start, end } = cand.interval;
    ensure!(rgb.len() == flow.len(), Shape, "modality activations differ in length");
    ensure!(
        start <= end && end < rgb.len() && cand.class < rgb.channels() && cand.class < flow.channels(),
        Validation,
        "proposal [{start}, {end}] class {} outside a {}x{} activation",
        cand.class,
        rgb.len(),
        rgb.channels()
    );
    let sum: f64 = (start..=end)
        .map(|t| (rgb.get(t, cand.class) + flow.get(t, cand.class)) / 2.0)
        .sum();
    let p_act = sum / cand.interval.len() as f64;
    Ok(Proposal {
        interval: cand.interval,
        class: cand.class,
        p_act,
        p_class,
        p_conf: p_act * p_class,
        modality: cand.modality,
    })
}

/// Ranking used by NMS and detection output.
pub fn rank_order(a: &Proposal, b: &Proposal) -> Ordering {
    b.p_conf.total_cmp(&a.p_conf).then(a.interval.start.cmp(&b.interval.start))
}

/// Greedy per-class suppression. Output is in rank order.
pub fn nms(proposals: &[Proposal], threshold: f64) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&i, &j| rank_order(&proposals[i], &proposals[j]).then(i.cmp(&j)));
    let mut kept: Vec<Proposal> = Vec::new();
    for i in order {
        let p = &proposals[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class == p.class && temporal_iou(&k.interval, &p.interval) > threshold);
        if !suppressed {
            kept.push(*p);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub start_unit: usize,
    pub end_unit: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub class: usize,
    pub p_act: f64,
    pub p_class: f64,
    pub p_conf: f64,
}

impl Detection {
    pub fn interval(&self) -> Interval {
        Interval::new(self.start_unit, self.end_unit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub video_id: String,
    pub detections: Vec<Detection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl DetectionSet {
    /// Times come from the unit start frames; an inclusive end unit ends `n_u` frames after it starts.
    pub fn from_proposals(features: &UnitFeatureSequence, proposals: &[Proposal], fps: f64) -> Self {
        let n_u = features.frames_per_unit as f64;
        let detections = proposals
            .iter()
            .map(|p| Detection {
                start_unit: p.interval.start,
                end_unit: p.interval.end,
                start_sec: features.unit_start_frames[p.interval.start] as f64 / fps,
                end_sec: (features.unit_start_frames[p.interval.end] as f64 + n_u) / fps,
                class: p.class,
                p_act: p.p_act,
                p_class: p.p_class,
                p_conf: p.p_conf,
            })
            .collect();
        Self {
            video_id: features.video_id.clone(),
            detections,
            config_hash: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
