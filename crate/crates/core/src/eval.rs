//! Detection metrics: per-class average precision and mAP over IoU thresholds.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::VideoRecord;
use crate::error::{ensure, Error, Result};
use crate::localization::DetectionSet;

pub use crate::interval::{temporal_iou, Interval};

/// Published numbers, kept for side-by-side display only.
pub mod reference {
    /// IoU thresholds of the THUMOS'14 table.
    pub const THUMOS_IOUS: [f64; 7] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
    /// Reported mAP (%) on THUMOS'14 at [`THUMOS_IOUS`].
    pub const THUMOS_MAP: [f64; 7] = [47.1, 41.6, 32.8, 24.7, 16.1, 10.1, 5.5];
    pub const ACTIVITYNET_IOUS: [f64; 3] = [0.5, 0.75, 0.95];
    /// Reported mAP (%) on ActivityNet-1.3 validation at [`ACTIVITYNET_IOUS`].
    pub const ACTIVITYNET_MAP: [f64; 3] = [39.29, 24.09, 6.71];
    /// Reported average mAP (%) over 0.5:0.05:0.95.
    pub const ACTIVITYNET_AVERAGE_MAP: f64 = 24.42;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUThresholds {
    pub values: Vec<f64>,
}

impl IoUThresholds {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure!(!values.is_empty(), Validation, "at least one IoU threshold is required");
        ensure!(
            values.iter().all(|&a| a > 0.0 && a <= 1.0),
            Validation,
            "IoU thresholds must lie in (0, 1]"
        );
        ensure!(values.windows(2).all(|w| w[0] < w[1]), Validation, "IoU thresholds must be strictly increasing");
        Ok(Self { values })
    }

    pub fn thumos() -> Self {
        Self {
            values: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }

    pub fn thumos_extended() -> Self {
        Self {
            values: reference::THUMOS_IOUS.to_vec(),
        }
    }

    /// 0.50, 0.55, ..., 0.95.
    pub fn activitynet() -> Self {
        Self {
            values: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "thumos" => Ok(Self::thumos()),
            "thumos7" => Ok(Self::thumos_extended()),
            "activitynet" => Ok(Self::activitynet()),
            other => Err(Error::Validation(format!(
                "unknown IoU preset '{other}' (expected thumos, thumos7 or activitynet)"
            ))),
        }
    }
}

/// One scored detection of a single class, flattened across videos.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredInterval {
    pub video: usize,
    pub interval: Interval,
    pub score: f64,
}

/// All-points interpolated area under the precision-recall curve.
fn interpolated_area(hits: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.into_iter().zip(precision) {
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// Average precision of one class. `gts[v]` holds the class's segments in video `v`.
///
/// Detections are visited by score (then video, then start, then input order);
/// each takes the unmatched ground truth of highest IoU, if that IoU reaches `alpha`.
pub fn average_precision(dets: &[ScoredInterval], gts: &[Vec<Interval>], alpha: f64) -> Option<f64> {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&dets[i], &dets[j]);
        b.score
            .total_cmp(&a.score)
            .then(a.video.cmp(&b.video))
            .then(a.interval.start.cmp(&b.interval.start))
            .then(i.cmp(&j))
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let hits: Vec<bool> = order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let Some(candidates) = gts.get(d.video) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in candidates.iter().enumerate() {
                if used[d.video][g] {
                    continue;
                }
                let iou = temporal_iou(&d.interval, gt);
                if iou >= alpha && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    used[d.video][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    Some(interpolated_area(&hits, num_gt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub num_gt: usize,
    /// AP per threshold; absent when the class has no ground truth.
    pub ap: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    /// Mean of mAP over 0.5:0.05:0.95.
    pub average_map: f64,
    pub classes: Vec<ClassReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

struct Grouped {
    dets: Vec<Vec<ScoredInterval>>,
    gts: Vec<Vec<Vec<Interval>>>,
}

fn group(detections: &[DetectionSet], truth: &[VideoRecord], num_classes: usize) -> Result<Grouped> {
    let mut index = HashMap::new();
    for (v, rec) in truth.iter().enumerate() {
        ensure!(
            index.insert(rec.video_id.as_str(), v).is_none(),
            Validation,
            "duplicate ground-truth video {}",
            rec.video_id
        );
    }
    let mut gts = vec![vec![Vec::new(); truth.len()]; num_classes];
    let mut total = 0;
    for (v, rec) in truth.iter().enumerate() {
        let segments = rec
            .segments
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("video {} has no segment annotations", rec.video_id)))?;
        for s in segments {
            ensure!(s.class < num_classes, Validation, "video {} has class {} >= {num_classes}", rec.video_id, s.class);
            gts[s.class][v].push(Interval::new(s.start, s.end));
            total += 1;
        }
    }
    ensure!(total > 0, Validation, "ground truth contains no segments");
    let mut dets = vec![Vec::new(); num_classes];
    for set in detections {
        let &v = index
            .get(set.video_id.as_str())
            .ok_or_else(|| Error::Validation(format!("detections for unknown video {}", set.video_id)))?;
        for d in &set.detections {
            ensure!(d.class < num_classes, Validation, "detection class {} >= {num_classes}", d.class);
            ensure!(d.start_unit <= d.end_unit, Validation, "reversed detection in {}", set.video_id);
            dets[d.class].push(ScoredInterval {
                video: v,
                interval: d.interval(),
                score: d.p_conf,
            });
        }
    }
    Ok(Grouped { dets, gts })
}

fn mean_ap(per_class: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    defined.iter().sum::<f64>() / defined.len() as f64
}

pub fn evaluate(
    detections: &[DetectionSet],
    truth: &[VideoRecord],
    num_classes: usize,
    thresholds: &IoUThresholds,
) -> Result<EvalReport> {
    let g = group(detections, truth, num_classes)?;
    let ap_at = |alphas: &[f64]| -> Vec<Vec<Option<f64>>> {
        (0..num_classes)
            .into_par_iter()
            .map(|c| alphas.iter().map(|&a| average_precision(&g.dets[c], &g.gts[c], a)).collect())
            .collect()
    };
    let table = ap_at(&thresholds.values);
    let map = (0..thresholds.values.len())
        .map(|i| mean_ap(&table.iter().map(|row| row[i]).collect::<Vec<_>>()))
        .collect();
    let grid = IoUThresholds::activitynet().values;
    let grid_table = ap_at(&grid);
    let average_map = (0..grid.len())
        .map(|i| mean_ap(&grid_table.iter().map(|row| row[i]).collect::<Vec<_>>()))
        .sum::<f64>()
        / grid.len() as f64;
    let classes = table
        .into_iter()
        .enumerate()
        .map(|(c, row)| ClassReport {
            class: c,
            num_gt: g.gts[c].iter().map(Vec::len).sum(),
            ap: row.into_iter().collect(),
        })
        .collect();
    Ok(EvalReport {
        thresholds: thresholds.values.clone(),
        map,
        average_map,
        classes,
        config_hash: None,
    })
}

impl EvalReport {
    pub fn map_at(&self, alpha: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&a| (a - alpha).abs() < 1e-12)
            .map(|i| self.map[i])
    }

    /// Aligned text table: one row per threshold, one column per class.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>6} {:>8}", "IoU", "mAP");
        for c in &self.classes {
            let _ = write!(out, " {:>8}", format!("c{}", c.class));
        }
        out.push('\n');
        for (i, (&a, &m)) in self.thresholds.iter().zip(&self.map).enumerate() {
            let _ = write!(out, "{a:>6.2} {m:>8.4}");
            for c in &self.classes {
                match &c.ap {
                    Some(ap) => {
                        let _ = write!(out, " {:>8.4}", ap[i]);
                    }
                    None => {
                        let _ = write!(out, " {:>8}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = writeln!(out, "average mAP (0.50:0.05:0.95) {:.4}", self.average_map);
        if let Some(h) = &self.config_hash {
            let _ = writeln!(out, "config {h}");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, json: &Path, table: &Path) -> Result<()> {
        std::fs::write(json, self.to_json()?)?;
        std::fs::write(table, self.to_table())?;
        Ok(())
    }
}
