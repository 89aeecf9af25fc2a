//! Training, inference and ablation orchestration over a whole dataset.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccm::{cascade_fuse, CcmEpochStats, CcmHyper, CcmModel, CcmTrainer, Tcas};
use crate::data::{
    Dataset, Modality, PlantLayout, SamplerConfig, SyntheticSpec, TrainingVideo, UnitFeatureSequence, VideoRecord,
};
use crate::error::{ensure, Error, Result};
use crate::eval::{evaluate, EvalReport, IoUThresholds};
use crate::localization::{
    attention_fuse, expand_tcas, extract_proposals, nms, raw_attention, score_proposal, select_top_classes,
    ClassScore, DetectionSet, FusedActivation, ScoreForm, TOP_CLASSES,
};
use crate::nn::{sigmoid, FeatureMap, LrSchedule, TensorStore};
use crate::pam::{ClassHeatmap, PamEpochStats, PamHyper, PamModel, PamTrainer};
use crate::train::config_hash;

/// Scale on which the two stages' sequences are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSpace {
    /// Per-class min-max normalized sequences.
    Normalized,
    /// Raw activations.
    #[default]
    Raw,
}

/// Classes whose stage-A regions are erased before stage B at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    /// One stage-B pass per selected class, erasing only that class's regions.
    #[default]
    PerClass,
    /// One pass erasing the union over all selected classes.
    Union,
}

/// Which inference components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    /// Fuse stage B's sequence into the cascaded one.
    pub mining: bool,
    /// Weight activations by the pyramid heatmap.
    pub pyramid: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            mining: true,
            pyramid: true,
        }
    }
}

impl Components {
    pub const ORIGINAL: Self = Self {
        mining: false,
        pyramid: false,
    };
    pub const MINING: Self = Self {
        mining: true,
        pyramid: false,
    };
    pub const FULL: Self = Self {
        mining: true,
        pyramid: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Dataset manifest, relative to the working directory.
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub modalities: Vec<Modality>,
    pub ccm: CcmHyper,
    pub pam: PamHyper,
    pub nms_threshold: f64,
    pub score_form: ScoreForm,
    pub fusion: FusionSpace,
    pub mask_scope: MaskScope,
    pub components: Components,
    /// Overrides the seeds of both model families.
    pub seed: u64,
    /// Frame rate for converting units to seconds.
    pub fps: f64,
    /// Worker threads; `None` uses all cores.
    pub threads: Option<usize>,
    /// Save a resumable checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            output_dir: PathBuf::from("runs/default"),
            modalities: Modality::ALL.to_vec(),
            ccm: CcmHyper::default(),
            pam: PamHyper::default(),
            nms_threshold: 0.3,
            score_form: ScoreForm::Sigmoid,
            fusion: FusionSpace::Raw,
            mask_scope: MaskScope::PerClass,
            components: Components::default(),
            seed: 0,
            fps: 25.0,
            threads: None,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.modalities.is_empty(), Validation, "at least one modality is required");
        let mut seen = self.modalities.clone();
        seen.sort_by_key(|m| m.as_str());
        seen.dedup();
        ensure!(seen.len() == self.modalities.len(), Validation, "modalities must not repeat");
        ensure!(
            self.nms_threshold > 0.0 && self.nms_threshold <= 1.0,
            Validation,
            "NMS threshold must lie in (0, 1]"
        );
        ensure!(self.fps > 0.0 && self.fps.is_finite(), Validation, "fps must be positive");
        ensure!(self.threads != Some(0), Validation, "threads must be >= 1");
        self.ccm.validate()?;
        self.pam.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    /// Hyperparameters with the run seed applied.
    pub fn ccm_hyper(&self) -> CcmHyper {
        CcmHyper {
            seed: self.seed,
            ..self.ccm.clone()
        }
    }

    pub fn pam_hyper(&self) -> PamHyper {
        PamHyper {
            seed: self.seed,
            ..self.pam.clone()
        }
    }

    /// First 16 hex digits of the SHA-256 of the settings that affect results.
    /// Paths and thread count are left out.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            manifest: None,
            output_dir: PathBuf::new(),
            threads: None,
            checkpoint_every: 0,
            ..self.clone()
        };
        config_hash(&canonical)
    }

    /// Small-width setup that trains the synthetic benchmarks in seconds.
    pub fn desk(seed: u64) -> Self {
        let mut config = RunConfig { seed, ..Default::default() };
        config.ccm.width = DESK_WIDTH;
        config.pam.width = DESK_WIDTH;
        config.ccm.momentum = DESK_MOMENTUM;
        config.pam.momentum = DESK_MOMENTUM;
        config.ccm.schedule = LrSchedule { phases: vec![(DESK_EPOCHS, DESK_LR)] };
        config.pam.schedule = LrSchedule { phases: vec![(DESK_EPOCHS, DESK_LR)] };
        config
    }
}

const DESK_WIDTH: usize = 32;
const DESK_EPOCHS: usize = 60;
const DESK_LR: f64 = 0.01;
const DESK_MOMENTUM: f64 = 0.9;

/// Benchmark for the component ablation: every video holds one strong and one
/// weak segment of the same class, so a single stage tends to find only one.
pub fn paired_segment_benchmark(seed: u64) -> (SyntheticSpec, RunConfig) {
    let spec = SyntheticSpec {
        seed,
        layout: PlantLayout::TwoSegments { weak_scale: 0.2 },
        ..Default::default()
    };
    let mut config = RunConfig::desk(seed);
    config.ccm.zeta = 0.5;
    let schedule = LrSchedule { phases: vec![(120, DESK_LR)] };
    config.ccm.schedule = schedule.clone();
    config.pam.schedule = schedule;
    (spec, config)
}

/// Trained weights for every configured modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub ccm: Vec<CcmModel>,
    pub pam: Vec<PamModel>,
}

impl Models {
    pub fn modalities(&self) -> Vec<Modality> {
        self.ccm.iter().map(|m| m.modality).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.ccm[0].num_classes()
    }

    pub fn to_store(&self) -> Result<TensorStore> {
        let mut store = TensorStore::default();
        for (c, p) in self.ccm.iter().zip(&self.pam) {
            store.extend(c.to_tensors())?;
            store.extend(p.to_tensors())?;
        }
        Ok(store)
    }

    pub fn from_store(store: &TensorStore, config: &RunConfig) -> Result<Self> {
        let mut ccm = Vec::new();
        let mut pam = Vec::new();
        for &m in &config.modalities {
            ccm.push(CcmModel::from_store(store, m)?);
            pam.push(PamModel::from_store(store, m, config.pam.lateral, config.pam.activation)?);
        }
        let classes = ccm[0].num_classes();
        ensure!(
            ccm.iter().all(|c| c.num_classes() == classes) && pam.iter().all(|p| p.params.num_classes() == classes),
            Format,
            "checkpoint models disagree on the class count"
        );
        Ok(Self { ccm, pam })
    }

    pub fn load(path: impl AsRef<Path>, config: &RunConfig) -> Result<Self> {
        Self::from_store(&TensorStore::load(path)?, config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityEpoch {
    pub modality: Modality,
    pub ccm: Option<CcmEpochStats>,
    pub pam: Option<PamEpochStats>,
}

/// Losses of every model for one epoch index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub modalities: Vec<ModalityEpoch>,
}

/// Trains the cascade and pyramid of every modality, one epoch of each at a time.
#[derive(Debug, Clone)]
pub struct PipelineTrainer {
    pub config: RunConfig,
    ccm: Vec<CcmTrainer>,
    pam: Vec<PamTrainer>,
    epoch: usize,
}

impl PipelineTrainer {
    pub fn new(config: &RunConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        ensure!(num_classes >= 1 && input_dim >= 1, Validation, "empty class vocabulary or feature dimension");
        let mut ccm = Vec::new();
        let mut pam = Vec::new();
        for &m in &config.modalities {
            ccm.push(CcmTrainer::new(config.ccm_hyper(), m, input_dim, num_classes)?);
            pam.push(PamTrainer::new(config.pam_hyper(), m, input_dim, num_classes)?);
        }
        Ok(Self {
            config: config.clone(),
            ccm,
            pam,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.ccm.iter().all(CcmTrainer::is_done) && self.pam.iter().all(PamTrainer::is_done)
    }

    pub fn run_epoch(&mut self, videos: &[TrainingVideo]) -> Result<EpochLog> {
        let mut modalities = Vec::new();
        for (c, p) in self.ccm.iter_mut().zip(self.pam.iter_mut()) {
            let ccm = if c.is_done() { None } else { Some(c.run_epoch(videos)?) };
            let pam = if p.is_done() { None } else { Some(p.run_epoch(videos)?) };
            modalities.push(ModalityEpoch {
                modality: c.model.modality,
                ccm,
                pam,
            });
        }
        let log = EpochLog {
            epoch: self.epoch,
            modalities,
        };
        self.epoch += 1;
        Ok(log)
    }

    /// Train to completion, calling `on_epoch` after every epoch.
    pub fn run(
        &mut self,
        videos: &[TrainingVideo],
        mut on_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while !self.is_done() {
            let log = self.run_epoch(videos)?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Weights plus optimizer state and epoch counters.
    pub fn state(&self) -> Result<TensorStore> {
        let mut store = TensorStore::default();
        for (c, p) in self.ccm.iter().zip(&self.pam) {
            store.extend(c.to_tensors())?;
            store.extend(p.to_tensors())?;
        }
        store.insert(crate::nn::NamedTensor::scalar("pipeline.epoch", self.epoch as f64))?;
        Ok(store)
    }

    pub fn load_state(&mut self, store: &TensorStore) -> Result<()> {
        for (c, p) in self.ccm.iter_mut().zip(self.pam.iter_mut()) {
            c.load_state(store)?;
            p.load_state(store)?;
        }
        self.epoch = store.expect("pipeline.epoch", &[1])?.values[0] as usize;
        Ok(())
    }

    pub fn models(&self) -> Models {
        Models {
            ccm: self.ccm.iter().map(|t| t.model.clone()).collect(),
            pam: self.pam.iter().map(|t| t.model.clone()).collect(),
        }
    }
}

/// Train every model on the weakly labelled view of `train`.
pub fn train(config: &RunConfig, train: &Dataset) -> Result<(Models, Vec<EpochLog>)> {
    let videos = train.weak();
    ensure!(!videos.is_empty(), Validation, "training split is empty");
    let mut trainer = PipelineTrainer::new(config, videos[0].features.feature_dim(), train.num_classes)?;
    let logs = trainer.run(&videos, |_, _| Ok(()))?;
    Ok((trainer.models(), logs))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// One row per epoch; empty cells for models that had already finished.
pub fn loss_csv(logs: &[EpochLog], modalities: &[Modality], config_hash: &str) -> String {
    let mut out = String::from("epoch");
    for m in modalities {
        let _ = write!(out, ",{m}_ccm_lr,{m}_ccm_loss_a,{m}_ccm_loss_b,{m}_pam_lr,{m}_pam_loss");
    }
    out.push_str(",config_hash\n");
    for log in logs {
        let _ = write!(out, "{}", log.epoch);
        for m in modalities {
            let entry = log.modalities.iter().find(|e| e.modality == *m);
            let ccm = entry.and_then(|e| e.ccm);
            let pam = entry.and_then(|e| e.pam);
            let _ = write!(
                out,
                ",{},{},{},{},{}",
                cell(ccm.map(|s| s.learning_rate)),
                cell(ccm.map(|s| s.loss_a)),
                cell(ccm.map(|s| s.loss_b)),
                cell(pam.map(|s| s.learning_rate)),
                cell(pam.map(|s| s.loss)),
            );
        }
        let _ = writeln!(out, ",{config_hash}");
    }
    out
}

/// Intermediate sequences of one modality, kept for export and inspection.
#[derive(Debug, Clone)]
pub struct ModalityTrace {
    pub modality: Modality,
    pub stage_a: Tcas,
    pub stage_b: Tcas,
    /// The sequence localization runs on: normalized stage A, or the cascaded fusion.
    pub cascaded: Tcas,
    pub heatmap: Option<ClassHeatmap>,
    pub activation: FusedActivation,
}

#[derive(Debug, Clone)]
pub struct VideoResult {
    pub classes: Vec<ClassScore>,
    pub traces: Vec<ModalityTrace>,
    pub detections: DetectionSet,
}

pub fn infer_video(
    models: &Models,
    config: &RunConfig,
    components: Components,
    features: &UnitFeatureSequence,
) -> Result<VideoResult> {
    let n = features.len();
    let mut inputs = Vec::new();
    let mut stage_a = Vec::new();
    let mut heats = Vec::new();
    let mut logits = Vec::new();
    for (ccm, pam) in models.ccm.iter().zip(&models.pam) {
        let full = features.to_map(ccm.modality);
        let sampled = config.ccm.sampler.sample_for_inference(&full)?;
        let a = ccm.infer_stage_a(&sampled.features, &sampled.indices)?;
        logits.push(a.logits.clone());
        if components.pyramid {
            let out = pam.infer(&full, config.pam.window)?;
            logits.push(out.video_logits());
            heats.push(Some(out.heatmap));
        } else {
            heats.push(None);
        }
        inputs.push(sampled.features);
        stage_a.push(a.tcas);
    }
    let classes = select_top_classes(&logits, TOP_CLASSES)?;
    let class_ids: Vec<usize> = classes.iter().map(|c| c.class).collect();

    let mut traces = Vec::new();
    let mut score_maps = Vec::new();
    for (((ccm, x), a), heat) in models.ccm.iter().zip(&inputs).zip(stage_a).zip(heats) {
        let b = stage_b(ccm, config, x, &a, &class_ids)?;
        // without the heatmap there is no sigmoid gate, so the bounded normalized scale is used
        let space = if components.pyramid { config.fusion } else { FusionSpace::Normalized };
        let cascaded = match (components.mining, space) {
            (true, FusionSpace::Normalized) => cascade_fuse(&a.normalized(), &b.normalized())?,
            (true, FusionSpace::Raw) => cascade_fuse(&a, &b)?,
            (false, FusionSpace::Normalized) => a.normalized(),
            (false, FusionSpace::Raw) => a.clone(),
        };
        let (activation, score) = match &heat {
            Some(h) => {
                let phi = attention_fuse(&cascaded, h)?;
                let score = match config.score_form {
                    ScoreForm::Sigmoid => phi.values.clone(),
                    ScoreForm::Raw => raw_attention(&cascaded, h)?.values,
                };
                (phi, score)
            }
            None => {
                let values = expand_tcas(&cascaded, n);
                (
                    FusedActivation {
                        values: values.clone(),
                        modality: ccm.modality,
                    },
                    values,
                )
            }
        };
        score_maps.push(score);
        traces.push(ModalityTrace {
            modality: ccm.modality,
            stage_a: a,
            stage_b: b,
            cascaded,
            heatmap: heat,
            activation,
        });
    }

    let (rgb, flow) = (&score_maps[0], score_maps.get(1).unwrap_or(&score_maps[0]));
    let mut proposals = Vec::new();
    for trace in &traces {
        for cand in extract_proposals(&trace.activation, &class_ids)? {
            let p_class = classes.iter().find(|c| c.class == cand.class).map(|c| c.score).unwrap_or(0.0);
            proposals.push(score_proposal(&cand, rgb, flow, p_class)?);
        }
    }
    let kept = nms(&proposals, config.nms_threshold);
    let mut detections = DetectionSet::from_proposals(features, &kept, config.fps);
    detections.config_hash = Some(config.hash());
    Ok(VideoResult {
        classes,
        traces,
        detections,
    })
}

/// Stage-B sequence for the selected classes. Under [`MaskScope::PerClass`]
/// each selected class's column comes from its own erased pass; other columns
/// come from the union pass.
fn stage_b(ccm: &CcmModel, config: &RunConfig, x: &FeatureMap, a: &Tcas, classes: &[usize]) -> Result<Tcas> {
    let (zeta, norm) = (config.ccm.zeta, config.ccm.normalize_mask);
    let mut b = ccm.infer_stage_b(x, a, classes, zeta, norm)?.tcas;
    if config.mask_scope == MaskScope::PerClass && classes.len() > 1 {
        for &c in classes {
            let own = ccm.infer_stage_b(x, a, &[c], zeta, norm)?.tcas;
            for t in 0..b.len() {
                b.values.set(t, c, own.values.get(t, c));
            }
        }
    }
    Ok(b)
}

/// Inference over many videos in parallel; results keep input order.
pub fn infer_all(
    models: &Models,
    config: &RunConfig,
    components: Components,
    videos: &[&UnitFeatureSequence],
) -> Result<Vec<VideoResult>> {
    videos
        .par_iter()
        .map(|f| infer_video(models, config, components, f))
        .collect()
}

pub fn detections_json(results: &[VideoResult]) -> Result<String> {
    let sets: Vec<&DetectionSet> = results.iter().map(|r| &r.detections).collect();
    let mut s = serde_json::to_string_pretty(&sets)?;
    s.push('\n');
    Ok(s)
}

pub fn test_records(test: &Dataset) -> Vec<VideoRecord> {
    test.videos.iter().map(|v| v.record.clone()).collect()
}

/// Infer on `test` and score against its segments.
pub fn evaluate_models(
    models: &Models,
    config: &RunConfig,
    components: Components,
    test: &Dataset,
    thresholds: &IoUThresholds,
) -> Result<(Vec<VideoResult>, EvalReport)> {
    let feats: Vec<&UnitFeatureSequence> = test.videos.iter().map(|v| &v.features).collect();
    let results = infer_all(models, config, components, &feats)?;
    let dets: Vec<DetectionSet> = results.iter().map(|r| r.detections.clone()).collect();
    let mut report = evaluate(&dets, &test_records(test), test.num_classes, thresholds)?;
    report.config_hash = Some(config.hash());
    Ok((results, report))
}

/// Cascade and pyramid columns of one class, at unit resolution.
pub struct CasColumns {
    pub stage_a: Vec<f64>,
    pub stage_b: Vec<f64>,
    pub cascaded: Vec<f64>,
    pub heat: Vec<f64>,
    pub activation: Vec<f64>,
}

pub fn cas_columns(trace: &ModalityTrace, class: usize) -> CasColumns {
    let n = trace.activation.values.len();
    let col = |t: &Tcas| expand_tcas(t, n).column(class);
    CasColumns {
        stage_a: col(&trace.stage_a.normalized()),
        stage_b: col(&trace.stage_b.normalized()),
        cascaded: col(&trace.cascaded),
        heat: trace
            .heatmap
            .as_ref()
            .map(|h| h.values.column(class))
            .unwrap_or_else(|| vec![1.0; n]),
        activation: trace.activation.values.column(class),
    }
}

pub const CAS_HEADER: &str = "unit,m_a,m_b,m_cas,h,phi";

pub fn cas_csv(trace: &ModalityTrace, class: usize, config_hash: &str) -> String {
    let c = cas_columns(trace, class);
    let mut out = format!("# config {config_hash}\n{CAS_HEADER}\n");
    for t in 0..c.activation.len() {
        let _ = writeln!(
            out,
            "{t},{},{},{},{},{}",
            c.stage_a[t], c.stage_b[t], c.cascaded[t], c.heat[t], c.activation[t]
        );
    }
    out
}

const PLOT_W: f64 = 800.0;
const ROW_H: f64 = 120.0;
const MARGIN: f64 = 30.0;

fn polyline(values: &[f64], top: f64, colour: &str) -> String {
    let n = values.len().max(2) - 1;
    let points: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(t, v)| {
            let x = MARGIN + t as f64 / n as f64 * (PLOT_W - 2.0 * MARGIN);
            let y = top + (1.0 - v.clamp(0.0, 1.0)) * (ROW_H - 20.0);
            format!("{x:.1},{y:.1}")
        })
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        points.join(" ")
    )
}

/// Static plot of one modality: per selected class, ground truth bars and the
/// stage A, stage B and final activation curves.
pub fn cas_svg(result: &VideoResult, trace: &ModalityTrace, record: Option<&VideoRecord>) -> String {
    let n = trace.activation.values.len();
    let rows = result.classes.len();
    let height = MARGIN * 2.0 + ROW_H * rows as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{height}\" font-family=\"monospace\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{MARGIN}\" y=\"18\">{} {} config {}</text>\n",
        result.detections.video_id,
        trace.modality,
        result.detections.config_hash.as_deref().unwrap_or("-")
    );
    let scale = (PLOT_W - 2.0 * MARGIN) / n.max(2).saturating_sub(1) as f64;
    for (row, cs) in result.classes.iter().enumerate() {
        let top = MARGIN + row as f64 * ROW_H;
        let _ = writeln!(
            svg,
            "<text x=\"{MARGIN}\" y=\"{:.1}\">class {} (score {:.3})</text>",
            top + 10.0,
            cs.class,
            cs.score
        );
        if let Some(segs) = record.and_then(|r| r.segments.as_ref()) {
            for s in segs.iter().filter(|s| s.class == cs.class) {
                let _ = writeln!(
                    svg,
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#cfe8cf\"/>",
                    MARGIN + s.start as f64 * scale,
                    top + 14.0,
                    ((s.end - s.start) as f64 * scale).max(1.0),
                    ROW_H - 34.0
                );
            }
        }
        let c = cas_columns(trace, cs.class);
        svg.push_str(&polyline(&c.stage_a, top + 14.0, "#1f77b4"));
        svg.push_str(&polyline(&c.stage_b, top + 14.0, "#ff7f0e"));
        svg.push_str(&polyline(&c.activation, top + 14.0, "#d62728"));
    }
    let _ = writeln!(
        svg,
        "<text x=\"{MARGIN}\" y=\"{:.1}\">blue: stage A  orange: stage B  red: final  green: ground truth</text>",
        height - 8.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Write `{video}.{modality}.class{c}.csv` for every class and `{video}.{modality}.svg`.
pub fn export_cas(result: &VideoResult, record: Option<&VideoRecord>, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let hash = result.detections.config_hash.clone().unwrap_or_default();
    let id = &result.detections.video_id;
    let mut written = Vec::new();
    for trace in &result.traces {
        for c in 0..trace.activation.values.channels() {
            let path = dir.join(format!("{id}.{}.class{c}.csv", trace.modality));
            std::fs::write(&path, cas_csv(trace, c, &hash))?;
            written.push(path);
        }
        let path = dir.join(format!("{id}.{}.svg", trace.modality));
        std::fs::write(&path, cas_svg(result, trace, record))?;
        written.push(path);
    }
    Ok(written)
}

/// Recompute the final activation from the cascaded and heat columns.
pub fn recompute_activation(m_cas: f64, heat: f64) -> f64 {
    sigmoid(m_cas) * heat
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSpec {
    /// Emit the original / +mining / +pyramid rows.
    pub components: bool,
    pub zetas: Vec<f64>,
    pub samplers: Vec<SamplerConfig>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            components: true,
            zetas: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            samplers: vec![
                SamplerConfig::Uniform { interval: 4 },
                SamplerConfig::Sparse { segments: 32 },
                SamplerConfig::Shot { threshold: 1.5 },
            ],
        }
    }
}

impl AblationSpec {
    pub fn num_rows(&self) -> usize {
        3 * self.components as usize + self.zetas.len() + self.samplers.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_rows() > 0, Validation, "ablation needs at least one configuration");
        for &z in &self.zetas {
            ensure!(z > 0.0 && z < 1.0, Validation, "zeta {z} outside (0, 1)");
        }
        self.samplers.iter().try_for_each(SamplerConfig::validate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub name: String,
    pub map_at_05: f64,
}

pub const COMPONENT_ROWS: [(&str, Components); 3] = [
    ("original", Components::ORIGINAL),
    ("+mining", Components::MINING),
    ("+pyramid", Components::FULL),
];

fn map_at_05(models: &Models, config: &RunConfig, components: Components, test: &Dataset) -> Result<f64> {
    let t = IoUThresholds::new(vec![0.5])?;
    Ok(evaluate_models(models, config, components, test, &t)?.1.map[0])
}

/// mAP@0.5 for each component setting of an already trained model set.
pub fn component_rows(models: &Models, config: &RunConfig, test: &Dataset) -> Result<Vec<AblationRow>> {
    COMPONENT_ROWS
        .iter()
        .map(|(name, comp)| {
            Ok(AblationRow {
                group: "components".into(),
                name: (*name).into(),
                map_at_05: map_at_05(models, config, *comp, test)?,
            })
        })
        .collect()
}

pub fn run_ablation(config: &RunConfig, spec: &AblationSpec, train_set: &Dataset, test: &Dataset) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    if spec.components {
        let (models, _) = train(config, train_set)?;
        rows.extend(component_rows(&models, config, test)?);
    }
    for &zeta in &spec.zetas {
        let mut c = config.clone();
        c.ccm.zeta = zeta;
        let (models, _) = train(&c, train_set)?;
        rows.push(AblationRow {
            group: "zeta".into(),
            name: format!("{zeta}"),
            map_at_05: map_at_05(&models, &c, config.components, test)?,
        });
    }
    for sampler in &spec.samplers {
        let mut c = config.clone();
        c.ccm.sampler = *sampler;
        let (models, _) = train(&c, train_set)?;
        rows.push(AblationRow {
            group: "sampler".into(),
            name: sampler.name().into(),
            map_at_05: map_at_05(&models, &c, config.components, test)?,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow], config_hash: &str) -> String {
    let mut out = format!("{:<12} {:<12} {:>8}\n", "group", "setting", "mAP@0.5");
    for r in rows {
        let _ = writeln!(out, "{:<12} {:<12} {:>8.4}", r.group, r.name, r.map_at_05);
    }
    let _ = writeln!(out, "config {config_hash}");
    out
}
