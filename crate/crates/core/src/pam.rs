//! Pyramid attention module.
//!
//! A window of `T_w` units is max-pooled three times (factor 2) into four
//! levels. Each level gets a 1x1 conv, a top-down lateral sum from the level
//! above, and a 1x1 prediction conv producing a label map `K_l` (`T_l x C`).
//! The video-level prediction is the mean over levels of each map's temporal
//! average. At inference the label maps are repeated back to `T_w`, summed,
//! concatenated over windows and min-max normalized per class into a heatmap.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, TrainingVideo};
use crate::error::{ensure, Error, Result};
use crate::nn::checkpoint::NamedTensor;
use crate::nn::{
    add_l2_grad, cross_entropy, global_avg_pool, maxpool1d, optimizer_step, relu, relu_backward, Conv1d,
    FeatureMap, LossForm, LrSchedule, OptimizerState, Parameters, TensorStore,
};
use crate::signal::normalize_columns;
use crate::train::{check_finite, epoch_rng, stream_id, summed_gradients};

pub const LEVELS: usize = 4;
/// Total temporal subsampling at the coarsest level.
pub const PYRAMID_FACTOR: usize = 1 << (LEVELS - 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateralMode {
    /// Coarser merged map is repeated x2 and added to the finer level.
    #[default]
    TopDown,
    /// Levels are predicted independently.
    None,
}

/// Activation after each level's 1x1 feature conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelActivation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PamLevel {
    pub conv: Conv1d,
    pub pred: Conv1d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PamParams {
    pub levels: Vec<PamLevel>,
    pub lateral: LateralMode,
    pub activation: LevelActivation,
}

impl PamParams {
    pub fn zeros(input_dim: usize, width: usize, num_classes: usize) -> Self {
        Self {
            levels: (0..LEVELS)
                .map(|_| PamLevel {
                    conv: Conv1d::zeros(width, input_dim, 1, 1),
                    pred: Conv1d::zeros(num_classes, width, 1, 1),
                })
                .collect(),
            lateral: LateralMode::default(),
            activation: LevelActivation::default(),
        }
    }

    pub fn xavier<R: Rng + ?Sized>(rng: &mut R, input_dim: usize, width: usize, num_classes: usize) -> Self {
        Self {
            levels: (0..LEVELS)
                .map(|_| PamLevel {
                    conv: Conv1d::xavier(rng, width, input_dim, 1, 1),
                    pred: Conv1d::xavier(rng, num_classes, width, 1, 1),
                })
                .collect(),
            lateral: LateralMode::default(),
            activation: LevelActivation::default(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.levels[0].pred.out_channels
    }

    pub fn input_dim(&self) -> usize {
        self.levels[0].conv.in_channels
    }

    pub fn width(&self) -> usize {
        self.levels[0].conv.out_channels
    }
}

impl Parameters for PamParams {
    fn slices(&self) -> Vec<&[f64]> {
        self.levels
            .iter()
            .flat_map(|l| l.conv.slices().into_iter().chain(l.pred.slices()))
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.levels
            .iter_mut()
            .flat_map(|l| {
                let PamLevel { conv, pred } = l;
                conv.slices_mut().into_iter().chain(pred.slices_mut())
            })
            .collect()
    }

    fn zeros_like(&self) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .map(|l| PamLevel {
                    conv: l.conv.zeros_like(),
                    pred: l.pred.zeros_like(),
                })
                .collect(),
            ..*self
        }
    }

    fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        self.levels
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let mut v = l.conv.to_tensors(&format!("{prefix}.level{}.conv", i + 1));
                v.extend(l.pred.to_tensors(&format!("{prefix}.level{}.pred", i + 1)));
                v
            })
            .collect()
    }

    fn load_tensors(&mut self, prefix: &str, store: &TensorStore) -> Result<()> {
        for (i, l) in self.levels.iter_mut().enumerate() {
            l.conv.load_tensors(&format!("{prefix}.level{}.conv", i + 1), store)?;
            l.pred.load_tensors(&format!("{prefix}.level{}.pred", i + 1), store)?;
        }
        Ok(())
    }
}

/// Per-level label maps of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMapSet {
    pub maps: Vec<FeatureMap>,
    /// First unit of the window in video coordinates.
    pub origin: usize,
}

/// Forward record of one window.
#[derive(Debug, Clone)]
pub struct PamForward {
    /// Pooled inputs `x_l`.
    pub inputs: Vec<FeatureMap>,
    /// Level features after the 1x1 conv and activation.
    pub features: Vec<FeatureMap>,
    /// Features after the lateral sum, fed to the prediction conv.
    pub merged: Vec<FeatureMap>,
    pub label_maps: Vec<FeatureMap>,
    pub logits: Vec<f64>,
}

impl PamForward {
    pub fn label_map_set(&self, origin: usize) -> LabelMapSet {
        LabelMapSet {
            maps: self.label_maps.clone(),
            origin,
        }
    }
}

/// Nearest-neighbour x2 temporal upsampling.
fn repeat2(x: &FeatureMap) -> FeatureMap {
    let mut out = FeatureMap::zeros(2 * x.len(), x.channels());
    for t in 0..x.len() {
        out.row_mut(2 * t).copy_from_slice(x.row(t));
        out.row_mut(2 * t + 1).copy_from_slice(x.row(t));
    }
    out
}

/// Adjoint of [`repeat2`]: sum adjacent pairs.
fn pair_sum(x: &FeatureMap) -> FeatureMap {
    let mut out = FeatureMap::zeros(x.len() / 2, x.channels());
    for t in 0..out.len() {
        let row = out.row_mut(t);
        for (o, (a, b)) in row.iter_mut().zip(x.row(2 * t).iter().zip(x.row(2 * t + 1))) {
            *o = a + b;
        }
    }
    out
}

fn add_assign(a: &mut FeatureMap, b: &FeatureMap) {
    for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x += y;
    }
}

pub fn pam_forward(x: &FeatureMap, p: &PamParams) -> Result<PamForward> {
    ensure!(
        x.len().is_multiple_of(PYRAMID_FACTOR),
        Shape,
        "window length {} is not a multiple of {PYRAMID_FACTOR}",
        x.len()
    );
    ensure!(p.levels.len() == LEVELS, Shape, "pyramid needs {LEVELS} levels, params have {}", p.levels.len());
    let mut inputs = vec![x.clone()];
    for _ in 1..LEVELS {
        let next = maxpool1d(inputs.last().unwrap(), 2, 2)?;
        inputs.push(next);
    }
    let mut features = Vec::with_capacity(LEVELS);
    for (level, input) in p.levels.iter().zip(&inputs) {
        let mut f = level.conv.forward(input)?;
        if p.activation == LevelActivation::Relu {
            relu(&mut f);
        }
        features.push(f);
    }
    let mut merged = features.clone();
    if p.lateral == LateralMode::TopDown {
        for l in (0..LEVELS - 1).rev() {
            let up = repeat2(&merged[l + 1]);
            add_assign(&mut merged[l], &up);
        }
    }
    let label_maps = p
        .levels
        .iter()
        .zip(&merged)
        .map(|(level, m)| level.pred.forward(m))
        .collect::<Result<Vec<_>>>()?;
    let mut logits = vec![0.0; p.num_classes()];
    for k in &label_maps {
        for (acc, v) in logits.iter_mut().zip(global_avg_pool(k)) {
            *acc += v / LEVELS as f64;
        }
    }
    Ok(PamForward {
        inputs,
        features,
        merged,
        label_maps,
        logits,
    })
}

pub fn pam_backward(p: &PamParams, fwd: &PamForward, grad_logits: &[f64]) -> Result<PamParams> {
    ensure!(
        fwd.label_maps.len() == LEVELS
            && grad_logits.len() == p.num_classes()
            && fwd.inputs[0].channels() == p.input_dim()
            && fwd.features[0].channels() == p.width(),
        Shape,
        "forward record does not match pyramid parameters"
    );
    let mut grads = p.zeros_like();
    let mut carry: Option<FeatureMap> = None;
    for l in 0..LEVELS {
        let len = fwd.label_maps[l].len();
        let scale = 1.0 / (LEVELS * len) as f64;
        let mut g_k = FeatureMap::zeros(len, p.num_classes());
        for t in 0..len {
            for (g, d) in g_k.row_mut(t).iter_mut().zip(grad_logits) {
                *g = d * scale;
            }
        }
        let mut g_merged = p.levels[l].pred.backward(&fwd.merged[l], &g_k, &mut grads.levels[l].pred)?;
        if let Some(from_finer) = carry.take() {
            add_assign(&mut g_merged, &pair_sum(&from_finer));
        }
        let mut g_feat = g_merged.clone();
        if p.lateral == LateralMode::TopDown {
            carry = Some(g_merged);
        }
        if p.activation == LevelActivation::Relu {
            relu_backward(&fwd.features[l], &mut g_feat);
        }
        p.levels[l].conv.backward(&fwd.inputs[l], &g_feat, &mut grads.levels[l].conv)?;
    }
    Ok(grads)
}

/// Repeat every row `factor` times, checking the result has `target_len` rows.
pub fn upsample_repeat(map: &FeatureMap, factor: usize, target_len: usize) -> Result<FeatureMap> {
    ensure!(
        factor >= 1 && map.len() * factor == target_len,
        Shape,
        "{} rows x {factor} does not give {target_len}",
        map.len()
    );
    let mut out = FeatureMap::zeros(target_len, map.channels());
    for t in 0..target_len {
        out.row_mut(t).copy_from_slice(map.row(t / factor));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    /// Zero units appended past the end of the video.
    pub pad: usize,
}

/// Non-overlapping tiling of a video by windows of `window` units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub window: usize,
    pub num_units: usize,
    pub windows: Vec<Window>,
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

pub fn plan_windows(num_units: usize, window: usize) -> Result<WindowPlan> {
    ensure!(
        window >= PYRAMID_FACTOR && window.is_multiple_of(PYRAMID_FACTOR),
        Validation,
        "window length {window} must be a positive multiple of {PYRAMID_FACTOR}"
    );
    ensure!(num_units >= 1, Validation, "cannot plan windows for an empty video");
    let count = num_units.div_ceil(window);
    let windows = (0..count)
        .map(|k| {
            let start = k * window;
            let end = start + window;
            Window {
                start,
                end,
                pad: end.saturating_sub(num_units),
            }
        })
        .collect();
    Ok(WindowPlan {
        window,
        num_units,
        windows,
    })
}

/// Normalized per-unit class heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHeatmap {
    pub values: FeatureMap,
    pub modality: Modality,
}

/// Sum of the upsampled label maps of one window, before normalization.
pub fn window_heat(set: &LabelMapSet, window: usize) -> Result<FeatureMap> {
    ensure!(set.maps.len() == LEVELS, Assembly, "window at {} has {} label maps", set.origin, set.maps.len());
    let mut sum = FeatureMap::zeros(window, set.maps[0].channels());
    for (l, map) in set.maps.iter().enumerate() {
        add_assign(&mut sum, &upsample_repeat(map, 1 << l, window)?);
    }
    Ok(sum)
}

/// Concatenate windows in order, drop the padded tail, normalize each class over the video.
pub fn assemble_heatmap(sets: &[LabelMapSet], plan: &WindowPlan, modality: Modality) -> Result<ClassHeatmap> {
    ensure!(
        sets.len() == plan.windows.len(),
        Assembly,
        "expected {} windows, got {}",
        plan.windows.len(),
        sets.len()
    );
    let classes = sets[0]
        .maps
        .first()
        .map(|m| m.channels())
        .ok_or_else(|| Error::Assembly("window without label maps".into()))?;
    let mut raw = FeatureMap::zeros(plan.num_units, classes);
    for (set, w) in sets.iter().zip(&plan.windows) {
        ensure!(set.origin == w.start, Assembly, "window at {} arrived where {} was expected", set.origin, w.start);
        let heat = window_heat(set, plan.window)?;
        for t in w.start..w.end.min(plan.num_units) {
            raw.row_mut(t).copy_from_slice(heat.row(t - w.start));
        }
    }
    Ok(ClassHeatmap {
        values: normalize_columns(&raw),
        modality,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PamHyper {
    /// Window length `T_w`.
    pub window: usize,
    pub lambda: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub momentum: f64,
    pub width: usize,
    pub loss: LossForm,
    pub activation: LevelActivation,
    pub lateral: LateralMode,
    pub seed: u64,
}

impl Default for PamHyper {
    fn default() -> Self {
        Self {
            window: 64,
            lambda: 0.0025,
            schedule: LrSchedule::default(),
            batch_size: 16,
            momentum: 0.0,
            width: 512,
            loss: LossForm::FullBce,
            activation: LevelActivation::Relu,
            lateral: LateralMode::TopDown,
            seed: 0,
        }
    }
}

impl PamHyper {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.window >= PYRAMID_FACTOR && self.window.is_multiple_of(PYRAMID_FACTOR),
            Validation,
            "window must be a positive multiple of {PYRAMID_FACTOR}, got {}",
            self.window
        );
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), Validation, "lambda must be >= 0");
        ensure!(self.batch_size >= 1 && self.width >= 1, Validation, "batch size and width must be >= 1");
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PamModel {
    pub modality: Modality,
    pub params: PamParams,
}

/// Heatmap plus the window-level predictions of one video.
#[derive(Debug, Clone)]
pub struct PamOutput {
    pub heatmap: ClassHeatmap,
    pub label_maps: Vec<LabelMapSet>,
    pub window_logits: Vec<Vec<f64>>,
}

impl PamOutput {
    /// Video-level logits: per-class maximum over windows.
    pub fn video_logits(&self) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.window_logits[0].len()];
        for w in &self.window_logits {
            for (o, &v) in out.iter_mut().zip(w) {
                *o = o.max(v);
            }
        }
        out
    }
}

impl PamModel {
    pub fn prefix(&self) -> String {
        format!("{}.pam", self.modality)
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.params.to_tensors(&self.prefix())
    }

    pub fn from_store(store: &TensorStore, modality: Modality, lateral: LateralMode, activation: LevelActivation) -> Result<Self> {
        let prefix = format!("{modality}.pam");
        let conv = store
            .get(&format!("{prefix}.level1.conv.weight"))
            .ok_or_else(|| Error::Format(format!("checkpoint has no {modality} pyramid model")))?;
        let pred = store
            .get(&format!("{prefix}.level1.pred.weight"))
            .ok_or_else(|| Error::Format("missing pyramid prediction weight".into()))?;
        ensure!(conv.dims.len() == 3 && pred.dims.len() == 3, Shape, "pyramid conv weights must be rank 3");
        let mut params = PamParams::zeros(conv.dims[1], conv.dims[0], pred.dims[0]);
        params.lateral = lateral;
        params.activation = activation;
        params.load_tensors(&prefix, store)?;
        Ok(Self { modality, params })
    }

    pub fn infer(&self, features: &FeatureMap, window: usize) -> Result<PamOutput> {
        let plan = plan_windows(features.len(), window)?;
        let mut label_maps = Vec::with_capacity(plan.len());
        let mut window_logits = Vec::with_capacity(plan.len());
        for w in &plan.windows {
            let fwd = pam_forward(&features.window(w.start, w.end), &self.params)?;
            label_maps.push(fwd.label_map_set(w.start));
            window_logits.push(fwd.logits);
        }
        let heatmap = assemble_heatmap(&label_maps, &plan, self.modality)?;
        Ok(PamOutput {
            heatmap,
            label_maps,
            window_logits,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PamEpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean per-window cross-entropy.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct PamTrainer {
    pub model: PamModel,
    pub hyper: PamHyper,
    opt: OptimizerState,
    epoch: usize,
}

struct WindowItem {
    features: FeatureMap,
    targets: Vec<f64>,
    video: usize,
}

impl PamTrainer {
    pub fn new(hyper: PamHyper, modality: Modality, input_dim: usize, num_classes: usize) -> Result<Self> {
        hyper.validate()?;
        let mut rng = epoch_rng(hyper.seed, stream_id(&format!("{modality}.pam.init")), 0);
        let mut params = PamParams::xavier(&mut rng, input_dim, hyper.width, num_classes);
        params.lateral = hyper.lateral;
        params.activation = hyper.activation;
        Ok(Self {
            opt: OptimizerState::new(hyper.schedule.lr_at(0), hyper.momentum)?,
            model: PamModel { modality, params },
            hyper,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.hyper.schedule.total_epochs()
    }

    fn windows(&self, videos: &[TrainingVideo]) -> Result<Vec<WindowItem>> {
        let num_classes = self.model.params.num_classes();
        let mut items = Vec::new();
        for (v, video) in videos.iter().enumerate() {
            ensure!(!video.labels.is_empty(), Validation, "video {} has no labels", video.features.video_id);
            let full = video.features.to_map(self.model.modality);
            let plan = plan_windows(full.len(), self.hyper.window)?;
            for w in &plan.windows {
                items.push(WindowItem {
                    features: full.window(w.start, w.end),
                    targets: video.labels.targets(num_classes),
                    video: v,
                });
            }
        }
        Ok(items)
    }

    pub fn run_epoch(&mut self, videos: &[TrainingVideo]) -> Result<PamEpochStats> {
        ensure!(!videos.is_empty(), Validation, "no training videos");
        let items = self.windows(videos)?;
        let mut rng = epoch_rng(self.hyper.seed, stream_id(&format!("{}.pam.data", self.model.modality)), self.epoch);
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        let lr = self.hyper.schedule.lr_at(self.epoch);
        self.opt.learning_rate = lr;
        let mut total = 0.0;
        for batch in order.chunks(self.hyper.batch_size) {
            let batch_items: Vec<&WindowItem> = batch.iter().map(|&i| &items[i]).collect();
            let params = &self.model.params;
            let (mut grads, losses) = summed_gradients(&batch_items, params, |item| {
                let fwd = pam_forward(&item.features, params)?;
                let (loss, dlogits) = cross_entropy(&fwd.logits, &item.targets, self.hyper.loss)?;
                check_finite(loss, || {
                    format!("epoch {}, pyramid, video {}", self.epoch, videos[item.video].features.video_id)
                })?;
                Ok((pam_backward(params, &fwd, &dlogits)?, loss))
            })?;
            total += losses.iter().sum::<f64>();
            grads.scale(1.0 / batch.len() as f64);
            add_l2_grad(&self.model.params, &mut grads, self.hyper.lambda);
            optimizer_step(&mut self.model.params, &grads, &mut self.opt)?;
        }
        let stats = PamEpochStats {
            epoch: self.epoch,
            learning_rate: lr,
            loss: total / items.len() as f64,
        };
        self.epoch += 1;
        Ok(stats)
    }

    pub fn run(&mut self, videos: &[TrainingVideo]) -> Result<Vec<PamEpochStats>> {
        let mut log = Vec::new();
        while !self.is_done() {
            log.push(self.run_epoch(videos)?);
        }
        Ok(log)
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let prefix = self.model.prefix();
        let mut v = self.model.to_tensors();
        v.push(NamedTensor::scalar(format!("{prefix}.epoch"), self.epoch as f64));
        v.extend(self.opt.to_tensors(&format!("{prefix}.opt")));
        v
    }

    pub fn load_state(&mut self, store: &TensorStore) -> Result<()> {
        let prefix = self.model.prefix();
        self.model = PamModel::from_store(store, self.model.modality, self.hyper.lateral, self.hyper.activation)?;
        self.epoch = store.expect(&format!("{prefix}.epoch"), &[1])?.values[0] as usize;
        self.opt.load_tensors(&format!("{prefix}.opt"), store)
    }
}

pub fn train_pam(
    videos: &[TrainingVideo],
    hyper: &PamHyper,
    modality: Modality,
    num_classes: usize,
) -> Result<(PamModel, Vec<PamEpochStats>)> {
    ensure!(!videos.is_empty(), Validation, "no training videos");
    let dim = videos[0].features.feature_dim();
    let mut trainer = PamTrainer::new(hyper.clone(), modality, dim, num_classes)?;
    let log = trainer.run(videos)?;
    Ok((trainer.model, log))
}
