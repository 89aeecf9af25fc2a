//! Cascaded classification module.
//!
//! Two structurally identical classifiers (two 3-tap convs with ReLU, global
//! average pooling, bias-free dense layer). Stage A sees the sampled features;
//! stage B sees them with the units stage A found discriminative zeroed out.
//! Each stage yields a temporal class activation sequence `M_t^c = w^c . Z_t`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, SamplerConfig, TrainingVideo};
use crate::error::{ensure, Error, Result};
use crate::nn::{
    add_l2_grad, cross_entropy, global_avg_pool, global_avg_pool_backward, optimizer_step, relu, relu_backward,
    Conv1d, Dense, FeatureMap, LossForm, LrSchedule, OptimizerState, Parameters, TensorStore,
};
use crate::nn::checkpoint::NamedTensor;
use crate::signal::normalize_columns;
use crate::train::{check_finite, epoch_rng, stream_id, summed_gradients};

pub const KERNEL_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
    Cascaded,
}

/// One classifier stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CcmStageParams {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub dense: Dense,
}

impl CcmStageParams {
    pub fn zeros(input_dim: usize, width: usize, num_classes: usize) -> Self {
        Self {
            conv1: Conv1d::zeros(width, input_dim, KERNEL_SIZE, 1),
            conv2: Conv1d::zeros(width, width, KERNEL_SIZE, 1),
            dense: Dense::zeros(width, num_classes),
        }
    }

    pub fn xavier<R: Rng + ?Sized>(rng: &mut R, input_dim: usize, width: usize, num_classes: usize) -> Self {
        Self {
            conv1: Conv1d::xavier(rng, width, input_dim, KERNEL_SIZE, 1),
            conv2: Conv1d::xavier(rng, width, width, KERNEL_SIZE, 1),
            dense: Dense::xavier(rng, width, num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.dense.outputs
    }

    pub fn input_dim(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn width(&self) -> usize {
        self.conv1.out_channels
    }
}

impl Parameters for CcmStageParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.conv1.slices();
        v.extend(self.conv2.slices());
        v.extend(self.dense.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.conv1.slices_mut();
        v.extend(self.conv2.slices_mut());
        v.extend(self.dense.slices_mut());
        v
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            dense: self.dense.zeros_like(),
        }
    }

    fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut v = self.conv1.to_tensors(&format!("{prefix}.conv1"));
        v.extend(self.conv2.to_tensors(&format!("{prefix}.conv2")));
        v.extend(self.dense.to_tensors(&format!("{prefix}.dense")));
        v
    }

    fn load_tensors(&mut self, prefix: &str, store: &TensorStore) -> Result<()> {
        self.conv1.load_tensors(&format!("{prefix}.conv1"), store)?;
        self.conv2.load_tensors(&format!("{prefix}.conv2"), store)?;
        self.dense.load_tensors(&format!("{prefix}.dense"), store)
    }
}

/// Forward record of one stage, kept for backprop.
#[derive(Debug, Clone)]
pub struct StageForward {
    pub input: FeatureMap,
    pub hidden: FeatureMap,
    /// Output of the second conv after ReLU.
    pub z: FeatureMap,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn stage_forward(x: &FeatureMap, p: &CcmStageParams) -> Result<StageForward> {
    ensure!(
        x.len() >= KERNEL_SIZE,
        Shape,
        "stage input has {} units, needs at least {KERNEL_SIZE}",
        x.len()
    );
    let mut hidden = p.conv1.forward(x)?;
    relu(&mut hidden);
    let mut z = p.conv2.forward(&hidden)?;
    relu(&mut z);
    let pooled = global_avg_pool(&z);
    let logits = p.dense.forward(&pooled)?;
    Ok(StageForward {
        input: x.clone(),
        hidden,
        z,
        pooled,
        logits,
    })
}

/// Parameter gradients of a stage given the loss gradient at its logits.
pub fn stage_backward(p: &CcmStageParams, fwd: &StageForward, grad_logits: &[f64]) -> Result<CcmStageParams> {
    ensure!(
        fwd.z.channels() == p.width() && fwd.input.channels() == p.input_dim() && grad_logits.len() == p.num_classes(),
        Shape,
        "forward record does not match stage parameters"
    );
    let mut grads = p.zeros_like();
    let g_pooled = p.dense.backward(&fwd.pooled, grad_logits, &mut grads.dense)?;
    let mut g_z = global_avg_pool_backward(fwd.z.len(), &g_pooled);
    relu_backward(&fwd.z, &mut g_z);
    let mut g_hidden = p.conv2.backward(&fwd.hidden, &g_z, &mut grads.conv2)?;
    relu_backward(&fwd.hidden, &mut g_hidden);
    p.conv1.backward(&fwd.input, &g_hidden, &mut grads.conv1)?;
    Ok(grads)
}

/// `M_t^c = sum_k w^c(k) Z_t(k)`; the dense bias is not part of the sequence.
pub fn compute_tcas(z: &FeatureMap, dense: &Dense) -> Result<FeatureMap> {
    ensure!(
        z.channels() == dense.inputs,
        Shape,
        "feature map has {} channels, classifier expects {}",
        z.channels(),
        dense.inputs
    );
    let mut out = FeatureMap::zeros(z.len(), dense.outputs);
    for t in 0..z.len() {
        let row = out.row_mut(t);
        for (k, &zk) in z.row(t).iter().enumerate() {
            if zk == 0.0 {
                continue;
            }
            for (m, w) in row.iter_mut().zip(&dense.weight[k * dense.outputs..(k + 1) * dense.outputs]) {
                *m += w * zk;
            }
        }
    }
    Ok(out)
}

/// Temporal class activation sequence with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Tcas {
    pub values: FeatureMap,
    pub stage: Stage,
    pub modality: Modality,
    /// Original unit index of every row.
    pub indices: Vec<usize>,
}

impl Tcas {
    pub fn new(values: FeatureMap, stage: Stage, modality: Modality, indices: Vec<usize>) -> Result<Self> {
        ensure!(values.len() == indices.len(), Shape, "T-CAS length {} != index map length {}", values.len(), indices.len());
        Ok(Self {
            values,
            stage,
            modality,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Per-class min-max normalization over time.
    pub fn normalized(&self) -> Tcas {
        Tcas {
            values: normalize_columns(&self.values),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EraseMask {
    len: usize,
    classes: usize,
    bits: Vec<bool>,
    pub zeta: f64,
}

impl EraseMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, t: usize, c: usize) -> bool {
        self.bits[t * self.classes + c]
    }

    /// True when any class marks unit `t`.
    pub fn fires(&self, t: usize) -> bool {
        self.bits[t * self.classes..(t + 1) * self.classes].iter().any(|&b| b)
    }

    pub fn erased_units(&self) -> Vec<usize> {
        (0..self.len).filter(|&t| self.fires(t)).collect()
    }

    /// `self` marks a subset of `other`'s cells.
    pub fn is_subset_of(&self, other: &EraseMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Threshold stage A's sequence for the classes in `classes`. With
/// `normalize`, each class column is min-max scaled first (a constant column
/// marks nothing).
pub fn make_mask(tcas: &FeatureMap, zeta: f64, classes: &[usize], normalize: bool) -> Result<EraseMask> {
    ensure!(zeta.is_finite(), Validation, "erase threshold must be finite");
    ensure!(
        classes.iter().all(|&c| c < tcas.channels()),
        Validation,
        "mask class outside [0, {})",
        tcas.channels()
    );
    let values = if normalize { normalize_columns(tcas) } else { tcas.clone() };
    let mut bits = vec![false; tcas.len() * tcas.channels()];
    for &c in classes {
        for t in 0..tcas.len() {
            if values.get(t, c) > zeta {
                bits[t * tcas.channels() + c] = true;
            }
        }
    }
    Ok(EraseMask {
        len: tcas.len(),
        classes: tcas.channels(),
        bits,
        zeta,
    })
}

/// Zero every unit marked by any class; all other units are copied bit for bit.
pub fn erase_features(x: &FeatureMap, mask: &EraseMask) -> Result<FeatureMap> {
    ensure!(mask.len() == x.len(), Shape, "mask length {} != feature length {}", mask.len(), x.len());
    let mut out = x.clone();
    for t in 0..x.len() {
        if mask.fires(t) {
            out.row_mut(t).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Element-wise maximum of two stage sequences. Callers pass normalized
/// sequences for the default fusion, raw ones for the raw-max variant.
pub fn cascade_fuse(a: &Tcas, b: &Tcas) -> Result<Tcas> {
    ensure!(
        a.values.len() == b.values.len() && a.values.channels() == b.values.channels(),
        Shape,
        "cannot fuse sequences of shape {}x{} and {}x{}",
        a.values.len(),
        a.values.channels(),
        b.values.len(),
        b.values.channels()
    );
    ensure!(a.modality == b.modality, Validation, "cannot fuse {} with {}", a.modality, b.modality);
    ensure!(a.indices == b.indices, Validation, "fused sequences must share the index map");
    let mut values = a.values.clone();
    for (v, &w) in values.as_mut_slice().iter_mut().zip(b.values.as_slice()) {
        *v = v.max(w);
    }
    Tcas::new(values, Stage::Cascaded, a.modality, a.indices.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CcmHyper {
    /// Erase threshold on the (normalized) stage-A sequence.
    pub zeta: f64,
    /// Weight of the squared-parameter penalty.
    pub lambda: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub momentum: f64,
    pub sampler: SamplerConfig,
    /// Conv filter count.
    pub width: usize,
    pub loss: LossForm,
    /// Normalize stage A's sequence per class before thresholding.
    pub normalize_mask: bool,
    pub seed: u64,
}

impl Default for CcmHyper {
    fn default() -> Self {
        Self {
            zeta: 0.4,
            lambda: 0.0025,
            schedule: LrSchedule::default(),
            batch_size: 16,
            momentum: 0.0,
            sampler: SamplerConfig::default(),
            width: 512,
            loss: LossForm::FullBce,
            normalize_mask: true,
            seed: 0,
        }
    }
}

impl CcmHyper {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.zeta > 0.0 && self.zeta < 1.0, Validation, "zeta must lie in (0, 1), got {}", self.zeta);
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), Validation, "lambda must be >= 0");
        ensure!(self.batch_size >= 1, Validation, "batch size must be >= 1");
        ensure!(self.width >= 1, Validation, "width must be >= 1");
        self.schedule.validate()?;
        self.sampler.validate()
    }
}

/// Trained (or in-training) pair of stages for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct CcmModel {
    pub modality: Modality,
    pub stage_a: CcmStageParams,
    pub stage_b: CcmStageParams,
}

/// Stage outputs for one video at inference.
#[derive(Debug, Clone)]
pub struct CcmOutput {
    pub tcas: Tcas,
    pub logits: Vec<f64>,
}

impl CcmModel {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, modality: Modality, input_dim: usize, width: usize, num_classes: usize) -> Self {
        let stage_a = CcmStageParams::xavier(rng, input_dim, width, num_classes);
        let stage_b = CcmStageParams::xavier(rng, input_dim, width, num_classes);
        Self {
            modality,
            stage_a,
            stage_b,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.stage_a.num_classes()
    }

    pub fn prefix(&self) -> String {
        format!("{}.ccm", self.modality)
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut v = self.stage_a.to_tensors(&format!("{}.stageA", self.prefix()));
        v.extend(self.stage_b.to_tensors(&format!("{}.stageB", self.prefix())));
        v
    }

    /// Restore from a checkpoint; shapes are taken from the stored tensors.
    pub fn from_store(store: &TensorStore, modality: Modality) -> Result<Self> {
        let prefix = format!("{modality}.ccm");
        let w1 = store
            .get(&format!("{prefix}.stageA.conv1.weight"))
            .ok_or_else(|| Error::Format(format!("checkpoint has no {modality} cascade model")))?;
        ensure!(w1.dims.len() == 3, Shape, "conv weight must be rank 3");
        let (width, input_dim) = (w1.dims[0], w1.dims[1]);
        let dense = store
            .get(&format!("{prefix}.stageA.dense.weight"))
            .ok_or_else(|| Error::Format("missing stage A dense weight".into()))?;
        ensure!(dense.dims.len() == 2, Shape, "dense weight must be rank 2");
        let classes = dense.dims[1];
        let mut model = Self {
            modality,
            stage_a: CcmStageParams::zeros(input_dim, width, classes),
            stage_b: CcmStageParams::zeros(input_dim, width, classes),
        };
        model.stage_a.load_tensors(&format!("{prefix}.stageA"), store)?;
        model.stage_b.load_tensors(&format!("{prefix}.stageB"), store)?;
        Ok(model)
    }

    pub fn infer_stage_a(&self, x: &FeatureMap, indices: &[usize]) -> Result<CcmOutput> {
        let fwd = stage_forward(x, &self.stage_a)?;
        let tcas = compute_tcas(&fwd.z, &self.stage_a.dense)?;
        Ok(CcmOutput {
            tcas: Tcas::new(tcas, Stage::A, self.modality, indices.to_vec())?,
            logits: fwd.logits,
        })
    }

    /// Erase what stage A found for `classes` and run stage B on the rest.
    pub fn infer_stage_b(
        &self,
        x: &FeatureMap,
        stage_a: &Tcas,
        classes: &[usize],
        zeta: f64,
        normalize_mask: bool,
    ) -> Result<CcmOutput> {
        let mask = make_mask(&stage_a.values, zeta, classes, normalize_mask)?;
        let erased = erase_features(x, &mask)?;
        let fwd = stage_forward(&erased, &self.stage_b)?;
        let tcas = compute_tcas(&fwd.z, &self.stage_b.dense)?;
        Ok(CcmOutput {
            tcas: Tcas::new(tcas, Stage::B, self.modality, stage_a.indices.clone())?,
            logits: fwd.logits,
        })
    }
}

/// Mean per-video cross-entropy of each stage over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CcmEpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss_a: f64,
    pub loss_b: f64,
}

/// Epoch-by-epoch trainer. Stage B can be switched off; stage A's trajectory
/// does not depend on it either way.
#[derive(Debug, Clone)]
pub struct CcmTrainer {
    pub model: CcmModel,
    pub hyper: CcmHyper,
    pub train_stage_b: bool,
    opt_a: OptimizerState,
    opt_b: OptimizerState,
    epoch: usize,
}

struct StepItem {
    features: FeatureMap,
    targets: Vec<f64>,
    labels: Vec<usize>,
    video: usize,
}

impl CcmTrainer {
    pub fn new(hyper: CcmHyper, modality: Modality, input_dim: usize, num_classes: usize) -> Result<Self> {
        hyper.validate()?;
        let mut rng = epoch_rng(hyper.seed, stream_id(&format!("{modality}.ccm.init")), 0);
        let model = CcmModel::new(&mut rng, modality, input_dim, hyper.width, num_classes);
        let lr = hyper.schedule.lr_at(0);
        Ok(Self {
            opt_a: OptimizerState::new(lr, hyper.momentum)?,
            opt_b: OptimizerState::new(lr, hyper.momentum)?,
            model,
            hyper,
            train_stage_b: true,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.hyper.schedule.total_epochs()
    }

    /// One pass over `videos` in a freshly shuffled order.
    pub fn run_epoch(&mut self, videos: &[TrainingVideo]) -> Result<CcmEpochStats> {
        ensure!(!videos.is_empty(), Validation, "no training videos");
        let modality = self.model.modality;
        let num_classes = self.model.num_classes();
        let mut rng = epoch_rng(self.hyper.seed, stream_id(&format!("{modality}.ccm.data")), self.epoch);
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut rng);

        let lr = self.hyper.schedule.lr_at(self.epoch);
        self.opt_a.learning_rate = lr;
        self.opt_b.learning_rate = lr;

        let (mut sum_a, mut sum_b) = (0.0, 0.0);
        for batch in order.chunks(self.hyper.batch_size) {
            // sampling stays sequential so the draw order is fixed
            let mut items = Vec::with_capacity(batch.len());
            for &v in batch {
                let video = &videos[v];
                ensure!(!video.labels.is_empty(), Validation, "video {} has no labels", video.features.video_id);
                let full = video.features.to_map(modality);
                let mut sampled = self.hyper.sampler.sample(&full, &mut rng)?;
                if sampled.features.len() < KERNEL_SIZE {
                    sampled = crate::data::Sampled::full(&full);
                }
                items.push(StepItem {
                    features: sampled.features,
                    targets: video.labels.targets(num_classes),
                    labels: video.labels.iter().collect(),
                    video: v,
                });
            }
            let (grads_a, losses_a) = summed_gradients(&items, &self.model.stage_a, |item| {
                let fwd = stage_forward(&item.features, &self.model.stage_a)?;
                let (loss, dlogits) = cross_entropy(&fwd.logits, &item.targets, self.hyper.loss)?;
                check_finite(loss, || {
                    format!("epoch {}, stage A, video {}", self.epoch, videos[item.video].features.video_id)
                })?;
                Ok((stage_backward(&self.model.stage_a, &fwd, &dlogits)?, (loss, fwd)))
            })?;
            let n = items.len() as f64;
            sum_a += losses_a.iter().map(|l| l.0).sum::<f64>();

            if self.train_stage_b {
                let stage_a = &self.model.stage_a;
                let erased: Vec<StepItem> = items
                    .iter()
                    .zip(&losses_a)
                    .map(|(item, (_, fwd))| {
                        let tcas = compute_tcas(&fwd.z, &stage_a.dense)?;
                        let mask = make_mask(&tcas, self.hyper.zeta, &item.labels, self.hyper.normalize_mask)?;
                        Ok(StepItem {
                            features: erase_features(&item.features, &mask)?,
                            targets: item.targets.clone(),
                            labels: item.labels.clone(),
                            video: item.video,
                        })
                    })
                    .collect::<Result<_>>()?;
                let (grads_b, losses_b) = summed_gradients(&erased, &self.model.stage_b, |item| {
                    let fwd = stage_forward(&item.features, &self.model.stage_b)?;
                    let (loss, dlogits) = cross_entropy(&fwd.logits, &item.targets, self.hyper.loss)?;
                    check_finite(loss, || {
                        format!("epoch {}, stage B, video {}", self.epoch, videos[item.video].features.video_id)
                    })?;
                    Ok((stage_backward(&self.model.stage_b, &fwd, &dlogits)?, loss))
                })?;
                sum_b += losses_b.iter().sum::<f64>();
                apply(&mut self.model.stage_b, grads_b, n, self.hyper.lambda, &mut self.opt_b)?;
            }
            apply(&mut self.model.stage_a, grads_a, n, self.hyper.lambda, &mut self.opt_a)?;
        }
        let stats = CcmEpochStats {
            epoch: self.epoch,
            learning_rate: lr,
            loss_a: sum_a / videos.len() as f64,
            loss_b: if self.train_stage_b { sum_b / videos.len() as f64 } else { f64::NAN },
        };
        self.epoch += 1;
        Ok(stats)
    }

    pub fn run(&mut self, videos: &[TrainingVideo]) -> Result<Vec<CcmEpochStats>> {
        let mut log = Vec::new();
        while !self.is_done() {
            log.push(self.run_epoch(videos)?);
        }
        Ok(log)
    }

    /// Model parameters plus optimizer state and epoch counter.
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let prefix = self.model.prefix();
        let mut v = self.model.to_tensors();
        v.push(NamedTensor::scalar(format!("{prefix}.epoch"), self.epoch as f64));
        v.extend(self.opt_a.to_tensors(&format!("{prefix}.optA")));
        v.extend(self.opt_b.to_tensors(&format!("{prefix}.optB")));
        v
    }

    pub fn load_state(&mut self, store: &TensorStore) -> Result<()> {
        let prefix = self.model.prefix();
        self.model = CcmModel::from_store(store, self.model.modality)?;
        self.epoch = store.expect(&format!("{prefix}.epoch"), &[1])?.values[0] as usize;
        self.opt_a.load_tensors(&format!("{prefix}.optA"), store)?;
        self.opt_b.load_tensors(&format!("{prefix}.optB"), store)
    }
}

fn apply(params: &mut CcmStageParams, mut grads: CcmStageParams, n: f64, lambda: f64, opt: &mut OptimizerState) -> Result<()> {
    grads.scale(1.0 / n);
    add_l2_grad(params, &mut grads, lambda);
    optimizer_step(params, &grads, opt)
}

/// Train both stages on weakly labelled videos.
pub fn train_ccm(
    videos: &[TrainingVideo],
    hyper: &CcmHyper,
    modality: Modality,
    num_classes: usize,
) -> Result<(CcmModel, Vec<CcmEpochStats>)> {
    ensure!(!videos.is_empty(), Validation, "no training videos");
    let dim = videos[0].features.feature_dim();
    let mut trainer = CcmTrainer::new(hyper.clone(), modality, dim, num_classes)?;
    let log = trainer.run(videos)?;
    Ok((trainer.model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> FeatureMap {
        FeatureMap::from_column(v).unwrap()
    }

    #[test]
    fn tcas_hand_dot_product() {
        let mut dense = Dense::zeros(2, 1);
        dense.weight = vec![1.0, -1.0];
        let z = FeatureMap::from_rows(&[vec![2.0, 0.5], vec![2.0, 0.5]]).unwrap();
        assert_eq!(compute_tcas(&z, &dense).unwrap().into_vec(), vec![1.5, 1.5]);
        let zero = Dense::zeros(2, 3);
        assert!(compute_tcas(&z, &zero).unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(compute_tcas(&z, &Dense::zeros(3, 1)).is_err());
    }

    #[test]
    fn mask_examples() {
        let m = make_mask(&col(&[0.1, 0.5, 0.9]), 0.4, &[0], false).unwrap();
        assert_eq!(m.erased_units(), vec![1, 2]);
        let m = make_mask(&col(&[2.0, 4.0, 6.0]), 0.4, &[0], true).unwrap();
        assert_eq!(m.erased_units(), vec![1, 2]);
        let m = make_mask(&col(&[2.0, 4.0, 6.0]), 1.0, &[0], true).unwrap();
        assert!(m.erased_units().is_empty());
        let m = make_mask(&col(&[3.0, 3.0, 3.0]), 0.4, &[0], true).unwrap();
        assert!(m.erased_units().is_empty());
    }

    #[test]
    fn mask_ignores_other_classes() {
        let tcas = FeatureMap::from_rows(&[vec![0.0, 9.0], vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let m = make_mask(&tcas, 0.4, &[0], true).unwrap();
        assert_eq!(m.erased_units(), vec![1]);
        assert!(make_mask(&tcas, 0.4, &[2], true).is_err());
    }

    #[test]
    fn erase_examples() {
        let x = FeatureMap::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let none = make_mask(&col(&[0.0, 0.0, 0.0]), 0.4, &[0], true).unwrap();
        assert_eq!(erase_features(&x, &none).unwrap(), x);
        let all = make_mask(&col(&[1.0, 1.0, 1.0]), 0.4, &[0], false).unwrap();
        assert!(erase_features(&x, &all).unwrap().as_slice().iter().all(|&v| v == 0.0));
        let mid = make_mask(&col(&[0.0, 1.0, 0.0]), 0.4, &[0], false).unwrap();
        let e = erase_features(&x, &mid).unwrap();
        assert_eq!(e.as_slice(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
        assert!(erase_features(&x, &make_mask(&col(&[1.0]), 0.4, &[0], false).unwrap()).is_err());
    }

    fn tcas(v: &[f64]) -> Tcas {
        Tcas::new(col(v), Stage::A, Modality::Rgb, (0..v.len()).collect()).unwrap()
    }

    #[test]
    fn fuse_examples() {
        let f = cascade_fuse(&tcas(&[0.2, 0.8]), &tcas(&[0.5, 0.1])).unwrap();
        assert_eq!(f.values.as_slice(), &[0.5, 0.8]);
        assert_eq!(f.stage, Stage::Cascaded);
        let a = tcas(&[0.3, 0.1, 0.9]);
        assert_eq!(cascade_fuse(&a, &a).unwrap().values, a.values);
        assert!(cascade_fuse(&a, &tcas(&[0.1])).is_err());
        let mut flow = a.clone();
        flow.modality = Modality::Flow;
        assert!(cascade_fuse(&a, &flow).is_err());
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = CcmStageParams::xavier(&mut rng, 4, 8, 3);
        let fwd = stage_forward(&FeatureMap::zeros(6, 4), &p).unwrap();
        assert_eq!(fwd.logits, vec![0.0; 3]);
        assert_eq!(fwd.z.len(), 6);
        assert!(stage_forward(&FeatureMap::zeros(2, 4), &p).is_err());
        // zero classifier, zero lambda: per-label loss is ln 2
        p.dense = Dense::zeros(8, 3);
        let x = FeatureMap::from_vec(5, 4, (0..20).map(|v| v as f64 * 0.1).collect()).unwrap();
        let fwd = stage_forward(&x, &p).unwrap();
        let (loss, _) = cross_entropy(&fwd.logits, &[1.0, 0.0, 1.0], LossForm::FullBce).unwrap();
        assert!((loss - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn hyper_validation() {
        assert!(CcmHyper::default().validate().is_ok());
        assert!(CcmHyper { zeta: 1.0, ..CcmHyper::default() }.validate().is_err());
        assert!(CcmHyper { lambda: -1.0, ..CcmHyper::default() }.validate().is_err());
    }
}
