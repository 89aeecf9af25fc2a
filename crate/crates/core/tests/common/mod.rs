//! Independent oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use cpmn::ccm::{stage_backward, stage_forward, CcmStageParams};
use cpmn::interval::Interval;
use cpmn::localization::Proposal;
use cpmn::nn::{add_l2_grad, cross_entropy, l2_norm_sq, relu, FeatureMap, LossForm, Parameters};
use cpmn::pam::{pam_backward, pam_forward, PamParams};
use rand::Rng;

pub fn random_map<R: Rng>(rng: &mut R, len: usize, channels: usize) -> FeatureMap {
    let data = (0..len * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMap::from_vec(len, channels, data).unwrap()
}

pub fn random_labels<R: Rng>(rng: &mut R, classes: usize) -> Vec<f64> {
    (0..classes).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()
}

/// Nudge every parameter off its initial value. Biases start at exactly zero,
/// which can park a ReLU input on its kink where central differences see half
/// a slope.
pub fn jitter<P: Parameters, R: Rng>(rng: &mut R, params: &mut P) {
    for block in params.slices_mut() {
        for v in block.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

pub fn ccm_params<R: Rng>(rng: &mut R, dim: usize, width: usize, classes: usize) -> CcmStageParams {
    let mut p = CcmStageParams::xavier(rng, dim, width, classes);
    jitter(rng, &mut p);
    // the classifier bias is frozen at zero
    p.dense.bias.fill(0.0);
    p
}

pub fn pam_params<R: Rng>(rng: &mut R, dim: usize, width: usize, classes: usize) -> PamParams {
    let mut p = PamParams::xavier(rng, dim, width, classes);
    jitter(rng, &mut p);
    p
}

/// Distance below which a ReLU input counts as sitting on the kink.
pub const KINK_MARGIN: f64 = 1e-3;

/// True when no ReLU input of the stage lies within `KINK_MARGIN` of zero, so
/// central differences do not straddle a kink.
pub fn ccm_clear_of_kinks(p: &CcmStageParams, x: &FeatureMap) -> bool {
    let clear = |m: &FeatureMap| m.as_slice().iter().all(|v| v.abs() > KINK_MARGIN);
    let pre1 = p.conv1.forward(x).unwrap();
    let mut hidden = pre1.clone();
    relu(&mut hidden);
    clear(&pre1) && clear(&p.conv2.forward(&hidden).unwrap())
}

/// Largest relative error between analytic and central-difference gradients,
/// over parameters whose analytic gradient exceeds `1e-6` in magnitude.
pub fn max_fd_error<P: Parameters>(params: &P, analytic: &P, loss: impl Fn(&P) -> f64) -> f64 {
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let grads: Vec<f64> = analytic.slices().iter().flat_map(|s| s.iter().copied()).collect();
    let mut probe = params.clone();
    let mut flat = 0;
    let sizes: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
    for (block, &size) in sizes.iter().enumerate() {
        for i in 0..size {
            let g = grads[flat];
            flat += 1;
            if g.abs() <= 1e-6 {
                continue;
            }
            let orig = probe.slices()[block][i];
            probe.slices_mut()[block][i] = orig + eps;
            let up = loss(&probe);
            probe.slices_mut()[block][i] = orig - eps;
            let down = loss(&probe);
            probe.slices_mut()[block][i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((g - numeric).abs() / g.abs().max(numeric.abs()));
        }
    }
    worst
}

/// Full training objective of one CCM stage on one example.
pub fn ccm_objective(p: &CcmStageParams, x: &FeatureMap, labels: &[f64], lambda: f64) -> f64 {
    let fwd = stage_forward(x, p).unwrap();
    cross_entropy(&fwd.logits, labels, LossForm::FullBce).unwrap().0 + lambda * l2_norm_sq(p)
}

pub fn ccm_gradient(p: &CcmStageParams, x: &FeatureMap, labels: &[f64], lambda: f64) -> CcmStageParams {
    let fwd = stage_forward(x, p).unwrap();
    let (_, g) = cross_entropy(&fwd.logits, labels, LossForm::FullBce).unwrap();
    let mut grads = stage_backward(p, &fwd, &g).unwrap();
    add_l2_grad(p, &mut grads, lambda);
    grads
}

pub fn pam_objective(p: &PamParams, x: &FeatureMap, labels: &[f64], lambda: f64) -> f64 {
    let fwd = pam_forward(x, p).unwrap();
    cross_entropy(&fwd.logits, labels, LossForm::FullBce).unwrap().0 + lambda * l2_norm_sq(p)
}

pub fn pam_gradient(p: &PamParams, x: &FeatureMap, labels: &[f64], lambda: f64) -> PamParams {
    let fwd = pam_forward(x, p).unwrap();
    let (_, g) = cross_entropy(&fwd.logits, labels, LossForm::FullBce).unwrap();
    let mut grads = pam_backward(p, &fwd, &g).unwrap();
    add_l2_grad(p, &mut grads, lambda);
    grads
}

/// Every maximal run strictly above `threshold`, found by scanning all pairs.
pub fn runs_by_scan(values: &[f64], threshold: f64) -> Vec<Interval> {
    let n = values.len();
    let mut out = Vec::new();
    for s in 0..n {
        for e in s..n {
            let inside = values[s..=e].iter().all(|&v| v > threshold);
            let left_closed = s == 0 || values[s - 1] <= threshold;
            let right_closed = e + 1 == n || values[e + 1] <= threshold;
            if inside && left_closed && right_closed {
                out.push(Interval::new(s, e));
            }
        }
    }
    out
}

fn iou(a: &Interval, b: &Interval) -> f64 {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    if lo > hi {
        return 0.0;
    }
    let inter = (hi - lo + 1) as f64;
    inter / ((a.end - a.start + 1) as f64 + (b.end - b.start + 1) as f64 - inter)
}

/// Rank of each proposal: higher confidence first, then earlier start, then index.
fn ranks(props: &[Proposal]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&i, &j| {
        props[j]
            .p_conf
            .partial_cmp(&props[i].p_conf)
            .unwrap()
            .then(props[i].interval.start.cmp(&props[j].interval.start))
            .then(i.cmp(&j))
    });
    let mut rank = vec![0; props.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// The unique subset that is stable under greedy suppression, found by
/// checking all `2^n` subsets. Returned as input indices in rank order.
pub fn nms_by_subsets(props: &[Proposal], threshold: f64) -> Vec<usize> {
    let n = props.len();
    let rank = ranks(props);
    let clash = |i: usize, j: usize| props[i].class == props[j].class && iou(&props[i].interval, &props[j].interval) > threshold;
    let mut stable = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let ok = (0..n).all(|i| {
            let blocked = (0..n).any(|j| j != i && inside(j) && rank[j] < rank[i] && clash(i, j));
            inside(i) != blocked
        });
        if ok {
            stable.push(mask);
        }
    }
    assert_eq!(stable.len(), 1, "greedy suppression must have exactly one fixed point");
    let mut kept: Vec<usize> = (0..n).filter(|&i| stable[0] & (1 << i) != 0).collect();
    kept.sort_by_key(|&i| rank[i]);
    kept
}

/// Brute-force AP: rank detections, match each to its best free gt, then
/// average the best precision at or after every true positive.
pub fn brute_ap(dets: &[(usize, Interval, f64)], gts: &[Vec<Interval>], alpha: f64) -> Option<f64> {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::new();
    for (v, d, _) in &sorted {
        let mut best = None;
        let mut best_iou = -1.0;
        for (g, gt) in gts[*v].iter().enumerate() {
            let o = iou(d, gt);
            if !taken[*v][g] && o >= alpha && o > best_iou {
                best = Some(g);
                best_iou = o;
            }
        }
        if let Some(g) = best {
            taken[*v][g] = true;
        }
        tp_flags.push(best.is_some());
    }
    let precision_at = |k: usize| tp_flags[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64;
    let mut total = 0.0;
    for k in 0..sorted.len() {
        if tp_flags[k] {
            total += (k..sorted.len()).map(precision_at).fold(0.0, f64::max);
        }
    }
    Some(total / num_gt as f64)
}
