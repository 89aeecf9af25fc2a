use serde::{Deserialize, Serialize};

use super::params::Parameters;
use crate::error::{ensure, Result};

/// Which terms of the multi-label cross-entropy are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `-[y log p + (1 - y) log(1 - p)]` summed over classes.
    #[default]
    FullBce,
    /// `-y log p` only. Degenerate on its own (minimized by predicting every
    /// class), kept for ablation.
    PositiveOnly,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_labels(logits: &[f64], labels: &[f64]) -> Result<()> {
    ensure!(
        logits.len() == labels.len(),
        Shape,
        "{} logits but {} labels",
        logits.len(),
        labels.len()
    );
    ensure!(
        labels.iter().all(|&y| y == 0.0 || y == 1.0),
        Validation,
        "labels must be 0 or 1, got {labels:?}"
    );
    Ok(())
}

/// Cross-entropy over all classes, computed from logits, and its gradient
/// with respect to the logits.
pub fn cross_entropy(logits: &[f64], labels: &[f64], form: LossForm) -> Result<(f64, Vec<f64>)> {
    check_labels(logits, labels)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&s, &y) in logits.iter().zip(labels) {
        match form {
            LossForm::FullBce => {
                loss += softplus(s) - s * y;
                grad.push(sigmoid(s) - y);
            }
            LossForm::PositiveOnly => {
                loss += y * softplus(-s);
                grad.push(-y * (1.0 - sigmoid(s)));
            }
        }
    }
    Ok((loss, grad))
}

/// Sum of squared parameter values.
pub fn l2_norm_sq<P: Parameters>(params: &P) -> f64 {
    params.slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum()
}

/// Cross-entropy plus `lambda * ||theta||^2`.
pub fn multilabel_loss<P: Parameters>(
    logits: &[f64],
    labels: &[f64],
    lambda: f64,
    params: &P,
    form: LossForm,
) -> Result<f64> {
    let (ce, _) = cross_entropy(logits, labels, form)?;
    Ok(ce + lambda * l2_norm_sq(params))
}

/// Add the gradient of `lambda * ||theta||^2` to `grads`.
pub fn add_l2_grad<P: Parameters>(params: &P, grads: &mut P, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for (g, p) in grads.slices_mut().into_iter().zip(params.slices()) {
        for (gi, pi) in g.iter_mut().zip(p) {
            *gi += 2.0 * lambda * pi;
        }
    }
}
