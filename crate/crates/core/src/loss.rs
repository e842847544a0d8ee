//! Order and distance losses on batches of slice scores, each with an
//! analytic gradient with respect to the scores.

use serde::{Deserialize, Serialize};

use crate::error::{BpregError, Result};

/// Scores of B training items with m slices each, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBatch {
    pub scores: Vec<f64>,
    pub m: usize,
    /// Physical slice gap per item in mm.
    pub delta_h: Vec<f64>,
}

impl ScoreBatch {
    pub fn new(scores: Vec<f64>, m: usize, delta_h: Vec<f64>) -> Result<Self> {
        if m < 2 {
            return Err(BpregError::Contract(format!("m = {m}, need at least 2 slices per item")));
        }
        if scores.len() != m * delta_h.len() {
            return Err(BpregError::Contract(format!(
                "{} scores do not form {} items of {m}",
                scores.len(),
                delta_h.len()
            )));
        }
        Ok(ScoreBatch { scores, m, delta_h })
    }

    pub fn items(&self) -> usize {
        self.delta_h.len()
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.m + j]
    }

    fn diff(&self, i: usize, j: usize) -> f64 {
        self.at(i, j + 1) - self.at(i, j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Heuristic,
    Classification,
    /// No order term; only the distance loss is optimized.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// dL/ds in the layout of `ScoreBatch::scores`.
    pub grad: Vec<f64>,
    /// Set when the classification loss had no usable term.
    pub empty_warning: bool,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Accumulates dL/dΔs_ij into the score gradient.
fn push_diff_grad(grad: &mut [f64], m: usize, i: usize, j: usize, g: f64) {
    grad[i * m + j + 1] += g;
    grad[i * m + j] -= g;
}

pub fn heuristic_order_loss(batch: &ScoreBatch, beta: f64) -> LossValue {
    let m = batch.m;
    let n = (batch.items() * (m - 1)) as f64;
    let mut grad = vec![0.0; batch.scores.len()];
    let mut value = 0.0;
    for i in 0..batch.items() {
        let target = sigmoid(beta * batch.delta_h[i]);
        for j in 0..m - 1 {
            let p = sigmoid(batch.diff(i, j));
            let r = p - target;
            value += r * r;
            push_diff_grad(&mut grad, m, i, j, 2.0 * r * p * (1.0 - p) / n);
        }
    }
    LossValue {
        value: value / n,
        grad,
        empty_warning: false,
    }
}

/// Mean of -ln σ(Δs) over all terms whose σ(Δs) is representable (nonzero).
pub fn classification_order_loss(batch: &ScoreBatch) -> LossValue {
    let m = batch.m;
    let mut grad = vec![0.0; batch.scores.len()];
    let mut included = Vec::new();
    let mut value = 0.0;
    for i in 0..batch.items() {
        for j in 0..m - 1 {
            let d = batch.diff(i, j);
            if sigmoid(d) == 0.0 {
                continue;
            }
            value += softplus(-d);
            included.push((i, j, d));
        }
    }
    if included.is_empty() {
        return LossValue {
            value: 0.0,
            grad,
            empty_warning: true,
        };
    }
    let n = included.len() as f64;
    for (i, j, d) in included {
        push_diff_grad(&mut grad, m, i, j, -sigmoid(-d) / n);
    }
    LossValue {
        value: value / n,
        grad,
        empty_warning: false,
    }
}

/// Smooth L1 on second differences of the scores, averaged over B(m-2) terms.
pub fn distance_loss(batch: &ScoreBatch) -> Result<LossValue> {
    let m = batch.m;
    if m < 3 {
        return Err(BpregError::Contract(format!("distance loss needs m >= 3, got {m}")));
    }
    let n = (batch.items() * (m - 2)) as f64;
    let mut grad = vec![0.0; batch.scores.len()];
    let mut value = 0.0;
    for i in 0..batch.items() {
        for j in 0..m - 2 {
            let x = batch.diff(i, j + 1) - batch.diff(i, j);
            value += smooth_l1(x);
            let g = smooth_l1_grad(x) / n;
            push_diff_grad(&mut grad, m, i, j + 1, g);
            push_diff_grad(&mut grad, m, i, j, -g);
        }
    }
    Ok(LossValue {
        value: value / n,
        grad,
        empty_warning: false,
    })
}

pub fn combined_loss(batch: &ScoreBatch, kind: LossKind, alpha: f64, beta: f64) -> Result<LossValue> {
    if !(alpha >= 0.0) {
        return Err(BpregError::Contract(format!("alpha = {alpha} must be >= 0")));
    }
    if alpha > 0.0 && batch.m < 3 {
        return Err(BpregError::Contract(format!(
            "alpha > 0 needs m >= 3 for the distance term, got m = {}",
            batch.m
        )));
    }
    let mut out = match kind {
        LossKind::Heuristic => heuristic_order_loss(batch, beta),
        LossKind::Classification => classification_order_loss(batch),
        LossKind::None => LossValue {
            value: 0.0,
            grad: vec![0.0; batch.scores.len()],
            empty_warning: false,
        },
    };
    if alpha > 0.0 {
        let d = distance_loss(batch)?;
        out.value += alpha * d.value;
        for (g, dg) in out.grad.iter_mut().zip(d.grad) {
            *g += alpha * dg;
        }
    }
    Ok(out)
}
