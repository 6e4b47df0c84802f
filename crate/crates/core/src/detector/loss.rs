//! Training and attack objectives on the raw grid, both evaluated from logits.

use super::RawGrid;
use crate::error::{Error, Result};
use crate::signal::GroundTruthLabel;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy of target `y` against sigmoid(`z`).
#[inline]
pub fn bce_from_logit(y: f64, z: f64) -> f64 {
    // y * softplus(-z) + (1 - y) * softplus(z)
    softplus(z) - y * z
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub noobj: f64,
    pub boxes: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            noobj: 1.0,
            boxes: 5.0,
            class: 1.0,
        }
    }
}

/// Center-cell assignment: the cell containing each label's center, keyed
/// by grid row counted from DC. When two labels share a cell the first keeps
/// it.
pub fn assign(labels: &[GroundTruthLabel], s: usize) -> Vec<Option<GroundTruthLabel>> {
    let mut cells = vec![None; s * s];
    for l in labels {
        let j = ((l.cx * s as f64) as usize).min(s - 1);
        let i = ((l.cy * s as f64) as usize).min(s - 1);
        let slot = &mut cells[i * s + j];
        if slot.is_none() {
            *slot = Some(*l);
        }
    }
    cells
}

/// Detector training objective with its gradient on the raw grid.
///
/// Assigned cells pay BCE(1, Ĉ), squared error between sigmoid box offsets and
/// their targets, and per-class BCE; every other cell pays BCE(0, Ĉ).
pub fn training_loss(raw: &RawGrid, labels: &[GroundTruthLabel], w: &LossWeights) -> Result<(f64, RawGrid)> {
    for l in labels {
        l.validate()?;
        if l.class_id >= raw.n_classes() {
            return Err(Error::Label(format!(
                "class {} with only {} classes",
                l.class_id,
                raw.n_classes()
            )));
        }
    }
    let s = raw.grid_s;
    let cells = assign(labels, s);
    let mut grad = RawGrid::zeros(s, raw.cell_len);
    let mut loss = 0.0;
    for i in 0..s {
        for j in 0..s {
            let c = raw.cell(i, j);
            let g = grad.cell_mut(i, j);
            match &cells[i * s + j] {
                None => {
                    loss += w.noobj * softplus(c[0]);
                    g[0] = w.noobj * sigmoid(c[0]);
                }
                Some(l) => {
                    loss += softplus(-c[0]);
                    g[0] = sigmoid(c[0]) - 1.0;
                    let target = [
                        l.cx * s as f64 - j as f64,
                        l.cy * s as f64 - i as f64,
                        l.w,
                        l.h,
                    ];
                    for b in 0..4 {
                        let p = sigmoid(c[1 + b]);
                        let d = p - target[b];
                        loss += w.boxes * d * d;
                        g[1 + b] = w.boxes * 2.0 * d * p * (1.0 - p);
                    }
                    for k in 0..raw.n_classes() {
                        let y = (k == l.class_id) as u8 as f64;
                        let z = c[5 + k];
                        loss += w.class * bce_from_logit(y, z);
                        g[5 + k] = w.class * (sigmoid(z) - y);
                    }
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Vanishing-attack objective over the objectness scores:
/// `sum_{i in O} BCE(1, Ĉ_i) + lambda * sum_{i not in O} BCE(0, Ĉ_i)`.
///
/// `targets` lists the cells of O; with an empty set only the second term
/// remains and minimizing it drives every Ĉ_i toward 0.
pub fn attack_loss(raw: &RawGrid, targets: &[usize], lambda: f64) -> (f64, RawGrid) {
    let mut grad = RawGrid::zeros(raw.grid_s, raw.cell_len);
    let mut in_set = vec![false; raw.n_cells()];
    for &t in targets {
        in_set[t] = true;
    }
    let mut loss = 0.0;
    for (cell, &obj) in in_set.iter().enumerate() {
        let z = raw.objectness_logit(cell);
        let idx = cell * raw.cell_len;
        if obj {
            loss += softplus(-z);
            grad.data[idx] = sigmoid(z) - 1.0;
        } else {
            loss += lambda * softplus(z);
            grad.data[idx] = lambda * sigmoid(z);
        }
    }
    (loss, grad)
}
