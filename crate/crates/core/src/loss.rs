//! Detection, adaptation, depth, consistency and reconstruction losses and
//! their weighted total. Every squared norm uses mean reduction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{encode_box, GridHead, ModelConfig};
use crate::scene::BoxLabel;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Smooth-L1 transition point for box regression.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss weight `{name}` must be non-negative and finite, got {value}")]
    InvalidWeight { name: &'static str, value: f64 },
    #[error("cannot resize {from:?} to {to:?}: sizes are not divisible")]
    NotDivisible { from: Vec<usize>, to: Vec<usize> },
}

/// Coefficients of the total objective. `pl` scales the pseudo-label
/// detection term and defaults to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub pl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.1, a: 10.0, b: 1.0, c: 1.0, pl: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [("lambda", self.lambda), ("a", self.a), ("b", self.b), ("c", self.c), ("pl", self.pl)] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(LossError::InvalidWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Scalar values of every term and the total, as reported per iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub det: f64,
    pub da: f64,
    pub depth: f64,
    pub cst: f64,
    pub rec: f64,
    pub det_pl: f64,
    pub total: f64,
}

impl LossBundle {
    /// Builds a bundle from component values, computing the total.
    pub fn from_components(det: f64, da: f64, depth: f64, cst: f64, rec: f64, det_pl: f64, w: &LossWeights) -> Self {
        let total = det + w.lambda * da + w.a * depth + w.b * cst + w.c * rec + w.pl * det_pl;
        Self { det, da, depth, cst, rec, det_pl, total }
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("det", self.det),
            ("da", self.da),
            ("depth", self.depth),
            ("cst", self.cst),
            ("rec", self.rec),
            ("det_pl", self.det_pl),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Per-cell training targets for the grid head.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    /// `[1, 1, G, G]`, one at assigned cells.
    pub objectness: Tensor,
    /// One entry per cell, row-major.
    pub classes: Vec<Option<usize>>,
    /// `[1, 4, G, G]`: offsets shifted by 0.5 (compared with `2·σ(t)`),
    /// then log width and log height.
    pub boxes: Tensor,
    /// `[1, 4, G, G]`, one at assigned cells.
    pub mask: Tensor,
}

impl DetectionTargets {
    /// Assigns each label to the cell holding its centre; the first label
    /// claiming a cell keeps it.
    pub fn build(labels: &[BoxLabel], config: ModelConfig) -> Self {
        let g = config.grid_size();
        let plane = g * g;
        let mut objectness = Tensor::zeros([1, 1, g, g]);
        let mut classes = vec![None; plane];
        let mut boxes = Tensor::zeros([1, 4, g, g]);
        let mut mask = Tensor::zeros([1, 4, g, g]);
        for label in labels {
            let t = encode_box(&label.bbox, config);
            let cell = t.cell_y * g + t.cell_x;
            if classes[cell].is_some() {
                continue;
            }
            classes[cell] = Some(label.class_id);
            objectness.data_mut()[cell] = 1.0;
            let shifted = [t.targets[0] + 0.5, t.targets[1] + 0.5, t.targets[2], t.targets[3]];
            for (i, v) in shifted.into_iter().enumerate() {
                boxes.data_mut()[i * plane + cell] = v;
                mask.data_mut()[i * plane + cell] = 1.0;
            }
        }
        Self { objectness, classes, boxes, mask }
    }
}

/// The three detection terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub rpn: Var,
    pub cls: Var,
    pub bbox: Var,
    pub sum: Var,
}

/// Objectness BCE over all cells, class cross-entropy and box smooth-L1 on
/// assigned cells.
pub fn detection_loss(tape: &mut Tape, head: &GridHead, targets: &DetectionTargets) -> Result<DetectionLoss, LossError> {
    let rpn = tape.bce_with_logits(head.objectness, &targets.objectness)?;
    let cls = tape.cross_entropy(head.class_logits, &targets.classes)?;
    let xy = tape.narrow(head.box_deltas, 1, 0, 2)?;
    let xy = tape.sigmoid(xy);
    let xy = tape.scale(xy, 2.0);
    let wh = tape.narrow(head.box_deltas, 1, 2, 2)?;
    let pred = tape.concat(&[xy, wh], 1)?;
    let bbox = tape.smooth_l1(pred, &targets.boxes, &targets.mask, SMOOTH_L1_BETA)?;
    let sum = tape.weighted_sum(&[(rpn, 1.0), (cls, 1.0), (bbox, 1.0)])?;
    Ok(DetectionLoss { rpn, cls, bbox, sum })
}

fn batched(map: &Tensor) -> Result<Tensor, TensorError> {
    let mut shape = vec![1];
    if map.rank() == 2 {
        shape.push(1);
    }
    shape.extend_from_slice(map.shape());
    map.clone().reshape(shape)
}

fn check_same(op: &'static str, tape: &Tape, pred: Var, target: &Tensor) -> Result<(), TensorError> {
    if tape.shape(pred) != target.shape() {
        return Err(TensorError::ShapeMismatch { op, left: tape.shape(pred).to_vec(), right: target.shape().to_vec() });
    }
    Ok(())
}

/// `mean(src²) + mean((t − tgt)²)`: blank map for source, transmission for
/// target. `t_resized` is `h×w` or already batched like the predictions.
pub fn da_loss(tape: &mut Tape, src_pred: Var, tgt_pred: Var, t_resized: &Tensor) -> Result<Var, LossError> {
    let t = if t_resized.rank() == 2 { batched(t_resized)? } else { t_resized.clone() };
    check_same("da_loss target", tape, tgt_pred, &t)?;
    if tape.shape(src_pred) != tape.shape(tgt_pred) {
        return Err(TensorError::ShapeMismatch {
            op: "da_loss",
            left: tape.shape(src_pred).to_vec(),
            right: tape.shape(tgt_pred).to_vec(),
        }
        .into());
    }
    let zeros = tape.leaf(Tensor::zeros(tape.shape(src_pred).to_vec()));
    let src = tape.mse(src_pred, zeros)?;
    let t = tape.leaf(t);
    let tgt = tape.mse(t, tgt_pred)?;
    Ok(tape.weighted_sum(&[(src, 1.0), (tgt, 1.0)])?)
}

/// Mean squared error between the depth block output and the resized,
/// `d_max`-normalized ground-truth depth.
pub fn depth_loss(tape: &mut Tape, deb_out: Var, depth_target: &Tensor) -> Result<Var, LossError> {
    let t = if depth_target.rank() == 2 { batched(depth_target)? } else { depth_target.clone() };
    check_same("depth_loss", tape, deb_out, &t)?;
    let t = tape.leaf(t);
    Ok(tape.mse(deb_out, t)?)
}

/// `mean((Norm(−log t̂) − Norm(deb))²)` with `t̂` floored before the log.
pub fn consistency_loss(tape: &mut Tape, trans_pred: Var, deb_out: Var) -> Result<Var, LossError> {
    if tape.shape(trans_pred) != tape.shape(deb_out) {
        return Err(TensorError::ShapeMismatch {
            op: "consistency_loss",
            left: tape.shape(trans_pred).to_vec(),
            right: tape.shape(deb_out).to_vec(),
        }
        .into());
    }
    let log_t = tape.log(trans_pred);
    let depth_from_t = tape.scale(log_t, -1.0);
    let a = tape.minmax_normalize(depth_from_t)?;
    let b = tape.minmax_normalize(deb_out)?;
    Ok(tape.mse(a, b)?)
}

/// Mean squared error between the decoder output and the defogged (or
/// clear) target image.
pub fn reconstruction_loss(tape: &mut Tape, recon: Var, i_de: &Tensor) -> Result<Var, LossError> {
    let t = if i_de.rank() == 3 { batched(i_de)? } else { i_de.clone() };
    check_same("reconstruction_loss", tape, recon, &t)?;
    let t = tape.leaf(t);
    Ok(tape.mse(recon, t)?)
}

/// Loss terms present in one step; absent terms count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub det: Option<Var>,
    pub da: Option<Var>,
    pub depth: Option<Var>,
    pub cst: Option<Var>,
    pub rec: Option<Var>,
    pub det_pl: Option<Var>,
}

/// `det + λ·da + a·depth + b·cst + c·rec + pl·det_pl` on the tape, plus the
/// matching scalar bundle.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossBundle), LossError> {
    weights.validate()?;
    let parts = [
        (terms.det, 1.0),
        (terms.da, weights.lambda),
        (terms.depth, weights.a),
        (terms.cst, weights.b),
        (terms.rec, weights.c),
        (terms.det_pl, weights.pl),
    ];
    let present: Vec<(Var, f64)> = parts.iter().filter_map(|&(v, w)| v.map(|v| (v, w))).collect();
    let total = tape.weighted_sum(&present)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let bundle = LossBundle {
        det: val(terms.det),
        da: val(terms.da),
        depth: val(terms.depth),
        cst: val(terms.cst),
        rec: val(terms.rec),
        det_pl: val(terms.det_pl),
        total: tape.value(total).item(),
    };
    Ok((total, bundle))
}

/// Non-overlapping block average of an `H×W` map down to `out_h×out_w`.
pub fn resize_to_feature(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, LossError> {
    let s = map.shape();
    if s.len() != 2 || out_h == 0 || out_w == 0 || !s[0].is_multiple_of(out_h) || !s[1].is_multiple_of(out_w) {
        return Err(LossError::NotDivisible { from: s.to_vec(), to: vec![out_h, out_w] });
    }
    let (bh, bw) = (s[0] / out_h, s[1] / out_w);
    let n = (bh * bw) as f64;
    let d = map.data();
    Ok(Tensor::from_fn([out_h, out_w], |i| {
        let (oy, ox) = (i / out_w, i % out_w);
        let mut sum = 0.0;
        for y in oy * bh..(oy + 1) * bh {
            for x in ox * bw..(ox + 1) * bw {
                sum += d[y * s[1] + x];
            }
        }
        sum / n
    }))
}
