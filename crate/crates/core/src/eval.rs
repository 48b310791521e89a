//! Detection evaluation: greedy matching, all-point average precision and
//! mean AP at IoU 0.5.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::BBox;
use crate::model::{detect, Detection, ModelParams, NMS_IOU};
use crate::scene::{BoxLabel, CLASS_NAMES};
use crate::tensor::{Tensor, TensorError};

pub const MATCH_IOU: f64 = 0.5;
pub const CONF_FLOOR: f64 = 0.05;

pub const PROTOCOL_LOWERBOUND: &str = "lowerbound";
pub const PROTOCOL_UPPERBOUND: &str = "upperbound";
pub const PROTOCOL_DA: &str = "da";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty split")]
    EmptySplit,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// True-positive flags for `dets` (score-descending) against `gts`. Each
/// detection takes the highest-IoU unmatched ground truth of its class with
/// IoU at least `iou_thresh`; earlier ground truths win IoU ties.
pub fn match_detections(dets: &[Detection], gts: &[BoxLabel], iou_thresh: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.class_id != d.class_id {
                    continue;
                }
                let o = d.bbox.iou(&g.bbox);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the precision envelope over recall.
///
/// Detections are ranked by score; tied scores enter the curve together as
/// one operating point. Returns 0 when `n_gt` is zero.
pub fn average_precision(flags: &[bool], scores: &[f64], n_gt: usize) -> f64 {
    assert_eq!(flags.len(), scores.len(), "one score per flag");
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if flags[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = order.get(k + 1).is_none_or(|&n| scores[n] != scores[i]);
        if group_ends {
            points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for k in (0..points.len()).rev() {
        running = running.max(points[k].1);
        envelope[k] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_recall) * envelope[k];
        prev_recall = r;
    }
    ap
}

/// Per-class AP, their mean, and ground-truth counts for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub map: f64,
    /// Classes with at least one ground truth.
    pub per_class_ap: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
}

impl MetricsReport {
    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, json + "\n").map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
    }
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class_{c}"), |s| s.to_string())
}

/// Scores per-image detections against ground truth.
pub fn score_detections(
    per_image: &[(Vec<Detection>, Vec<BoxLabel>)],
    num_classes: usize,
    protocol: &str,
) -> Result<MetricsReport, EvalError> {
    if per_image.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut flags = vec![Vec::new(); num_classes];
    let mut scores = vec![Vec::new(); num_classes];
    let mut n_gt = vec![0usize; num_classes];
    for (dets, gts) in per_image {
        let mut dets = dets.clone();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        for g in gts {
            n_gt[g.class_id] += 1;
        }
        for (d, f) in dets.iter().zip(match_detections(&dets, gts, MATCH_IOU)) {
            flags[d.class_id].push(f);
            scores[d.class_id].push(d.score);
        }
    }
    let mut per_class_ap = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for c in 0..num_classes {
        counts.insert(class_name(c), n_gt[c]);
        if n_gt[c] > 0 {
            per_class_ap.insert(class_name(c), average_precision(&flags[c], &scores[c], n_gt[c]));
        }
    }
    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    Ok(MetricsReport { protocol: protocol.to_string(), map, per_class_ap, counts })
}

/// Runs the backbone and detection head over `samples` and scores the
/// result. Deterministic regardless of thread count.
pub fn evaluate(
    params: &ModelParams,
    samples: &[(Tensor, Vec<BoxLabel>)],
    conf_floor: f64,
    protocol: &str,
) -> Result<MetricsReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let per_image = samples
        .par_iter()
        .map(|(image, labels)| Ok((detect(params, image, conf_floor, NMS_IOU)?, labels.clone())))
        .collect::<Result<Vec<_>, TensorError>>()?;
    score_detections(&per_image, params.config().num_classes, protocol)
}
