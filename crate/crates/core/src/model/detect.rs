use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::boxes::BBox;
use crate::tensor::Tensor;

const LOG_SIZE_LIMIT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
}

/// Head output for one image, batch axis removed.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGridPrediction {
    /// `[G, G]` logits.
    pub objectness: Tensor,
    /// `[K, G, G]` logits.
    pub class_logits: Tensor,
    /// `[4, G, G]`: offset logits x, y, then log width, log height.
    /// A centre offset decodes as `2·σ(t) − 0.5` cells, so `[0, 1]` maps to
    /// interior sigmoid values.
    pub box_deltas: Tensor,
}

/// Grid cell responsible for a box and its regression targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxTarget {
    pub cell_y: usize,
    pub cell_x: usize,
    /// Centre offsets inside the cell in `[0, 1]`, then `ln(w / cell)`, `ln(h / cell)`.
    pub targets: [f64; 4],
}

impl BoxTarget {
    /// Raw head outputs that decode exactly to this target.
    pub fn deltas(&self) -> [f64; 4] {
        let inv = |o: f64| {
            let p = 0.5 * (o + 0.5);
            (p / (1.0 - p)).ln()
        };
        [inv(self.targets[0]), inv(self.targets[1]), self.targets[2], self.targets[3]]
    }
}

/// Centre offset in cells encoded by logit `t`.
pub fn decode_offset(t: f64) -> f64 {
    2.0 * sigmoid(t) - 0.5
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Assigns `bbox` to the cell containing its centre and computes targets.
pub fn encode_box(bbox: &BBox, config: ModelConfig) -> BoxTarget {
    let g = config.grid_size();
    let s = config.cell_size();
    let (cx, cy) = bbox.center();
    let cell = |c: f64| ((c / s).floor().max(0.0) as usize).min(g - 1);
    let (gx, gy) = (cell(cx), cell(cy));
    let off = |c: f64, i: usize| c / s - i as f64;
    BoxTarget {
        cell_y: gy,
        cell_x: gx,
        targets: [off(cx, gx), off(cy, gy), (bbox.width() / s).ln(), (bbox.height() / s).ln()],
    }
}

/// Pixel box encoded by `deltas` at cell `(gy, gx)`, before clipping.
pub fn decode_cell(gy: usize, gx: usize, deltas: [f64; 4], config: ModelConfig) -> BBox {
    let s = config.cell_size();
    let cx = (gx as f64 + decode_offset(deltas[0])) * s;
    let cy = (gy as f64 + decode_offset(deltas[1])) * s;
    let w = s * deltas[2].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp();
    let h = s * deltas[3].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Decodes every cell, keeps scores `>= conf_thresh`, clips to the image
/// and applies per-class NMS. Output is score-descending.
pub fn decode_detections(raw: &RawGridPrediction, config: ModelConfig, conf_thresh: f64, nms_iou: f64) -> Vec<Detection> {
    let g = config.grid_size();
    let k = config.num_classes;
    let plane = g * g;
    let size = config.image_size as f64;
    let mut dets = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let cell = gy * g + gx;
            let obj = sigmoid(raw.objectness.data()[cell]);
            let logits: Vec<f64> = (0..k).map(|c| raw.class_logits.data()[c * plane + cell]).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            // first maximal logit wins ties
            let class_id = logits.iter().position(|&l| l == max).unwrap_or(0);
            let score = obj / denom;
            if !(score >= conf_thresh) {
                continue;
            }
            let d = |i: usize| raw.box_deltas.data()[i * plane + cell];
            let bbox = decode_cell(gy, gx, [d(0), d(1), d(2), d(3)], config).clip(size, size);
            if bbox.is_valid() {
                dets.push(Detection { class_id, bbox, score });
            }
        }
    }
    nms(dets, nms_iou)
}

/// Greedy score-descending suppression within each class: a detection is
/// dropped when its IoU with a kept one of the same class exceeds
/// `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_raw(config: ModelConfig, obj: f64) -> RawGridPrediction {
        let g = config.grid_size();
        RawGridPrediction {
            objectness: Tensor::full([g, g], obj),
            class_logits: Tensor::zeros([config.num_classes, g, g]),
            box_deltas: Tensor::zeros([4, g, g]),
        }
    }

    #[test]
    fn threshold_one_gives_nothing() {
        let c = ModelConfig::default();
        assert!(decode_detections(&empty_raw(c, 5.0), c, 1.0, 0.5).is_empty());
    }

    #[test]
    fn single_confident_cell_decodes_to_its_box() {
        let c = ModelConfig::default();
        let mut raw = empty_raw(c, -40.0);
        let target = BBox::new(8.0, 8.0, 24.0, 24.0);
        let enc = encode_box(&target, c);
        let g = c.grid_size();
        let cell = enc.cell_y * g + enc.cell_x;
        raw.objectness.data_mut()[cell] = 40.0;
        raw.class_logits.data_mut()[cell] = 40.0;
        for (i, v) in enc.deltas().iter().enumerate() {
            raw.box_deltas.data_mut()[i * g * g + cell] = *v;
        }
        let dets = decode_detections(&raw, c, 0.5, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 0);
        let b = dets[0].bbox;
        for (x, y) in [(b.x1, 8.0), (b.y1, 8.0), (b.x2, 24.0), (b.y2, 24.0)] {
            assert!((x - y).abs() < 1e-9, "{b:?}");
        }
        assert!(dets[0].score > 0.999);
    }

    #[test]
    fn nms_examples() {
        let d = |x: f64, s: f64| Detection { class_id: 0, bbox: BBox::new(x, 0.0, x + 10.0, 10.0), score: s };
        let kept = nms(vec![d(0.0, 0.8), d(0.0, 0.9)], 0.5);
        assert_eq!(kept, vec![d(0.0, 0.9)]);
        assert_eq!(nms(vec![d(0.0, 0.8), d(20.0, 0.9)], 0.5).len(), 2);
        assert!(nms(Vec::new(), 0.5).is_empty());
        // widths 10 and overlap 7.5 give IoU 75 / 125 = 0.6
        let kept = nms(vec![d(0.0, 0.9), d(2.5, 0.7)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let mut other = d(0.0, 0.7);
        other.class_id = 1;
        assert_eq!(nms(vec![d(0.0, 0.9), other], 0.5).len(), 2);
    }

    #[test]
    fn encode_assigns_centre_cell() {
        let c = ModelConfig::default();
        let t = encode_box(&BBox::new(40.0, 2.0, 60.0, 12.0), c);
        assert_eq!((t.cell_y, t.cell_x), (0, 3));
        assert!((t.targets[0] - 0.125).abs() < 1e-12);
        assert!((t.targets[2] - (20.0f64 / 16.0).ln()).abs() < 1e-12);
    }
}
