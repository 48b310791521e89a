//! Glue between datasets on disk, training and evaluation: protocol tags,
//! the ablation rows and the pseudo-label audit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate, match_detections, EvalError, MetricsReport, CONF_FLOOR, MATCH_IOU};
use crate::eval::{PROTOCOL_DA, PROTOCOL_LOWERBOUND, PROTOCOL_UPPERBOUND};
use crate::model::ModelConfig;
use crate::scene::{BoxLabel, Dataset, DatasetError, Split};
use crate::tensor::Tensor;
use crate::train::{
    generate_pseudo_labels, train, EmaState, EvalSet, Toggles, TrainConfig, TrainData, TrainError, TrainOutcome,
    TRAINING_ADAPTED, TRAINING_SOURCE_ONLY,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Protocol(String),
}

/// Model geometry implied by a dataset.
pub fn model_config(dataset: &Dataset) -> ModelConfig {
    let r = &dataset.manifest().renderer;
    ModelConfig { in_channels: 3, image_size: r.image_size, num_classes: r.num_classes }
}

/// Loads both training splits and precomputes every target.
pub fn load_train_data(dataset: &Dataset, config: &TrainConfig) -> Result<TrainData, ExperimentError> {
    let source = dataset.load_split(Split::TrainSource)?;
    let target = dataset.load_split(Split::TrainTarget)?;
    let d_max = dataset.manifest().renderer.depth_max;
    Ok(TrainData::prepare(model_config(dataset), &source, &target, d_max, config.oracle)?)
}

/// Input images and labels of `split`. Foggy splits yield foggy images;
/// the target training split yields its sealed labels.
pub fn eval_samples(dataset: &Dataset, split: Split) -> Result<Vec<(Tensor, Vec<BoxLabel>)>, ExperimentError> {
    dataset
        .manifest()
        .ids(split)
        .iter()
        .map(|id| {
            let s = dataset.load_sample(id)?;
            let labels = if split.labels_sealed() { dataset.load_sealed_labels(id)? } else { s.labels };
            let image = if split.uses_foggy_input() { s.foggy } else { s.clear };
            Ok((image, labels))
        })
        .collect()
}

/// Protocol tag for evaluating weights trained under `training` on `split`.
pub fn resolve_protocol(training: &str, split: Split) -> Result<&'static str, ExperimentError> {
    match (training, split) {
        (TRAINING_SOURCE_ONLY, Split::TestClear) => Ok(PROTOCOL_UPPERBOUND),
        (TRAINING_SOURCE_ONLY, Split::TestTarget) => Ok(PROTOCOL_LOWERBOUND),
        (TRAINING_ADAPTED, Split::TestTarget) => Ok(PROTOCOL_DA),
        _ => Err(ExperimentError::Protocol(format!(
            "no evaluation protocol for `{training}` weights on split `{}`",
            split.name()
        ))),
    }
}

/// The five ablation rows, in table order.
pub const ABLATION_ROWS: [(&str, Toggles); 5] = [
    ("da", Toggles { da: true, deb: false, cst: false, rec: false, pl: false }),
    ("da+deb", Toggles { da: true, deb: true, cst: false, rec: false, pl: false }),
    ("da+deb+cst", Toggles { da: true, deb: true, cst: true, rec: false, pl: false }),
    ("da+deb+cst+rec", Toggles { da: true, deb: true, cst: true, rec: true, pl: false }),
    ("da+deb+cst+rec+pl", Toggles::full()),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
    pub seeds: Vec<SeedResult>,
    /// Mean over seeds that finished; absent when none did.
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub split: Split,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Trains `config` and scores the final student on `split`.
pub fn train_and_evaluate(
    dataset: &Dataset,
    data: &TrainData,
    config: &TrainConfig,
    split: Split,
    protocol: &str,
    run_dir: Option<&Path>,
) -> Result<(TrainOutcome, MetricsReport), ExperimentError> {
    let samples = eval_samples(dataset, split)?;
    let eval_set = EvalSet { protocol: protocol.to_string(), samples };
    let outcome = train(config, data, Some(&eval_set), run_dir)?;
    let report = evaluate(&outcome.params, &eval_set.samples, CONF_FLOOR, protocol)?;
    if let Some(dir) = run_dir {
        report.write(&dir.join("metrics.json"))?;
    }
    Ok((outcome, report))
}

/// Runs every ablation row for every seed on the foggy test split. Failed
/// runs are recorded and skipped.
pub fn run_ablation(
    dataset: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblationTable, ExperimentError> {
    let data = load_train_data(dataset, base)?;
    let mut rows = Vec::new();
    for (name, toggles) in ABLATION_ROWS {
        let mut results = Vec::new();
        for &seed in seeds {
            let config = TrainConfig { toggles, seed, ..base.clone() };
            let run_dir = out_dir.map(|d| d.join(format!("{name}/seed_{seed}")));
            if let Some(d) = &run_dir {
                std::fs::create_dir_all(d).map_err(|e| DatasetError::io(d, e))?;
            }
            let protocol = format!("ablation:{name}");
            let r = train_and_evaluate(dataset, &data, &config, Split::TestTarget, &protocol, run_dir.as_deref());
            log::info!("ablation row {name} seed {seed}: {:?}", r.as_ref().map(|(_, m)| m.map));
            results.push(match r {
                Ok((_, m)) => SeedResult { seed, map: Some(m.map), error: None },
                Err(e) => SeedResult { seed, map: None, error: Some(e.to_string()) },
            });
        }
        let done: Vec<f64> = results.iter().filter_map(|r| r.map).collect();
        let mean = (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64);
        rows.push(AblationRow { name: name.to_string(), toggles, seeds: results, mean });
    }
    Ok(AblationTable { split: Split::TestTarget, seeds: seeds.to_vec(), rows })
}

/// Pseudo-label counts against sealed labels at one threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelAudit {
    pub tau: f64,
    pub n_pseudo_labels: usize,
    pub true_positives: usize,
}

impl PseudoLabelAudit {
    /// Fraction of pseudo-labels matching a sealed label; 1 when there are
    /// none, the vacuous case.
    pub fn precision(&self) -> f64 {
        if self.n_pseudo_labels == 0 {
            1.0
        } else {
            self.true_positives as f64 / self.n_pseudo_labels as f64
        }
    }
}

/// Generates pseudo-labels on every `(defogged input, sealed labels)` pair
/// and matches them at IoU 0.5.
pub fn audit_pseudo_labels(ema: &EmaState, samples: &[(Tensor, Vec<BoxLabel>)], tau: f64) -> Result<PseudoLabelAudit, ExperimentError> {
    let (mut n, mut tp) = (0, 0);
    for (input, sealed) in samples {
        let set = generate_pseudo_labels(ema, input, tau).map_err(TrainError::from)?;
        n += set.len();
        tp += match_detections(&set.detections, sealed, MATCH_IOU).into_iter().filter(|&f| f).count();
    }
    Ok(PseudoLabelAudit { tau, n_pseudo_labels: n, true_positives: tp })
}

/// Mean mAP by row name, for quick comparisons.
pub fn row_means(table: &AblationTable) -> BTreeMap<String, Option<f64>> {
    table.rows.iter().map(|r| (r.name.clone(), r.mean)).collect()
}
