//! Two-stage mean-teacher training: pseudo-labels from the EMA model on the
//! defogged target, then one joint update of every head on the raw inputs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate, EvalError, CONF_FLOOR};
use crate::fog::dcp_defog;
use crate::loss::{
    consistency_loss, da_loss, depth_loss, detection_loss, reconstruction_loss, resize_to_feature, total_loss,
    DetectionTargets, LossBundle, LossError, LossTerms, LossWeights,
};
use crate::model::{
    decode_detections, save_checkpoint, CheckpointError, CheckpointMeta, Detection, GridHead, ModelConfig,
    ModelParams, NMS_IOU,
};
use crate::scene::{BoxLabel, SceneSample};
use crate::tensor::{sgd_step, Tape, Tensor, TensorError};

pub const TRAINING_SOURCE_ONLY: &str = "source_only";
pub const TRAINING_ADAPTED: &str = "domain_adapted";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite `{component}` loss at iteration {iteration}")]
    NonFiniteLoss { component: &'static str, iteration: u64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("training aborted at iteration {iteration} (last good state saved to {checkpoint:?}): {source}")]
    Aborted { iteration: u64, checkpoint: Option<PathBuf>, source: Box<TrainError> },
}

impl TrainError {
    /// True when the failure is numerical (non-finite loss or gradient).
    pub fn is_numerical(&self) -> bool {
        match self {
            TrainError::NonFiniteLoss { .. } | TrainError::Tensor(TensorError::NonFiniteGradient { .. }) => true,
            TrainError::Aborted { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

/// Which objective terms are active. All off trains on labeled source only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub da: bool,
    pub deb: bool,
    pub cst: bool,
    pub rec: bool,
    pub pl: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::full()
    }
}

impl Toggles {
    pub const fn full() -> Self {
        Self { da: true, deb: true, cst: true, rec: true, pl: true }
    }

    pub const fn source_only() -> Self {
        Self { da: false, deb: false, cst: false, rec: false, pl: false }
    }

    pub fn is_source_only(&self) -> bool {
        *self == Self::source_only()
    }
}

/// Replace estimated quantities on the target with rendered ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleFlags {
    /// Rendered transmission instead of the dark-channel estimate.
    pub transmission: bool,
    /// Clear target image instead of the dark-channel defogged one.
    pub clear: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr0: f64,
    /// Heavy-ball momentum; zero is plain SGD.
    pub momentum: f64,
    /// L2 penalty added to every gradient as `weight_decay · p`.
    pub weight_decay: f64,
    pub tau: f64,
    pub ema_decay: f64,
    pub pl_warmup: u64,
    pub weights: LossWeights,
    pub toggles: Toggles,
    pub oracle: OracleFlags,
    pub seed: u64,
    /// Source and target samples per iteration (each).
    pub batch_size: usize,
    pub checkpoint_every: u64,
    /// Iterations between test-set evaluations in the log; zero disables.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 6000,
            lr0: 0.002,
            momentum: 0.9,
            weight_decay: 0.0,
            tau: 0.8,
            ema_decay: 0.999,
            pl_warmup: 1000,
            weights: LossWeights::default(),
            toggles: Toggles::full(),
            oracle: OracleFlags::default(),
            seed: 0,
            batch_size: 1,
            checkpoint_every: 500,
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {} must be non-negative", self.lr0));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        self.weights.validate()?;
        Ok(())
    }

    /// Checkpoint tag describing the regime.
    pub fn training_tag(&self) -> &'static str {
        if self.toggles.is_source_only() {
            TRAINING_SOURCE_ONLY
        } else {
            TRAINING_ADAPTED
        }
    }
}

/// `lr0 · 10^(−⌊iter / (iterations/3)⌋)`.
pub fn lr_schedule(iter: u64, config: &TrainConfig) -> f64 {
    let step = (config.iterations / 3).max(1);
    config.lr0 / 10f64.powi((iter / step) as i32)
}

/// Shadow copy of the parameters updated after every step.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: ModelParams,
    pub decay: f64,
}

impl EmaState {
    pub fn new(params: &ModelParams, decay: f64) -> Self {
        Self { shadow: params.clone(), decay }
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`, elementwise.
pub fn ema_update(ema: &mut EmaState, params: &ModelParams, decay: f64) {
    let src = params.store().tensors();
    for (s, p) in ema.shadow.store_mut().tensors_mut().iter_mut().zip(src) {
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
}

/// Confident teacher detections used as labels for one target sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub detections: Vec<Detection>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn as_labels(&self) -> Vec<BoxLabel> {
        self.detections.iter().map(|d| BoxLabel { class_id: d.class_id, bbox: d.bbox }).collect()
    }
}

/// Teacher forward pass on a gradient-free tape.
pub fn teacher_forward(ema: &EmaState, input: &Tensor) -> Result<(Tape, GridHead), TensorError> {
    let mut tape = Tape::inference();
    let net = ema.shadow.bind(&mut tape);
    let feat = net.backbone_forward(&mut tape, input)?;
    let head = net.det_head_forward(&mut tape, feat)?;
    Ok((tape, head))
}

/// Teacher detections on `defogged` with score at least `tau`.
pub fn generate_pseudo_labels(ema: &EmaState, defogged: &Tensor, tau: f64) -> Result<PseudoLabelSet, TensorError> {
    let (tape, head) = teacher_forward(ema, defogged)?;
    let raw = head.values(&tape);
    let detections = decode_detections(&raw, ema.shadow.config(), tau, NMS_IOU);
    Ok(PseudoLabelSet { detections })
}

/// Labeled source sample with precomputed targets.
#[derive(Clone, Debug)]
pub struct SourceItem {
    pub image: Tensor,
    pub targets: DetectionTargets,
    /// Depth at feature resolution divided by the scene's far depth.
    pub depth: Tensor,
}

/// Unlabeled foggy target sample with its transmission and defogged image.
#[derive(Clone, Debug)]
pub struct TargetItem {
    pub image: Tensor,
    /// Transmission at feature resolution.
    pub transmission: Tensor,
    /// Reconstruction target and pseudo-label input.
    pub defogged: Tensor,
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub model: ModelConfig,
    pub source: Vec<SourceItem>,
    pub target: Vec<TargetItem>,
}

impl TrainData {
    /// Precomputes targets. Source samples are read clear, target samples
    /// foggy; `d_max` normalizes depth.
    pub fn prepare(
        model: ModelConfig,
        source: &[SceneSample],
        target: &[SceneSample],
        d_max: f64,
        oracle: OracleFlags,
    ) -> Result<Self, TrainError> {
        if source.is_empty() || target.is_empty() {
            return Err(TrainError::Config("training needs source and target samples".into()));
        }
        let g = model.grid_size();
        let source = source
            .iter()
            .map(|s| {
                let depth = resize_to_feature(&s.depth, g, g)?.map(|d| d / d_max);
                Ok(SourceItem { image: s.clear.clone(), targets: DetectionTargets::build(&s.labels, model), depth })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        let target = target
            .iter()
            .map(|s| {
                let dcp = dcp_defog(&s.foggy).map_err(|e| TrainError::Config(e.to_string()))?;
                let t_full = if oracle.transmission { s.t_gt.values().clone() } else { dcp.transmission.values().clone() };
                let defogged = if oracle.clear { s.clear.clone() } else { dcp.defogged };
                Ok(TargetItem { image: s.foggy.clone(), transmission: resize_to_feature(&t_full, g, g)?, defogged })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(Self { model, source, target })
    }
}

/// Epoch-wise shuffled index stream.
#[derive(Clone, Debug)]
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { order: (0..n).collect(), pos: n, rng }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub ema: EmaState,
    pub iteration: u64,
    velocity: Vec<Tensor>,
    source_sampler: Sampler,
    target_sampler: Sampler,
}

impl TrainState {
    pub fn new(config: &TrainConfig, data: &TrainData) -> Self {
        let params = ModelParams::init(data.model, config.seed);
        let ema = EmaState::new(&params, config.ema_decay);
        let velocity = params.store().tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            params,
            ema,
            iteration: 0,
            velocity,
            source_sampler: Sampler::new(data.source.len(), config.seed, 1),
            target_sampler: Sampler::new(data.target.len(), config.seed, 2),
        }
    }
}

/// One log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iter: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub n_pseudo_labels: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class_ap: Option<BTreeMap<String, f64>>,
}

fn mean_of(tape: &mut Tape, vars: &[crate::tensor::Var], n: usize) -> Result<Option<crate::tensor::Var>, TensorError> {
    if vars.is_empty() {
        return Ok(None);
    }
    let w = 1.0 / n as f64;
    let terms: Vec<_> = vars.iter().map(|&v| (v, w)).collect();
    tape.weighted_sum(&terms).map(Some)
}

/// Stage 1 then stage 2 on one batch of source and target samples.
pub fn train_iteration(
    state: &mut TrainState,
    source: &[&SourceItem],
    target: &[&TargetItem],
    config: &TrainConfig,
) -> Result<IterationReport, TrainError> {
    let toggles = config.toggles;
    let lr = lr_schedule(state.iteration, config);
    let iteration = state.iteration;

    // stage 1: teacher pseudo-labels on the defogged target
    let pseudo: Vec<PseudoLabelSet> = if toggles.pl && iteration >= config.pl_warmup {
        target
            .iter()
            .map(|t| generate_pseudo_labels(&state.ema, &t.defogged, config.tau))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let n_pseudo_labels = pseudo.iter().map(PseudoLabelSet::len).sum();

    // stage 2: one joint update on the raw inputs
    let model = state.params.config();
    let mut tape = Tape::new();
    let net = state.params.bind(&mut tape);
    let (mut det, mut da, mut depth, mut cst, mut rec, mut det_pl) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let n = source.len().max(target.len());
    for b in 0..n {
        let s = source[b % source.len()];
        let feat = net.backbone_forward(&mut tape, &s.image)?;
        let head = net.det_head_forward(&mut tape, feat)?;
        det.push(detection_loss(&mut tape, &head, &s.targets)?.sum);
        if toggles.deb {
            let d = net.deb_forward(&mut tape, feat)?;
            depth.push(depth_loss(&mut tape, d, &s.depth)?);
        }
        let src_trans = if toggles.da { Some(net.discriminator_forward(&mut tape, feat, 1.0)?) } else { None };

        let needs_target = toggles.da || toggles.cst || toggles.rec || !pseudo.is_empty();
        if !needs_target {
            continue;
        }
        let t = target[b % target.len()];
        let feat_t = net.backbone_forward(&mut tape, &t.image)?;
        let tgt_trans =
            if toggles.da || toggles.cst { Some(net.discriminator_forward(&mut tape, feat_t, 1.0)?) } else { None };
        if let (Some(sp), Some(tp)) = (src_trans, tgt_trans) {
            da.push(da_loss(&mut tape, sp, tp, &t.transmission)?);
        }
        if toggles.cst {
            let d = net.deb_forward(&mut tape, feat_t)?;
            cst.push(consistency_loss(&mut tape, tgt_trans.expect("computed above"), d)?);
        }
        if toggles.rec {
            let r = net.decoder_forward(&mut tape, feat_t)?;
            rec.push(reconstruction_loss(&mut tape, r, &t.defogged)?);
        }
        if let Some(p) = pseudo.get(b).filter(|p| !p.is_empty()) {
            let head_t = net.det_head_forward(&mut tape, feat_t)?;
            let targets = DetectionTargets::build(&p.as_labels(), model);
            det_pl.push(detection_loss(&mut tape, &head_t, &targets)?.sum);
        }
    }
    let terms = LossTerms {
        det: mean_of(&mut tape, &det, n)?,
        da: mean_of(&mut tape, &da, n)?,
        depth: mean_of(&mut tape, &depth, n)?,
        cst: mean_of(&mut tape, &cst, n)?,
        rec: mean_of(&mut tape, &rec, n)?,
        det_pl: mean_of(&mut tape, &det_pl, n)?,
    };
    let (total, losses) = total_loss(&mut tape, &terms, &config.weights)?;
    if let Some(component) = losses.non_finite() {
        return Err(TrainError::NonFiniteLoss { component, iteration });
    }
    let grads = tape.backward(total)?;
    let mut grads = state.params.store().collect_grads(&grads, net.vars());
    drop(tape);
    if config.weight_decay > 0.0 {
        for (g, p) in grads.iter_mut().zip(state.params.store().tensors()) {
            for (gi, &pi) in g.data_mut().iter_mut().zip(p.data()) {
                *gi += config.weight_decay * pi;
            }
        }
    }
    if config.momentum > 0.0 {
        for (v, g) in state.velocity.iter_mut().zip(grads.iter_mut()) {
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data_mut()) {
                *vi = config.momentum * *vi + *gi;
                *gi = *vi;
            }
        }
    }
    sgd_step(state.params.store_mut(), &grads, lr)?;
    ema_update(&mut state.ema, &state.params, config.ema_decay);
    state.iteration += 1;
    Ok(IterationReport { iter: iteration, lr, losses, n_pseudo_labels, map: None, per_class_ap: None })
}

/// Held-out samples scored periodically during training.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub protocol: String,
    pub samples: Vec<(Tensor, Vec<BoxLabel>)>,
}

/// Final student, teacher and per-iteration log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub ema: EmaState,
    pub log: Vec<IterationReport>,
}

pub fn checkpoint_paths(dir: &Path, iteration: u64) -> (PathBuf, PathBuf) {
    (dir.join(format!("ckpt_{iteration}.bin")), dir.join(format!("ema_{iteration}.bin")))
}

fn save_state(dir: &Path, state: &TrainState, config: &TrainConfig) -> Result<PathBuf, TrainError> {
    let (ckpt, ema) = checkpoint_paths(dir, state.iteration);
    let meta = |ema: bool| CheckpointMeta {
        iteration: state.iteration,
        ema,
        training: config.training_tag().to_string(),
        model: state.params.config(),
    };
    save_checkpoint(&ckpt, &state.params, &meta(false))?;
    if state.iteration > 0 {
        save_checkpoint(&ema, &state.ema.shadow, &meta(true))?;
    }
    Ok(ckpt)
}

/// Runs `config.iterations` steps. With `run_dir`, writes `log.jsonl` and
/// checkpoints under `checkpoints/`.
pub fn train(
    config: &TrainConfig,
    data: &TrainData,
    eval_set: Option<&EvalSet>,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut state = TrainState::new(config, data);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    let ckpt_dir = run_dir.map(|d| d.join("checkpoints"));
    let mut log_file = match run_dir {
        Some(d) => {
            let ck = ckpt_dir.as_ref().expect("set with run_dir");
            fs::create_dir_all(ck).map_err(io(ck))?;
            let p = d.join("log.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(io(&p))?), p))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(config.iterations as usize);
    if config.iterations == 0 {
        if let Some(dir) = &ckpt_dir {
            save_state(dir, &state, config)?;
        }
    }
    for _ in 0..config.iterations {
        let src: Vec<&SourceItem> =
            (0..config.batch_size).map(|_| &data.source[state.source_sampler.next()]).collect();
        let tgt: Vec<&TargetItem> =
            (0..config.batch_size).map(|_| &data.target[state.target_sampler.next()]).collect();
        let mut report = match train_iteration(&mut state, &src, &tgt, config) {
            Ok(r) => r,
            Err(e) => {
                let checkpoint = match &ckpt_dir {
                    Some(dir) => Some(save_state(dir, &state, config)?),
                    None => None,
                };
                return Err(TrainError::Aborted { iteration: state.iteration, checkpoint, source: Box::new(e) });
            }
        };
        let done = state.iteration;
        if let Some(set) = eval_set.filter(|_| config.eval_every > 0 && done.is_multiple_of(config.eval_every)) {
            let m = evaluate(&state.params, &set.samples, CONF_FLOOR, &set.protocol)?;
            report.map = Some(m.map);
            report.per_class_ap = Some(m.per_class_ap);
        }
        if let Some((w, p)) = log_file.as_mut() {
            let line = serde_json::to_string(&report).expect("report serializes");
            writeln!(w, "{line}").map_err(io(p))?;
        }
        if done.is_multiple_of(500) || done == config.iterations {
            log::info!("iter {done}: total {:.4} det {:.4} pl {}", report.losses.total, report.losses.det, report.n_pseudo_labels);
        }
        log.push(report);
        if let Some(dir) = &ckpt_dir {
            if (config.checkpoint_every > 0 && done.is_multiple_of(config.checkpoint_every)) || done == config.iterations {
                save_state(dir, &state, config)?;
            }
        }
    }
    if let Some((mut w, p)) = log_file {
        w.flush().map_err(io(&p))?;
    }
    Ok(TrainOutcome { params: state.params, ema: state.ema, log })
}
