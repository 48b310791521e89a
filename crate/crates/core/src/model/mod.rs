//! Backbone, detection head, transmission discriminator, depth block and
//! reconstruction decoder.
//!
//! Every head reads the same backbone feature map. With the default
//! 64×64 input the backbone's four stride-2 blocks produce a 64×4×4 map.

mod checkpoint;
mod detect;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta, CHECKPOINT_MAGIC};
pub use detect::{decode_cell, decode_detections, decode_offset, encode_box, nms, BoxTarget, Detection, RawGridPrediction};

/// IoU above which NMS suppresses a same-class detection.
pub const NMS_IOU: f64 = 0.5;

pub const BACKBONE_CHANNELS: [usize; 4] = [16, 32, 64, 64];
const HEAD_CHANNELS: usize = 64;
const DISC_CHANNELS: usize = 32;
const DEB_CHANNELS: usize = 32;
const DECODER_CHANNELS: [usize; 3] = [32, 16, 16];
/// Initial objectness bias, a prior of roughly 12% positive cells.
const OBJECTNESS_PRIOR_BIAS: f64 = -2.0;

/// Input geometry and class count; everything else is fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { in_channels: 3, image_size: 64, num_classes: 3 }
    }
}

impl ModelConfig {
    /// Side of the backbone feature map.
    pub fn grid_size(&self) -> usize {
        self.image_size >> BACKBONE_CHANNELS.len()
    }

    pub fn cell_size(&self) -> f64 {
        self.image_size as f64 / self.grid_size() as f64
    }

    /// Channels of the detection output: objectness, class logits, box.
    pub fn head_outputs(&self) -> usize {
        1 + self.num_classes + 4
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

/// Slots of every layer inside the parameter store.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    backbone: Vec<Conv>,
    head: Vec<Conv>,
    discriminator: Vec<Conv>,
    deb: Vec<Conv>,
    decoder: Vec<Conv>,
}

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubNet {
    Backbone,
    DetHead,
    Discriminator,
    Deb,
    Decoder,
}

impl SubNet {
    pub fn prefix(self) -> &'static str {
        match self {
            SubNet::Backbone => "backbone",
            SubNet::DetHead => "det_head",
            SubNet::Discriminator => "discriminator",
            SubNet::Deb => "deb",
            SubNet::Decoder => "decoder",
        }
    }
}

/// All learnable weights, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(&mut self, name: String, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn([cout, cin, k, k], |_| normal.sample(&mut self.rng));
        let weight = self.store.push(format!("{name}.weight"), w);
        let bias = self.store.push(format!("{name}.bias"), Tensor::zeros([cout]));
        Conv { weight, bias, stride, pad }
    }
}

impl ModelParams {
    /// Kaiming fan-in initialization, seeded.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut b = Builder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut backbone = Vec::new();
        let mut cin = config.in_channels;
        for (i, &cout) in BACKBONE_CHANNELS.iter().enumerate() {
            backbone.push(b.conv(format!("backbone.{i}"), cin, cout, 3, 2, 1));
            cin = cout;
        }
        let feat = cin;
        let head = vec![
            b.conv("det_head.0".into(), feat, HEAD_CHANNELS, 1, 1, 0),
            b.conv("det_head.1".into(), HEAD_CHANNELS, config.head_outputs(), 1, 1, 0),
        ];
        b.store.get_mut(head[1].bias).data_mut()[0] = OBJECTNESS_PRIOR_BIAS;
        let discriminator = vec![
            b.conv("discriminator.0".into(), feat, DISC_CHANNELS, 3, 1, 1),
            b.conv("discriminator.1".into(), DISC_CHANNELS, DISC_CHANNELS, 3, 1, 1),
            b.conv("discriminator.2".into(), DISC_CHANNELS, 1, 1, 1, 0),
        ];
        let deb = vec![
            b.conv("deb.0".into(), feat, DEB_CHANNELS, 3, 1, 1),
            b.conv("deb.1".into(), DEB_CHANNELS, 1, 1, 1, 0),
        ];
        let mut decoder = Vec::new();
        let mut cin = feat;
        for (i, &cout) in DECODER_CHANNELS.iter().chain([config.in_channels].iter()).enumerate() {
            decoder.push(b.conv(format!("decoder.{i}"), cin, cout, 3, 1, 1));
            cin = cout;
        }
        let layout = Layout { backbone, head, discriminator, deb, decoder };
        Self { config, store: b.store, layout }
    }

    /// Rebuilds parameters from a store with the canonical layout.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Option<Self> {
        let template = Self::init(config, 0);
        template.store.same_layout(&store).then_some(Self { config, store, layout: template.layout })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn numel(&self) -> usize {
        self.store.numel()
    }

    /// Slots belonging to `subnet`.
    pub fn slots(&self, subnet: SubNet) -> Vec<usize> {
        let prefix = format!("{}.", subnet.prefix());
        (0..self.store.len()).filter(|&i| self.store.name(i).starts_with(&prefix)).collect()
    }

    /// Places all parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Network<'_> {
        Network { params: self, vars: self.store.register(tape) }
    }
}

/// Parameters bound to a tape, ready for forward passes.
pub struct Network<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

/// Tape handles for the detection head's three outputs.
#[derive(Clone, Copy, Debug)]
pub struct GridHead {
    /// `[1, 1, G, G]` logits.
    pub objectness: Var,
    /// `[1, K, G, G]` logits.
    pub class_logits: Var,
    /// `[1, 4, G, G]`: centre offsets (pre-sigmoid), log width, log height.
    pub box_deltas: Var,
}

impl GridHead {
    pub fn values(&self, tape: &Tape) -> RawGridPrediction {
        let strip = |v: Var| {
            let t = tape.value(v);
            let s = t.shape()[1..].to_vec();
            t.clone().reshape(s).expect("batch of one")
        };
        RawGridPrediction {
            objectness: strip(self.objectness).reshape({
                let s = tape.shape(self.objectness);
                vec![s[2], s[3]]
            })
            .expect("grid"),
            class_logits: strip(self.class_logits),
            box_deltas: strip(self.box_deltas),
        }
    }
}

impl Network<'_> {
    pub fn params(&self) -> &ModelParams {
        self.params
    }

    /// Tape handle of parameter `slot`.
    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, tape: &mut Tape, x: Var, layer: Conv) -> Result<Var, TensorError> {
        tape.conv2d(x, self.vars[layer.weight], self.vars[layer.bias], layer.stride, layer.pad)
    }

    /// Places a `[C, H, W]` image on the tape as a `[1, C, H, W]` input.
    pub fn input(&self, tape: &mut Tape, image: &Tensor) -> Result<Var, TensorError> {
        let c = self.params.config;
        let expected = [c.in_channels, c.image_size, c.image_size];
        if image.shape() != expected {
            return Err(TensorError::ShapeMismatch {
                op: "backbone input",
                left: image.shape().to_vec(),
                right: expected.to_vec(),
            });
        }
        let centered = image.map(|v| 2.0 * v - 1.0);
        Ok(tape.leaf(centered.reshape([1, expected[0], expected[1], expected[2]])?))
    }

    /// `F(I)`: four stride-2 conv+ReLU blocks.
    pub fn backbone_forward(&self, tape: &mut Tape, image: &Tensor) -> Result<Var, TensorError> {
        let mut x = self.input(tape, image)?;
        for &layer in &self.params.layout.backbone {
            let y = self.conv(tape, x, layer)?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    /// `G(F(I))`: raw grid prediction.
    pub fn det_head_forward(&self, tape: &mut Tape, feat: Var) -> Result<GridHead, TensorError> {
        let [l0, l1] = [self.params.layout.head[0], self.params.layout.head[1]];
        let h = self.conv(tape, feat, l0)?;
        let h = tape.relu(h);
        let out = self.conv(tape, h, l1)?;
        let k = self.params.config.num_classes;
        Ok(GridHead {
            objectness: tape.narrow(out, 1, 0, 1)?,
            class_logits: tape.narrow(out, 1, 1, k)?,
            box_deltas: tape.narrow(out, 1, 1 + k, 4)?,
        })
    }

    /// `D(GRL(F(I)))`: predicted transmission map in `(0, 1)`.
    pub fn discriminator_forward(&self, tape: &mut Tape, feat: Var, grl_coeff: f64) -> Result<Var, TensorError> {
        let mut x = tape.grl(feat, grl_coeff);
        let layers = &self.params.layout.discriminator;
        for (i, &layer) in layers.iter().enumerate() {
            x = self.conv(tape, x, layer)?;
            x = if i + 1 < layers.len() { tape.relu(x) } else { tape.sigmoid(x) };
        }
        Ok(x)
    }

    /// `DEB(F(I))`: non-negative depth map at feature resolution.
    pub fn deb_forward(&self, tape: &mut Tape, feat: Var) -> Result<Var, TensorError> {
        let mut x = feat;
        for &layer in &self.params.layout.deb {
            let y = self.conv(tape, x, layer)?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    /// `R(F(I))`: reconstructed image at input resolution, values in `(0, 1)`.
    pub fn decoder_forward(&self, tape: &mut Tape, feat: Var) -> Result<Var, TensorError> {
        let layers = &self.params.layout.decoder;
        let mut x = feat;
        for (i, &layer) in layers.iter().enumerate() {
            let up = tape.upsample2x(x)?;
            let y = self.conv(tape, up, layer)?;
            x = if i + 1 < layers.len() { tape.relu(y) } else { tape.sigmoid(y) };
        }
        Ok(x)
    }
}

/// Test-time detector: backbone and detection head only, on a gradient-free
/// tape.
pub fn predict(params: &ModelParams, image: &Tensor) -> Result<RawGridPrediction, TensorError> {
    let mut tape = Tape::inference();
    let net = params.bind(&mut tape);
    let feat = net.backbone_forward(&mut tape, image)?;
    let head = net.det_head_forward(&mut tape, feat)?;
    Ok(head.values(&tape))
}

/// Runs [`predict`] and decodes the grid into detections.
pub fn detect(params: &ModelParams, image: &Tensor, conf_thresh: f64, nms_iou: f64) -> Result<Vec<Detection>, TensorError> {
    let raw = predict(params, image)?;
    Ok(decode_detections(&raw, params.config(), conf_thresh, nms_iou))
}
