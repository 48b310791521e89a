#![allow(dead_code)]

use fogda_core::boxes::BBox;
use fogda_core::eval::average_precision;
use fogda_core::fog::{apply_fog, dehaze_exact, normalize_map, transmission_from_depth, T_MIN};
use fogda_core::loss::{
    consistency_loss, da_loss, depth_loss, detection_loss, reconstruction_loss, total_loss, DetectionTargets,
    LossTerms, LossWeights,
};
use fogda_core::model::{decode_cell, encode_box, GridHead, ModelConfig, ModelParams};
use fogda_core::scene::BoxLabel;
use fogda_core::tensor::{Tape, Tensor, Var};
use fogda_core::train::{ema_update, EmaState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;
pub const FD_POINTS: usize = 10;
/// Denominator floor for the relative error, so that gradients that vanish
/// at a point are judged by their absolute error.
pub const FD_FLOOR: f64 = 1e-6;

type Gen = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Scalar = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct GradCase {
    pub name: &'static str,
    gen: Gen,
    f: Scalar,
    /// Analytic gradient equals this multiple of the finite difference
    /// (`-coeff` for gradient reversal, 1 otherwise).
    factor: f64,
}

#[derive(Debug)]
pub struct GradResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub coords: usize,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Uniform on `[lo, hi]` with `|v| >= gap`, to stay off kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, gap: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.random_range(lo..hi);
        if v.abs() >= gap {
            break v;
        }
    })
}

/// `mean(y ⊙ r)` for a fixed pseudo-random `r`, turning any output into a
/// scalar whose gradient exercises every output element.
fn project(tape: &mut Tape, y: Var) -> Var {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let r = tape.leaf(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, r).unwrap();
    tape.mean(p)
}

fn case(name: &'static str, gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static, f: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> GradCase {
    GradCase { name, gen: Box::new(gen), f: Box::new(f), factor: 1.0 }
}

fn head_config() -> ModelConfig {
    ModelConfig { in_channels: 3, image_size: 64, num_classes: 3 }
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<BoxLabel> {
    (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..48.0);
            let y = rng.random_range(0.0..48.0);
            let w = rng.random_range(6.0..16.0);
            let h = rng.random_range(6.0..16.0);
            BoxLabel { class_id: rng.random_range(0..3), bbox: BBox::new(x, y, x + w, y + h) }
        })
        .collect()
}

fn detection_case() -> GradCase {
    let g = head_config().grid_size();
    case(
        "detection_loss",
        move |rng| {
            vec![
                uniform(rng, &[1, 1, g, g], -2.0, 2.0),
                uniform(rng, &[1, 3, g, g], -2.0, 2.0),
                uniform(rng, &[1, 4, g, g], -1.5, 1.5),
            ]
        },
        move |tape, v| {
            // targets depend only on a fixed seed, so every evaluation sees the same labels
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let targets = DetectionTargets::build(&random_labels(&mut rng, 4), head_config());
            let head = GridHead { objectness: v[0], class_logits: v[1], box_deltas: v[2] };
            detection_loss(tape, &head, &targets).unwrap().sum
        },
    )
}

pub fn gradient_cases() -> Vec<GradCase> {
    let mut cases = vec![
        case(
            "conv2d",
            |rng| vec![uniform(rng, &[1, 2, 5, 5], -1.0, 1.0), uniform(rng, &[3, 2, 3, 3], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0)],
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
                project(tape, y)
            },
        ),
        case(
            "conv2d_strided",
            |rng| vec![uniform(rng, &[2, 2, 6, 6], -1.0, 1.0), uniform(rng, &[2, 2, 3, 3], -1.0, 1.0), uniform(rng, &[2], -1.0, 1.0)],
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
                project(tape, y)
            },
        ),
        case(
            "relu",
            |rng| vec![away_from_zero(rng, &[3, 4], -2.0, 2.0, 0.01)],
            |tape, v| {
                let y = tape.relu(v[0]);
                project(tape, y)
            },
        ),
        case(
            "sigmoid",
            |rng| vec![uniform(rng, &[3, 4], -4.0, 4.0)],
            |tape, v| {
                let y = tape.sigmoid(v[0]);
                project(tape, y)
            },
        ),
        case(
            "exp",
            |rng| vec![uniform(rng, &[3, 4], -2.0, 2.0)],
            |tape, v| {
                let y = tape.exp(v[0]);
                project(tape, y)
            },
        ),
        case(
            "log",
            |rng| vec![uniform(rng, &[3, 4], 0.2, 3.0)],
            |tape, v| {
                let y = tape.log(v[0]);
                project(tape, y)
            },
        ),
        case(
            "add",
            |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)],
            |tape, v| {
                let y = tape.add(v[0], v[1]).unwrap();
                project(tape, y)
            },
        ),
        case(
            "sub",
            |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)],
            |tape, v| {
                let y = tape.sub(v[0], v[1]).unwrap();
                project(tape, y)
            },
        ),
        case(
            "mul",
            |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)],
            |tape, v| {
                let y = tape.mul(v[0], v[1]).unwrap();
                project(tape, y)
            },
        ),
        case(
            "scale",
            |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0)],
            |tape, v| {
                let y = tape.scale(v[0], -2.5);
                project(tape, y)
            },
        ),
        case(
            "concat",
            |rng| vec![uniform(rng, &[1, 2, 3, 3], -1.0, 1.0), uniform(rng, &[1, 1, 3, 3], -1.0, 1.0)],
            |tape, v| {
                let y = tape.concat(&[v[0], v[1]], 1).unwrap();
                project(tape, y)
            },
        ),
        case(
            "narrow",
            |rng| vec![uniform(rng, &[1, 4, 3, 3], -1.0, 1.0)],
            |tape, v| {
                let y = tape.narrow(v[0], 1, 1, 2).unwrap();
                project(tape, y)
            },
        ),
        case(
            "upsample2x",
            |rng| vec![uniform(rng, &[1, 2, 3, 3], -1.0, 1.0)],
            |tape, v| {
                let y = tape.upsample2x(v[0]).unwrap();
                project(tape, y)
            },
        ),
        case(
            "avg_pool",
            |rng| vec![uniform(rng, &[1, 2, 8, 8], -1.0, 1.0)],
            |tape, v| {
                let y = tape.avg_pool(v[0], 4, 4).unwrap();
                project(tape, y)
            },
        ),
        case(
            "avg_pool_uneven",
            |rng| vec![uniform(rng, &[1, 1, 7, 5], -1.0, 1.0)],
            |tape, v| {
                let y = tape.avg_pool(v[0], 3, 2).unwrap();
                project(tape, y)
            },
        ),
        case(
            "minmax_normalize",
            |rng| vec![uniform(rng, &[1, 2, 4, 4], -1.0, 1.0)],
            |tape, v| {
                let y = tape.minmax_normalize(v[0]).unwrap();
                project(tape, y)
            },
        ),
        case(
            "mean",
            |rng| vec![uniform(rng, &[2, 5], -1.0, 1.0)],
            |tape, v| tape.mean(v[0]),
        ),
        case(
            "weighted_sum",
            |rng| vec![uniform(rng, &[1], -1.0, 1.0), uniform(rng, &[1], -1.0, 1.0)],
            |tape, v| {
                let a = tape.mean(v[0]);
                let b = tape.mean(v[1]);
                tape.weighted_sum(&[(a, 0.7), (b, -1.3)]).unwrap()
            },
        ),
        case(
            "mse",
            |rng| vec![uniform(rng, &[2, 4], -1.0, 1.0), uniform(rng, &[2, 4], -1.0, 1.0)],
            |tape, v| tape.mse(v[0], v[1]).unwrap(),
        ),
        case(
            "bce_with_logits",
            |rng| vec![uniform(rng, &[2, 4], -4.0, 4.0)],
            |tape, v| {
                let targets = Tensor::from_fn([2, 4], |i| [0.0, 1.0, 0.3, 0.8][i % 4]);
                tape.bce_with_logits(v[0], &targets).unwrap()
            },
        ),
        case(
            "cross_entropy",
            |rng| vec![uniform(rng, &[1, 3, 2, 2], -3.0, 3.0)],
            |tape, v| tape.cross_entropy(v[0], &[Some(0), None, Some(2), Some(1)]).unwrap(),
        ),
        case(
            "smooth_l1",
            |rng| {
                // differences kept clear of the ±beta transition
                let d = Tensor::from_fn([2, 4], |i| {
                    let base = [0.02, -0.05, 0.5, -0.8][i % 4];
                    base + rng.random_range(-0.005..0.005)
                });
                vec![d]
            },
            |tape, v| {
                let targets = Tensor::zeros([2, 4]);
                let mask = Tensor::from_fn([2, 4], |i| if i == 3 { 0.0 } else { 1.0 });
                tape.smooth_l1(v[0], &targets, &mask, 1.0 / 9.0).unwrap()
            },
        ),
        detection_case(),
        case(
            "da_loss",
            |rng| vec![uniform(rng, &[1, 1, 4, 4], -2.0, 2.0), uniform(rng, &[1, 1, 4, 4], -2.0, 2.0)],
            |tape, v| {
                let src = tape.sigmoid(v[0]);
                let tgt = tape.sigmoid(v[1]);
                let t = Tensor::from_fn([4, 4], |i| 0.2 + 0.05 * i as f64);
                da_loss(tape, src, tgt, &t).unwrap()
            },
        ),
        case(
            "depth_loss",
            |rng| vec![uniform(rng, &[1, 1, 4, 4], 0.0, 1.0)],
            |tape, v| {
                let d = Tensor::from_fn([4, 4], |i| (i as f64 / 16.0).sqrt());
                depth_loss(tape, v[0], &d).unwrap()
            },
        ),
        case(
            "consistency_loss",
            |rng| vec![uniform(rng, &[1, 1, 4, 4], 0.1, 0.95), uniform(rng, &[1, 1, 4, 4], 0.0, 1.0)],
            |tape, v| consistency_loss(tape, v[0], v[1]).unwrap(),
        ),
        case(
            "reconstruction_loss",
            |rng| vec![uniform(rng, &[1, 3, 4, 4], 0.0, 1.0)],
            |tape, v| {
                let target = Tensor::from_fn([3, 4, 4], |i| (i % 7) as f64 / 7.0);
                reconstruction_loss(tape, v[0], &target).unwrap()
            },
        ),
        case(
            "total_loss",
            |rng| (0..6).map(|_| uniform(rng, &[2], 0.0, 1.0)).collect(),
            |tape, v| {
                let m: Vec<Var> = v.iter().map(|&x| tape.mean(x)).collect();
                let terms = LossTerms {
                    det: Some(m[0]),
                    da: Some(m[1]),
                    depth: Some(m[2]),
                    cst: Some(m[3]),
                    rec: Some(m[4]),
                    det_pl: Some(m[5]),
                };
                total_loss(tape, &terms, &LossWeights::default()).unwrap().0
            },
        ),
    ];
    cases.push(GradCase {
        name: "grl",
        gen: Box::new(|rng| vec![uniform(rng, &[2, 3], -1.0, 1.0)]),
        f: Box::new(|tape, v| {
            let y = tape.grl(v[0], 0.5);
            project(tape, y)
        }),
        factor: -0.5,
    });
    cases
}

fn eval_scalar(case: &GradCase, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = (case.f)(&mut tape, &vars);
    tape.value(y).item()
}

/// Central differences against the tape gradient at `FD_POINTS` random
/// points, every coordinate of every input.
pub fn check_case(case: &GradCase, seed: u64) -> GradResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for _ in 0..FD_POINTS {
        let inputs = (case.gen)(&mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = (case.f)(&mut tape, &vars);
        let grads = tape.backward(y).expect("backward");
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.wrt(*var);
            for j in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[j] += FD_STEP;
                let mut minus = inputs.clone();
                minus[k].data_mut()[j] -= FD_STEP;
                let numeric = case.factor * (eval_scalar(case, &plus) - eval_scalar(case, &minus)) / (2.0 * FD_STEP);
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
                worst = worst.max(rel);
                coords += 1;
            }
        }
    }
    GradResult { name: case.name, max_rel_err: worst, coords }
}

pub fn gradient_suite() -> Vec<GradResult> {
    gradient_cases().iter().enumerate().map(|(i, c)| check_case(c, 1000 + i as u64)).collect()
}

pub struct SuiteResult {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
    pub cases: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tol
    }
}

/// `dehaze_exact(apply_fog(J))` against `J`, transmissions kept above the
/// floor.
pub fn fog_round_trip(n: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (h, w) = (rng.random_range(2..12), rng.random_range(2..12));
        let clear = uniform(&mut rng, &[3, h, w], 0.0, 1.0);
        let depth = uniform(&mut rng, &[h, w], 0.0, 30.0);
        let beta = rng.random_range(0.0..0.07);
        let airlight: Vec<f64> = (0..3).map(|_| rng.random_range(0.6..1.0)).collect();
        let t = transmission_from_depth(&depth, beta).unwrap();
        assert!(t.values().data().iter().all(|&v| v >= T_MIN));
        let foggy = apply_fog(&clear, &t, &airlight).unwrap();
        let back = dehaze_exact(&foggy, &t, &airlight).unwrap();
        worst = worst.max(back.max_abs_diff(&clear));
    }
    SuiteResult { name: "fog round trip", worst, tol: 1e-9, cases: n }
}

/// `Norm(−ln t)` does not depend on β.
pub fn beta_cancellation(n: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (h, w) = (rng.random_range(2..10), rng.random_range(2..10));
        let depth = uniform(&mut rng, &[h, w], 1.0, 60.0);
        let beta = rng.random_range(0.01..0.2);
        let t = transmission_from_depth(&depth, beta).unwrap();
        let from_t = normalize_map(&t.values().map(|v| -v.ln()));
        worst = worst.max(from_t.max_abs_diff(&normalize_map(&depth)));
    }
    SuiteResult { name: "beta cancellation", worst, tol: 1e-12, cases: n }
}

/// `Norm(a·x + b) = Norm(x)` for `a > 0`.
pub fn normalize_affine(n: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (h, w) = (rng.random_range(2..10), rng.random_range(2..10));
        let x = uniform(&mut rng, &[h, w], -5.0, 5.0);
        let a = rng.random_range(0.1..10.0);
        let b = rng.random_range(-10.0..10.0);
        let y = normalize_map(&x.map(|v| a * v + b));
        worst = worst.max(y.max_abs_diff(&normalize_map(&x)));
    }
    SuiteResult { name: "normalize affine invariance", worst, tol: 1e-12, cases: n }
}

/// Interpolated AP from scratch: for each distinct score threshold, count
/// detections at or above it; precision at a recall level is the best
/// precision of any threshold reaching at least that recall.
pub fn brute_force_ap(flags: &[bool], scores: &[f64], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pr: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&s| {
            let kept: Vec<bool> = flags.iter().zip(scores).filter(|(_, &sc)| sc >= s).map(|(&f, _)| f).collect();
            let tp = kept.iter().filter(|&&f| f).count();
            (tp as f64 / n_gt as f64, tp as f64 / kept.len() as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (i, &(r, _)) in pr.iter().enumerate() {
        if r > prev {
            let best = pr[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev) * best;
            prev = r;
        }
    }
    ap
}

/// Instances with at most 20 detections and 5 ground truths on a coarse
/// score grid, so that ties are common.
pub fn ap_oracle(n: usize, seed: u64) -> (usize, Option<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let n_gt = rng.random_range(0..=5);
        let m = rng.random_range(0..=20);
        let mut flags = vec![false; m];
        let mut tp = 0;
        for f in flags.iter_mut() {
            if tp < n_gt && rng.random_bool(0.4) {
                *f = true;
                tp += 1;
            }
        }
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(1..8) as f64 / 8.0).collect();
        let got = average_precision(&flags, &scores, n_gt);
        let want = brute_force_ap(&flags, &scores, n_gt);
        if got != want {
            return (i, Some(format!("flags {flags:?} scores {scores:?} n_gt {n_gt}: {got} vs {want}")));
        }
    }
    (n, None)
}

/// Largest corner error of decode(encode(b)) over random boxes, in pixels.
pub fn box_round_trip(n: usize, seed: u64) -> f64 {
    let config = head_config();
    let size = config.image_size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let w = rng.random_range(2.0..40.0);
        let h = rng.random_range(2.0..40.0);
        let x = rng.random_range(0.0..size - w);
        let y = rng.random_range(0.0..size - h);
        let b = BBox::new(x, y, x + w, y + h);
        let t = encode_box(&b, config);
        let d = decode_cell(t.cell_y, t.cell_x, t.deltas(), config);
        for (p, q) in [(d.x1, b.x1), (d.y1, b.y1), (d.x2, b.x2), (d.y2, b.y2)] {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

/// One EMA step against `α·s + (1 − α)·θ` computed independently, plus
/// `n` steps toward fixed weights against `α^n·s₀ + (1 − α^n)·θ`.
/// Returns the single-step mismatch count and the n-step error.
pub fn ema_closed_form(decay: f64, steps: i32) -> (usize, f64) {
    let config = ModelConfig::default();
    let student = ModelParams::init(config, 1);
    let mut ema = EmaState::new(&ModelParams::init(config, 2), decay);
    let before = ema.shadow.store().tensors().to_vec();
    ema_update(&mut ema, &student, decay);
    let mut mismatches = 0;
    for ((s0, s1), p) in before.iter().zip(ema.shadow.store().tensors()).zip(student.store().tensors()) {
        for ((&a, &b), &th) in s0.data().iter().zip(s1.data()).zip(p.data()) {
            if b != decay * a + (1.0 - decay) * th {
                mismatches += 1;
            }
        }
    }
    for _ in 1..steps {
        ema_update(&mut ema, &student, decay);
    }
    let k = decay.powi(steps);
    let mut worst = 0.0f64;
    for ((s0, s1), p) in before.iter().zip(ema.shadow.store().tensors()).zip(student.store().tensors()) {
        for ((&a, &b), &th) in s0.data().iter().zip(s1.data()).zip(p.data()) {
            worst = worst.max((b - (k * a + (1.0 - k) * th)).abs());
        }
    }
    (mismatches, worst)
}
