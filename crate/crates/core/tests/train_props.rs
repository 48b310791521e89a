use fogda_core::model::ModelConfig;
use fogda_core::scene::{render_scene, SceneSpec};
use fogda_core::tensor::TensorError;
use fogda_core::train::{
    generate_pseudo_labels, teacher_forward, train, train_iteration, OracleFlags, Toggles, TrainConfig, TrainData,
    TrainState,
};

fn data() -> TrainData {
    let spec = SceneSpec::default();
    let source: Vec<_> = (0..6).map(|i| render_scene(&spec, 100 + i)).collect();
    let target: Vec<_> = (0..6)
        .map(|i| {
            let mut s = render_scene(&spec, 200 + i);
            s.clear = s.foggy.clone();
            s
        })
        .collect();
    TrainData::prepare(ModelConfig::default(), &source, &target, spec.depth_max, OracleFlags::default()).unwrap()
}

fn config(iterations: u64) -> TrainConfig {
    TrainConfig { iterations, pl_warmup: 0, checkpoint_every: 0, eval_every: 0, ..TrainConfig::default() }
}

fn bits(state: &fogda_core::model::ModelParams) -> Vec<u64> {
    state.store().tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn teacher_pass_is_gradient_free_and_read_only() {
    let d = data();
    let state = TrainState::new(&config(1), &d);
    let before = state.ema.clone();
    let (tape, head) = teacher_forward(&state.ema, &d.target[0].defogged).unwrap();
    assert!(!tape.grad_enabled());
    let obj = head.objectness;
    let mut probe = tape;
    let m = probe.mean(obj);
    assert!(matches!(probe.backward(m), Err(TensorError::GradDisabled)));
    generate_pseudo_labels(&state.ema, &d.target[0].defogged, 0.0).unwrap();
    assert_eq!(bits(&state.ema.shadow), bits(&before.shadow));
}

#[test]
fn each_iteration_makes_exactly_one_update() {
    let d = data();
    let c = config(3);
    let mut state = TrainState::new(&c, &d);
    for step in 0..3 {
        let shadow = state.ema.shadow.clone();
        let src = [&d.source[step]];
        let tgt = [&d.target[step]];
        train_iteration(&mut state, &src, &tgt, &c).unwrap();
        assert_eq!(state.iteration, step as u64 + 1);
        // the shadow moved once, toward the single updated student
        let a = c.ema_decay;
        for ((old, new), p) in shadow.store().tensors().iter().zip(state.ema.shadow.store().tensors()).zip(state.params.store().tensors()) {
            for ((&o, &n), &q) in old.data().iter().zip(new.data()).zip(p.data()) {
                assert_eq!(n, a * o + (1.0 - a) * q);
            }
        }
    }
}

#[test]
fn without_pseudo_labels_tau_and_decay_are_inert() {
    let d = data();
    let mut base = config(12);
    base.toggles = Toggles { pl: false, ..Toggles::full() };
    let a = train(&base, &d, None, None).unwrap();
    let b = train(&TrainConfig { tau: 0.3, ema_decay: 0.5, ..base.clone() }, &d, None, None).unwrap();
    assert_eq!(bits(&a.params), bits(&b.params));
    let la: Vec<_> = a.log.iter().map(|r| r.losses).collect();
    let lb: Vec<_> = b.log.iter().map(|r| r.losses).collect();
    assert_eq!(la, lb);
}

#[test]
fn same_seed_same_weights() {
    let d = data();
    let c = config(8);
    let a = train(&c, &d, None, None).unwrap();
    let b = train(&c, &d, None, None).unwrap();
    assert_eq!(bits(&a.params), bits(&b.params));
    assert_eq!(bits(&a.ema.shadow), bits(&b.ema.shadow));
    let other = train(&TrainConfig { seed: 1, ..c }, &d, None, None).unwrap();
    assert_ne!(bits(&a.params), bits(&other.params));
}

#[test]
fn empty_run_writes_only_the_initial_checkpoint() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    train(&config(0), &d, None, Some(dir.path())).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(dir.path().join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["ckpt_0.bin"]);
}
