//! Training loop, optimizer, config files and checkpoints.

use lmim::data::SynthSpec;
use lmim::io::Checkpoint;
use lmim::model::TargetStrategy;
use lmim::trainer::{
    adamw_update, checkpoint_config, load_dataset, load_model, preset, run_experiment, AdamWConfig, DataSource,
    RunOutcome, TrainConfig, Trainer, CONFIG_FILE, METRICS_FILE, PRESETS,
};
use lmim::Error;

fn tiny(strategy: TargetStrategy) -> TrainConfig {
    let mut c = preset("full").unwrap();
    c.data = DataSource::Synthetic(SynthSpec {
        classes: 4,
        count: 40,
        side: 16,
        seed: 3,
    });
    c.model.patch_size = 4;
    c.model.dim = 16;
    c.model.depth = 2;
    c.model.heads = 2;
    c.model.decoder_depth = 1;
    c.model.projector_hidden = 32;
    c.target_depth = 2;
    c.target_strategy = strategy;
    c.grid = 4;
    c.gap = 0;
    c.mask_ratio = 0.75;
    c.pool_k = 4;
    c.batch_size = 8;
    c.epochs = 3;
    c.warmup_epochs = 1;
    c.base_lr = 0.05;
    c
}

fn trainer(cfg: &TrainConfig) -> Trainer {
    let (train, _) = load_dataset(cfg).unwrap().split();
    Trainer::new(cfg.clone(), train).unwrap()
}

#[test]
fn zero_learning_rate_leaves_weights_bitwise() {
    let mut cfg = tiny(TargetStrategy::Momentum);
    cfg.base_lr = 0.0;
    let mut t = trainer(&cfg);
    let before = t.state.model.params.clone();
    for _ in 0..3 {
        assert!(!t.train_step().unwrap().nan_flag);
    }
    for (a, b) in before.tensors().iter().zip(t.state.model.params.tensors()) {
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(t.state.step, 3);
}

#[test]
fn training_moves_weights_and_logs_finite_metrics() {
    let cfg = tiny(TargetStrategy::Momentum);
    let mut t = trainer(&cfg);
    let before = t.state.model.params.clone();
    let mut rows = Vec::new();
    assert_eq!(t.run(|_, m| Ok(rows.push(m.clone()))).unwrap(), RunOutcome::Completed);
    assert_eq!(rows.len(), t.total_steps());
    assert!(rows.iter().all(|m| m.loss.is_finite() && m.grad_norm.is_finite() && !m.nan_flag));
    assert!(rows.iter().all(|m| (-1.0..=1.0).contains(&m.pooled_pair_cos)));
    assert_eq!(rows[0].lr, 0.0);
    assert_ne!(before.tensors()[0], t.state.model.params.tensors()[0]);
    // the momentum target trails the online encoder
    let target = t.state.target.params.as_ref().unwrap();
    assert_ne!(target.tensors()[0], t.state.model.params.tensors()[0]);
}

#[test]
fn same_seed_same_batches_other_seed_differs() {
    let cfg = tiny(TargetStrategy::SharedStopGrad);
    let (a, b) = (trainer(&cfg), trainer(&cfg));
    for s in [0, 4, 7] {
        let (x, y) = (a.prepare_batch(s).unwrap(), b.prepare_batch(s).unwrap());
        assert_eq!(x.visible, y.visible);
        assert_eq!(x.pos_t, y.pos_t);
    }
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(trainer(&other).prepare_batch(0).unwrap().visible, a.prepare_batch(0).unwrap().visible);
}

#[test]
fn epoch_visits_every_image_once() {
    let cfg = tiny(TargetStrategy::Momentum);
    let t = trainer(&cfg);
    let mut seen: Vec<usize> = (0..t.steps_per_epoch()).flat_map(|s| t.batch_indices(s)).collect();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), t.steps_per_epoch() * cfg.batch_size);
}

#[test]
fn resume_equals_uninterrupted_run() {
    for strategy in [TargetStrategy::Momentum, TargetStrategy::Standalone, TargetStrategy::SharedStopGrad] {
        let cfg = tiny(strategy);
        let mut full = trainer(&cfg);
        let mut full_rows = Vec::new();
        full.run(|_, m| Ok(full_rows.push(m.clone()))).unwrap();

        let mut first = trainer(&cfg);
        let mut rows = Vec::new();
        first.run_until(5, |_, m| Ok(rows.push(m.clone()))).unwrap();
        let bytes = first.checkpoint().unwrap().to_bytes();
        drop(first);
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let (train, _) = load_dataset(&cfg).unwrap().split();
        let mut resumed = Trainer::resume(cfg.clone(), train, &ck).unwrap();
        assert_eq!(resumed.state.step, 5);
        resumed.run(|_, m| Ok(rows.push(m.clone()))).unwrap();

        assert_eq!(rows, full_rows, "{strategy:?}");
        for (a, b) in full.state.model.params.tensors().iter().zip(resumed.state.model.params.tensors()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(full.state.adam, resumed.state.adam);
    }
}

#[test]
fn checkpoint_forward_is_bitwise() {
    let cfg = tiny(TargetStrategy::Momentum);
    let mut t = trainer(&cfg);
    t.run_until(3, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.lmim");
    t.checkpoint().unwrap().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.to_bytes(), std::fs::read(&path).unwrap());
    let restored_cfg = checkpoint_config(&ck).unwrap();
    assert_eq!(restored_cfg, cfg);
    let model = load_model(&ck, &restored_cfg).unwrap();
    let batch = t.prepare_batch(3).unwrap();
    let a = t.state.model.encode_features(&batch.visible, &batch.pos_v, batch.groups).unwrap();
    let b = model.encode_features(&batch.visible, &batch.pos_v, batch.groups).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn shape_change_is_a_digest_mismatch() {
    let cfg = tiny(TargetStrategy::Momentum);
    let ck = trainer(&cfg).checkpoint().unwrap();
    let mut other = cfg.clone();
    other.model.dim = 32;
    other.model.projector_hidden = 64;
    assert!(matches!(load_model(&ck, &other), Err(Error::DigestMismatch)));
    let (train, _) = load_dataset(&other).unwrap().split();
    assert!(matches!(Trainer::resume(other, train, &ck), Err(Error::DigestMismatch)));
    // schedule keys are not part of the digest
    let mut longer = cfg.clone();
    longer.epochs = 9;
    assert!(load_model(&ck, &longer).is_ok());
}

#[test]
fn non_finite_step_is_flagged_and_state_kept() {
    let cfg = tiny(TargetStrategy::Momentum);
    let mut t = trainer(&cfg);
    t.state.model.params.tensors_mut()[0].data_mut()[0] = f32::INFINITY;
    let before = t.state.clone();
    let m = t.train_step().unwrap();
    assert!(m.nan_flag);
    assert!(m.nan_op.is_some());
    assert!(m.loss.is_nan());
    assert_eq!(t.state.step, 0);
    assert_eq!(t.state.adam, before.adam);
    let outcome = t.run(|_, _| Ok(())).unwrap();
    assert!(matches!(outcome, RunOutcome::NanAbort { step: 0, .. }));
}

#[test]
fn experiment_writes_reproducible_artifacts() {
    let mut cfg = tiny(TargetStrategy::Momentum);
    cfg.checkpoint_every = 1;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&cfg, a.path()).unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    assert_eq!(ra.outcome, RunOutcome::Completed);
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, METRICS_FILE), read(&b, METRICS_FILE));
    assert_eq!(read(&a, "checkpoint.lmim"), read(&b, "checkpoint.lmim"));
    assert!(a.path().join("checkpoint_epoch1.lmim").exists());
    let text = String::from_utf8(read(&a, METRICS_FILE)).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,lr,loss,recon,reg,grad_norm,pooled_pair_cos,gamma_t,nan_flag"
    );
    assert_eq!(lines.count(), ra.steps);
    let written = TrainConfig::parse(&String::from_utf8(read(&a, CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(written, cfg);
}

#[test]
fn config_text_is_a_fixed_point() {
    for name in PRESETS {
        let c = preset(name).unwrap();
        let text = c.to_text();
        let back = TrainConfig::parse(&text).unwrap();
        assert_eq!(back, c, "{name}");
        assert_eq!(back.to_text(), text);
    }
}

#[test]
fn overrides_and_errors() {
    let c = TrainConfig::parse("preset = momentum\n# comment\nmask_ratio = 0.9 # inline\nseed=7\n").unwrap();
    assert_eq!(c.mask_ratio, 0.9);
    assert_eq!(c.seed, 7);
    assert_eq!(c.target_strategy, TargetStrategy::Momentum);
    match TrainConfig::parse("no_such_key = 1") {
        Err(Error::InvalidKey { key, .. }) => assert_eq!(key, "no_such_key"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(TrainConfig::parse("mask_ratio = 1.5").and_then(|c| c.validate()), Err(Error::InvalidKey { .. })));
    assert!(preset("nope").is_err());
}

#[test]
fn ladder_presets_add_one_remedy_each() {
    let naive = preset("naive").unwrap();
    assert_eq!(naive.target_strategy, TargetStrategy::SharedJoint);
    let full = preset("full").unwrap();
    assert!(full.model.projector && full.model.visual_cues);
    assert_eq!(full.mask_ratio, 0.9);
    assert!(full.gap > 0);
    assert_eq!(full.loss.lambda_r, 0.1);
    let (a, b) = (preset("cues").unwrap(), preset("projector").unwrap());
    assert_eq!(a.model.projector, !b.model.projector);
    for name in PRESETS {
        let p = preset(name).unwrap();
        assert_eq!((p.epochs, p.batch_size, p.base_lr), (naive.epochs, naive.batch_size, naive.base_lr));
        p.validate().unwrap();
    }
}

/// Textbook AdamW written out in f64 with explicit bias correction.
fn reference_adamw(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: i32, c: &AdamWConfig) {
    for i in 0..p.len() {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        let mh = m[i] / (1.0 - c.beta1.powi(t));
        let vh = v[i] / (1.0 - c.beta2.powi(t));
        p[i] -= lr * (c.weight_decay * p[i] + mh / (vh.sqrt() + c.eps));
    }
}

#[test]
fn adamw_matches_reference_trace() {
    let cfg = AdamWConfig::default();
    let mut p = vec![1.0, -2.0, 0.5];
    let mut q = p.clone();
    let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
    let (mut mr, mut vr) = (m.clone(), v.clone());
    for t in 1..=50u64 {
        // gradient of sum (x - 3)^2 / 2 plus a time-varying term
        let g: Vec<f64> = p.iter().map(|x| x - 3.0 + 0.1 * (t as f64).sin()).collect();
        let gr: Vec<f64> = q.iter().map(|x| x - 3.0 + 0.1 * (t as f64).sin()).collect();
        adamw_update(&mut p, &g, &mut m, &mut v, 0.05, t, &cfg, true).unwrap();
        reference_adamw(&mut q, &gr, &mut mr, &mut vr, 0.05, t as i32, &cfg);
    }
    for (a, b) in p.iter().zip(&q) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}
