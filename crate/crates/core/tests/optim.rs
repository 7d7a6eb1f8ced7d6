use rand::Rng;
use taemi_core::data::{generate, FeatureRecord, GeneratorConfig, Split};
use taemi_core::model::{load_checkpoint, save_checkpoint, TaemiConfig, TaemiModel};
use taemi_core::nn::ParamStore;
use taemi_core::optim::{
    clip_global_norm, train_loop, AdamWConfig, AdamWState, EarlyStopper, Schedule, TrainConfig, Trainer,
};
use taemi_core::oracle::brute_force_stop_epoch;
use taemi_core::tensor::Tensor;
use taemi_core::{seeded_rng, Error};

fn scalar_store(theta: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", Tensor::vector(vec![theta]), true);
    s
}

fn set_grad(s: &mut ParamStore, g: f64) {
    s.zero_grads();
    s.iter_mut().next().unwrap().tensor.accumulate_grad(&[g]).unwrap();
}

fn value(s: &ParamStore) -> f64 {
    s.iter().next().unwrap().tensor.data()[0]
}

#[test]
fn first_adamw_step_matches_hand_computation() {
    let (theta, g, lr, wd, eps) = (1.0, 0.5, 1e-4, 0.01, 1e-8);
    let mut s = scalar_store(theta);
    set_grad(&mut s, g);
    let mut opt = AdamWState::new(&s, AdamWConfig::default()).unwrap();
    opt.step(&mut s, lr).unwrap();
    // m̂ = g and v̂ = g² after bias correction
    let expected = theta - lr * g / ((g * g).sqrt() + eps) - lr * wd * theta;
    assert!((value(&s) - expected).abs() < 1e-12);
    assert!((value(&s) - 0.999899).abs() < 1e-9);
}

#[test]
fn two_adamw_steps_follow_the_moment_recurrence() {
    let (b1, b2, eps, wd, lr): (f64, f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.01, 1e-3);
    let grads = [0.3, -1.2];
    let mut s = scalar_store(0.4);
    let mut opt = AdamWState::new(&s, AdamWConfig::default()).unwrap();
    let (mut theta, mut m, mut v) = (0.4, 0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        set_grad(&mut s, g);
        opt.step(&mut s, lr).unwrap();
        let t = t as i32 + 1;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        theta = theta - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * theta;
        assert!((value(&s) - theta).abs() < 1e-12, "step {t}");
    }
    assert_eq!(opt.step, 2);
}

#[test]
fn zero_weight_decay_is_plain_adam() {
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut s = scalar_store(2.0);
    let mut opt = AdamWState::new(&s, cfg).unwrap();
    let (mut theta, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
    let mut rng = seeded_rng(3, 0);
    for t in 1..=20 {
        let g: f64 = rng.gen_range(-2.0..2.0);
        set_grad(&mut s, g);
        opt.step(&mut s, 0.01).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        theta -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
    }
    assert!((value(&s) - theta).abs() < 1e-12);
}

#[test]
fn parameters_without_decay_skip_the_decay_term() {
    let mut s = ParamStore::new();
    s.add("b", Tensor::vector(vec![1.0]), false);
    set_grad(&mut s, 0.0);
    let mut opt = AdamWState::new(&s, AdamWConfig::default()).unwrap();
    opt.step(&mut s, 1e-2).unwrap();
    assert_eq!(value(&s), 1.0);
}

#[test]
fn schedule_warms_up_then_follows_a_cosine() {
    let s = Schedule::new(1e-4, 0.0, 10, 110).unwrap();
    assert_eq!(s.lr_at(0), 0.0);
    assert_eq!(s.lr_at(10), 1e-4);
    assert!((s.lr_at(5) - 5e-5).abs() < 1e-20);
    assert!((s.lr_at(60) - 5e-5).abs() < 1e-18);
    assert_eq!(s.lr_at(110), 0.0);
    assert_eq!(s.lr_at(1000), 0.0);
    for t in 1..120 {
        let jump = (s.lr_at(t) - s.lr_at(t - 1)).abs();
        assert!(jump <= 1e-5 + 1e-18, "step {t}: {jump}");
    }
    for t in 11..110 {
        assert!(s.lr_at(t) <= s.lr_at(t - 1));
    }
}

#[test]
fn schedule_respects_the_floor() {
    let s = Schedule::new(1e-3, 1e-5, 5, 50).unwrap();
    assert_eq!(s.lr_at(50), 1e-5);
    assert!((5..50).all(|t| s.lr_at(t) >= 1e-5));
    assert!(Schedule::new(1e-3, 2e-3, 5, 50).is_err());
}

#[test]
fn schedule_built_from_epochs() {
    let cfg = TrainConfig::default();
    let s = cfg.schedule(2000).unwrap();
    assert_eq!(cfg.steps_per_epoch(2000), 63);
    assert_eq!(s.warmup_steps, 63);
    assert_eq!(s.total_steps, 63 * 50);
    assert_eq!(s.lr_at(s.warmup_steps), 1e-4);
}

#[test]
fn clipping_scales_to_the_threshold() {
    let mut g = vec![300.0, 400.0];
    let scale = clip_global_norm(&mut [&mut g], 100.0).unwrap();
    assert!((scale - 0.2).abs() < 1e-15);
    assert!((g[0] - 60.0).abs() < 1e-12 && (g[1] - 80.0).abs() < 1e-12);
    let before = g.clone();
    clip_global_norm(&mut [&mut g], 100.0).unwrap();
    for (a, b) in g.iter().zip(&before) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut small = vec![3.0, 4.0];
    assert_eq!(clip_global_norm(&mut [&mut small], 100.0).unwrap(), 1.0);
    assert_eq!(small, vec![3.0, 4.0]);
}

#[test]
fn clipping_caps_the_joint_norm_of_many_buffers() {
    let mut rng = seeded_rng(5, 0);
    for _ in 0..50 {
        let mut a: Vec<f64> = (0..7).map(|_| rng.gen_range(-500.0..500.0)).collect();
        let mut b: Vec<f64> = (0..3).map(|_| rng.gen_range(-500.0..500.0)).collect();
        clip_global_norm(&mut [&mut a, &mut b], 100.0).unwrap();
        let norm = a.iter().chain(&b).map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 100.0 + 1e-9, "{norm}");
    }
    assert!(matches!(clip_global_norm(&mut [&mut [f64::INFINITY][..]], 1.0), Err(Error::Numeric(_))));
}

#[test]
fn early_stopping_matches_brute_force_scan() {
    let mut rng = seeded_rng(9, 0);
    for case in 0..500 {
        let len = rng.gen_range(1..30);
        let patience = rng.gen_range(1..6);
        // coarse values make ties common
        let metrics: Vec<Option<f64>> = (0..len)
            .map(|_| {
                if rng.gen::<f64>() < 0.1 {
                    None
                } else {
                    Some((rng.gen_range(0..8) as f64) / 8.0)
                }
            })
            .collect();
        let mut stopper = EarlyStopper::new(patience).unwrap();
        let stopped = metrics
            .iter()
            .enumerate()
            .find(|(i, m)| stopper.update(i + 1, **m).stop)
            .map(|(i, _)| i + 1);
        assert_eq!(stopped, brute_force_stop_epoch(&metrics, patience), "case {case}: {metrics:?} p={patience}");
    }
}

#[test]
fn early_stopping_on_hand_sequences() {
    let run = |ms: &[f64], p: usize| {
        let mut s = EarlyStopper::new(p).unwrap();
        ms.iter().enumerate().find(|(i, &m)| s.update(i + 1, Some(m)).stop).map(|(i, _)| i + 1)
    };
    assert_eq!(run(&[0.1, 0.2, 0.3, 0.4], 2), None);
    assert_eq!(run(&[0.5, 0.4, 0.4, 0.6], 2), Some(3));
    assert_eq!(run(&[0.5, 0.5, 0.5], 2), Some(3));
    assert!(EarlyStopper::new(0).is_err());
}

fn tiny_data(n_train: usize, n_val: usize) -> (Vec<FeatureRecord>, Vec<FeatureRecord>) {
    let cfg = GeneratorConfig {
        dims: TaemiConfig::tiny().feature_dims(),
        audio_frames: [1, 4],
        vision_frames: [1, 3],
        ..GeneratorConfig::default()
    };
    (
        generate(&cfg, n_train, Split::Train).unwrap(),
        generate(&cfg, n_val, Split::Val).unwrap(),
    )
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 3,
        schedule_epochs: 10,
        batch_size: 8,
        base_lr: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_smoke_run() {
    let (train, val) = tiny_data(20, 10);
    let mut model = TaemiModel::seeded(TaemiConfig::tiny(), 0).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..tiny_train_config()
    };
    let outcome = train_loop(&mut model, &train, &val, &cfg).unwrap();
    let r = outcome.report;
    assert_eq!(r.epochs.len(), 1);
    assert_eq!(r.steps, 3);
    assert!(r.epochs[0].train_loss.is_finite());
    assert_eq!(r.epochs[0].val.n_samples, 10);
    assert!(r.to_csv().lines().count() == 2);
    assert!(r.to_json().contains("\"best_epoch\""));
}

#[test]
fn repeated_steps_on_one_batch_reduce_the_loss() {
    let (train, _) = tiny_data(8, 2);
    let config = TaemiConfig {
        mlp_dropout: 0.0,
        modality_dropout_p: 0.0,
        ..TaemiConfig::tiny()
    };
    let mut model = TaemiModel::seeded(config, 1).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        warmup_epochs: 1,
        schedule_epochs: 100,
        base_lr: 1e-2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&model, cfg, 8).unwrap();
    let mut losses = Vec::new();
    for _ in 0..6 {
        losses.push(trainer.train_batch(&mut model, &train).unwrap().loss);
        trainer.state.batch_in_epoch = 0;
        trainer.state.epoch_loss_sum = 0.0;
        trainer.state.epoch_samples = 0;
    }
    assert!(losses[5] < losses[0], "{losses:?}");
}

#[test]
fn training_is_deterministic() {
    let (train, val) = tiny_data(24, 10);
    let run = || {
        let mut model = TaemiModel::seeded(TaemiConfig::tiny(), 2).unwrap();
        let outcome = train_loop(&mut model, &train, &val, &tiny_train_config()).unwrap();
        (outcome.report, model.params)
    };
    let (r1, p1) = run();
    let (r2, p2) = run();
    assert_eq!(r1, r2);
    assert_eq!(p1, p2);
    assert_eq!(r1.to_csv(), r2.to_csv());
}

#[test]
fn resuming_from_a_checkpoint_is_exact() {
    let (train, val) = tiny_data(20, 10);
    let cfg = tiny_train_config();
    let mut straight = TaemiModel::seeded(TaemiConfig::tiny(), 4).unwrap();
    let full = train_loop(&mut straight, &train, &val, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    let mut model = TaemiModel::seeded(TaemiConfig::tiny(), 4).unwrap();
    let mut trainer = Trainer::new(&model, cfg, train.len()).unwrap();
    // stop in the middle of the second epoch
    while !trainer.epoch_complete() {
        trainer.train_batch(&mut model, &train).unwrap();
    }
    trainer.finish_epoch(&model, &val).unwrap();
    trainer.train_batch(&mut model, &train).unwrap();
    save_checkpoint(&model, Some(&trainer.state), &path).unwrap();
    let best = trainer.best_params.clone();
    drop((model, trainer));

    let (mut model, state) = load_checkpoint(&path).unwrap();
    let mut resumed = Trainer::resume(state.expect("state saved"), best);
    let outcome = resumed.run(&mut model, &train, &val).unwrap();
    assert_eq!(outcome.report, full.report);
    assert_eq!(model.params, straight.params);
}

#[test]
fn invalid_training_settings_are_rejected() {
    let model = TaemiModel::seeded(TaemiConfig::tiny(), 0).unwrap();
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            warmup_epochs: 50,
            ..TrainConfig::default()
        },
        TrainConfig {
            clip_norm: 0.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(Trainer::new(&model, cfg, 10).is_err());
    }
}
