mod common;

use rand::Rng;
use taemi_core::data::{generate, GeneratorConfig, Split};
use taemi_core::metrics::{evaluate, mse, mse_loss, pearson, EvalResult};
use taemi_core::model::{TaemiConfig, TaemiModel};
use taemi_core::oracle::{naive_mse, naive_pearson};
use taemi_core::optim::{train_loop, TrainConfig};
use taemi_core::tensor::{Graph, Tensor};
use taemi_core::{seeded_rng, Error};

fn random_matrix(rng: &mut impl Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect()
}

#[test]
fn mse_loss_matches_the_naive_reference() {
    let mut rng = seeded_rng(21, 0);
    for case in 0..100 {
        let n = rng.gen_range(1..12);
        let k = rng.gen_range(1..8);
        let p = random_matrix(&mut rng, n, k);
        let t = random_matrix(&mut rng, n, k);
        let want = naive_mse(&p, &t);
        let flat = |m: &[Vec<f64>]| m.concat();
        let mut g = Graph::new();
        let pv = g.constant(Tensor::matrix(n, k, flat(&p)).unwrap());
        let tv = g.constant(Tensor::matrix(n, k, flat(&t)).unwrap());
        let l = mse_loss(&mut g, pv, tv).unwrap();
        assert!((g.scalar(l).unwrap() - want).abs() < 1e-12, "case {case}");
        assert!((mse(&flat(&p), &flat(&t)).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn pearson_matches_the_naive_reference() {
    let mut rng = seeded_rng(22, 0);
    for case in 0..100 {
        let n = rng.gen_range(2..60);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.3 * v + rng.gen_range(-2.0..2.0)).collect();
        let got = pearson(&x, &y).unwrap().unwrap();
        let want = naive_pearson(&x, &y).unwrap();
        assert!((got - want).abs() < 1e-12, "case {case}: {got} vs {want}");
    }
}

#[test]
fn pearson_is_affine_invariant() {
    let mut rng = seeded_rng(23, 0);
    for _ in 0..50 {
        let x: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v + rng.gen_range(-0.5..0.5)).collect();
        let base = pearson(&x, &y).unwrap().unwrap();
        let a: f64 = rng.gen_range(0.1..10.0);
        let b: f64 = rng.gen_range(-10.0..10.0);
        let scaled: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        assert!((pearson(&scaled, &y).unwrap().unwrap() - base).abs() < 1e-12);
        let flipped: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        assert!((pearson(&flipped, &y).unwrap().unwrap() + base).abs() < 1e-12);
    }
}

#[test]
fn pearson_ignores_order_and_duplication() {
    let x = [0.3, -1.2, 2.5, 0.9, -0.4, 1.1];
    let y = [0.1, -0.8, 1.9, 1.2, 0.2, 0.4];
    let base = pearson(&x, &y).unwrap().unwrap();
    let perm = [3, 0, 5, 1, 4, 2];
    let px: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
    let py: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
    assert!((pearson(&px, &py).unwrap().unwrap() - base).abs() < 1e-12);
    let dx: Vec<f64> = x.iter().chain(&x).copied().collect();
    let dy: Vec<f64> = y.iter().chain(&y).copied().collect();
    assert!((pearson(&dx, &dy).unwrap().unwrap() - base).abs() < 1e-12);
}

#[test]
fn degenerate_inputs() {
    assert_eq!(pearson(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap(), None);
    assert_eq!(naive_pearson(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]), None);
    assert!(matches!(pearson(&[1.0], &[2.0]), Err(Error::Validation(_))));
    assert!(matches!(pearson(&[1.0, 2.0], &[2.0]), Err(Error::Dimension { .. })));
    assert!(mse(&[], &[]).is_err());
    assert!(EvalResult::from_predictions(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 2).is_err());
}

#[test]
fn eval_result_averages_defined_dimensions() {
    let pred = [0.0, 1.0, 1.0, 3.0, 2.0, 2.0];
    let target = [0.0, 0.0, 1.0, 1.0, 2.0, 2.0];
    let r = EvalResult::from_predictions(&pred, &target, 2).unwrap();
    let rho1 = naive_pearson(&[1.0, 3.0, 2.0], &[0.0, 1.0, 2.0]).unwrap();
    assert!((r.rho_per_dim[0].unwrap() - 1.0).abs() < 1e-15);
    assert!((r.rho_per_dim[1].unwrap() - rho1).abs() < 1e-12);
    assert!((r.mean_rho.unwrap() - (1.0 + rho1) / 2.0).abs() < 1e-12);
    assert_eq!(r.n_samples, 3);
    assert!(r.to_string().contains("mean_rho"));
}

#[test]
fn a_small_model_can_memorize_a_small_set() {
    let config = TaemiConfig {
        mlp_dropout: 0.0,
        modality_dropout_p: 0.0,
        ..TaemiConfig::tiny()
    };
    let gen = GeneratorConfig {
        dims: config.feature_dims(),
        sigma: 0.0,
        audio_frames: [1, 3],
        vision_frames: [1, 3],
        ..GeneratorConfig::default()
    };
    let train = generate(&gen, 16, Split::Train).unwrap();
    let mut model = TaemiModel::seeded(config, 0).unwrap();
    let cfg = TrainConfig {
        max_epochs: 150,
        schedule_epochs: 150,
        warmup_epochs: 2,
        batch_size: 16,
        base_lr: 1e-2,
        patience: 1000,
        ..TrainConfig::default()
    };
    train_loop(&mut model, &train, &train, &cfg).unwrap();
    let r = evaluate(&model, &train, 16).unwrap();
    assert!(r.mean_rho.unwrap() > 0.99, "{r}");
}

#[test]
fn evaluation_needs_two_records() {
    let model = TaemiModel::seeded(TaemiConfig::tiny(), 0).unwrap();
    let gen = GeneratorConfig {
        dims: TaemiConfig::tiny().feature_dims(),
        ..GeneratorConfig::default()
    };
    let one = generate(&gen, 1, Split::Val).unwrap();
    assert!(matches!(evaluate(&model, &one, 4), Err(Error::Validation(_))));
    let two = generate(&gen, 2, Split::Val).unwrap();
    assert!(evaluate(&model, &two, 0).is_err());
}
