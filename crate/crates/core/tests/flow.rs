use flowedit::autograd::Tape;
use flowedit::flow::*;
use flowedit::io::Checkpoint;
use flowedit::model::{ArchConfig, MlpConfig, Model};
use flowedit::nn::Ctx;
use flowedit::ode::{Direction, SolverFamily, SolverSpec};
use flowedit::rng;
use flowedit::tensor::Tensor;
use proptest::prelude::*;

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    rng::normal_tensor(&mut rng::seeded(seed), shape)
}

fn mlp() -> ArchConfig {
    ArchConfig::Mlp(MlpConfig { dim: 2, hidden: 16, layers: 2, time_features: 4 })
}

fn zeroed(arch: ArchConfig) -> Model {
    let mut m = Model::init(arch, 0).unwrap();
    for p in m.params.iter_mut() {
        p.value = Tensor::zeros(p.value.shape().to_vec());
    }
    m
}

fn loss(model: &Model, batch: &TrainingBatch) -> f64 {
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &model.params, false);
    let l = cfm_loss(model, &mut cx, batch, 1e-4).unwrap();
    tape.value(l).item() as f64
}

#[test]
fn path_examples() {
    let (x1, n) = (randn(1, &[6]), randn(2, &[6]));
    assert_eq!(sample_path_point(&x1, 0.0, &n, 1e-4).unwrap(), n);
    let end = sample_path_point(&x1, 1.0, &n, 1e-4).unwrap();
    for ((&e, &a), &b) in end.data().iter().zip(x1.data()).zip(n.data()) {
        assert!((e as f64 - (a as f64 + 1e-4 * b as f64)).abs() < 1e-6);
    }
    let mid = sample_path_point(&x1, 0.5, &Tensor::zeros([6]), 0.0).unwrap();
    assert_eq!(mid, x1.scale(0.5).unwrap());
    assert!(matches!(sample_path_point(&x1, 1.5, &n, 1e-4), Err(FlowError::TimeOutOfRange(_))));
    assert!(sample_path_point(&x1, 0.5, &randn(3, &[5]), 1e-4).is_err());
}

#[test]
fn target_examples() {
    let (x1, x0) = (randn(4, &[6]), randn(5, &[6]));
    let on_mean = target_field(&x1.scale(0.3).unwrap(), &x1, 0.3, 0.0).unwrap();
    assert!(on_mean.max_abs_diff(&x1) < 1e-6);
    assert!(target_field(&x0, &x1, 0.0, 0.0).unwrap().max_abs_diff(&x1.sub(&x0).unwrap()) < 1e-6);
    let xt = randn(6, &[6]);
    let w = target_field(&xt, &x1, 0.3, 1e-4).unwrap();
    let k = 1.0 - 1e-4f64;
    for ((&w, &a), &x) in w.data().iter().zip(x1.data()).zip(xt.data()) {
        let want = (a as f64 - k * x as f64) / (1.0 - k * 0.3);
        assert!((w as f64 - want).abs() < 1e-6);
    }
    assert!(matches!(target_field(&xt, &x1, 1.0, 0.0), Err(FlowError::Singular(_))));
}

#[test]
fn stub_losses() {
    let m = zeroed(mlp());
    let b = 4;
    let zero = TrainingBatch {
        x1: Tensor::zeros([b, 2]),
        prompts: vec![],
        t: vec![0.1, 0.4, 0.6, 0.9],
        noise: Tensor::zeros([b, 2]),
    };
    assert_eq!(loss(&m, &zero), 0.0);
    // Target is x1 - (1 - sigma) noise = -eps everywhere; the model returns 0 = target + eps.
    let eps = 0.3;
    let shifted = TrainingBatch { x1: Tensor::full([b, 2], -eps), ..zero.clone() };
    assert!((loss(&m, &shifted) - eps as f64 * eps as f64 * 2.0).abs() < 1e-6);
    let bad = TrainingBatch { t: vec![0.1, 0.2, 1.5, 0.3], ..zero.clone() };
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &m.params, false);
    assert!(cfm_loss(&m, &mut cx, &bad, 1e-4).is_err());
}

#[test]
fn zero_field_is_identity() {
    let m = zeroed(mlp());
    let x = randn(7, &[3, 2]);
    for fam in [SolverFamily::Euler, SolverFamily::Rk4, SolverFamily::Dopri5, SolverFamily::Bosh3, SolverFamily::AdaptiveHeun] {
        let spec = if fam.is_adaptive() {
            SolverSpec::adaptive(fam, 1e-5, 1e-5, Direction::Generate)
        } else {
            SolverSpec::fixed(fam, 10, Direction::Generate)
        };
        assert_eq!(generate(&m, &x, &[], &spec, &NoSteering).unwrap().0, x);
        let spec = SolverSpec { direction: Direction::Invert, ..spec };
        assert_eq!(invert(&m, &x, &[], &spec).unwrap().0, x);
    }
}

#[test]
fn direction_is_checked() {
    let m = zeroed(mlp());
    let x = randn(8, &[1, 2]);
    assert!(generate(&m, &x, &[], &SolverSpec::dopri5(1e-5, Direction::Invert), &NoSteering).is_err());
    assert!(invert(&m, &x, &[], &SolverSpec::dopri5(1e-5, Direction::Generate)).is_err());
}

#[test]
fn inversion_times_decrease() {
    let m = Model::init(mlp(), 1).unwrap();
    let x = randn(9, &[4, 2]);
    for spec in [SolverSpec::dopri5(1e-5, Direction::Invert), SolverSpec::fixed(SolverFamily::Euler, 20, Direction::Invert)] {
        let (_, traj) = invert(&m, &x, &[], &spec).unwrap();
        let times: Vec<f64> = traj.points.iter().map(|p| p.0).collect();
        assert_eq!(times.first(), Some(&1.0));
        assert_eq!(times.last(), Some(&0.0));
        assert!(times.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn generate_invert_round_trip_on_untrained_model() {
    let m = Model::init(mlp(), 2).unwrap();
    let x0 = randn(10, &[8, 2]);
    let (x1, _) = generate(&m, &x0, &[], &SolverSpec::dopri5(1e-6, Direction::Generate), &NoSteering).unwrap();
    let (back, _) = invert(&m, &x1, &[], &SolverSpec::dopri5(1e-6, Direction::Invert)).unwrap();
    assert!(mean_relative_error(&back, &x0) < 1e-4);
    let (euler, _) = generate(&m, &x0, &[], &SolverSpec::fixed(SolverFamily::Euler, 100, Direction::Generate), &NoSteering).unwrap();
    assert!(mean_relative_error(&euler, &x1) < 5e-2);
}

fn moons_set() -> TrainSet {
    TrainSet { latents: flowedit::data::two_moons(256, 0.05, 3), prompts: vec![] }
}

#[test]
fn zero_steps_keep_initialization() {
    let m = Model::init(mlp(), 4).unwrap();
    let mut tr = Trainer::new(m.clone(), &TrainConfig::default(), 1e-4);
    tr.run(&moons_set(), 0, |_, _| {}).unwrap();
    for (a, b) in tr.model.params.iter().zip(m.params.iter()) {
        assert_eq!(a.value.to_le_bytes(), b.value.to_le_bytes());
    }
    assert!(tr.losses.is_empty());
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig { batch_size: 16, seed: 5, ..TrainConfig::default() };
    let run = || {
        let mut tr = Trainer::new(Model::init(mlp(), 4).unwrap(), &cfg, 1e-4);
        tr.run(&moons_set(), 30, |_, _| {}).unwrap();
        Checkpoint::from_trainer(&tr, &FlowConfig::default(), &cfg, None).to_archive().unwrap().to_bytes().unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn training_reduces_loss() {
    let cfg = TrainConfig { batch_size: 64, seed: 1, adam: flowedit::optim::AdamConfig { lr: 2e-3, ..Default::default() }, ..TrainConfig::default() };
    let mut tr = Trainer::new(Model::init(mlp(), 4).unwrap(), &cfg, 1e-4);
    tr.run(&moons_set(), 400, |_, _| {}).unwrap();
    let smooth = ema(&tr.losses, 0.05);
    assert!(smooth.last().unwrap() < &(0.8 * smooth[0]), "{} -> {}", smooth[0], smooth.last().unwrap());
}

#[test]
fn ema_examples() {
    assert!(ema(&[], 0.1).is_empty());
    let e = ema(&[4.0, 2.0, 2.0], 0.5);
    assert_eq!(e, vec![4.0, 3.0, 2.5]);
}

#[test]
fn edit_window_is_open() {
    assert!(!edit_window(0.0, 0.5));
    assert!(edit_window(0.25, 0.5));
    assert!(!edit_window(0.5, 0.5));
    assert!(edit_window(0.999, 1.0));
}

proptest! {
    #[test]
    fn path_target_identity(seed in 0u64..1000, t in 0.0f64..0.999) {
        let (x1, n) = (randn(seed, &[7]), randn(seed + 1, &[7]));
        let xt = sample_path_point(&x1, t, &n, 1e-4).unwrap();
        let w = target_field(&xt, &x1, t, 1e-4).unwrap();
        let want: Vec<f64> = x1.data().iter().zip(n.data()).map(|(&a, &b)| a as f64 - (1.0 - 1e-4) * b as f64).collect();
        prop_assert!(w.max_abs_diff(&Tensor::from_f64([7], &want).unwrap()) < 1e-5 / (1.0 - t).max(1e-2));
    }

    #[test]
    fn loss_is_non_negative(seed in 0u64..300) {
        let m = Model::init(mlp(), seed).unwrap();
        let batch = TrainingBatch {
            x1: randn(seed, &[3, 2]),
            prompts: vec![],
            t: vec![0.2, 0.5, 0.8],
            noise: randn(seed + 9, &[3, 2]),
        };
        prop_assert!(loss(&m, &batch) >= 0.0);
    }
}
