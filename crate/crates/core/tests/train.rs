//! The objective against closed forms and finite differences, and the
//! training loop's determinism, resumption and early-stopping contracts.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samsnet::data::{scan_dataset, write_toy_dataset, DatasetOptions, DatasetSplit, ToyConfig, TOY_SOURCES};
use samsnet::model::{load_checkpoint, ModelConfig, SamsNet};
use samsnet::numerics::gradcheck::{finite_differences, GradCheckReport};
use samsnet::numerics::{AdamConfig, Eager, Graph, Tape};
use samsnet::signal::{reconstruct_source, Stft, StftConfig, Waveform};
use samsnet::train::{compute_loss, mask_loss_gradient, train_source, LossDomain, TrainConfig};
use samsnet::{Error, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn noise(len: usize, seed: u64) -> Waveform<f64> {
    let mut r = rng(seed);
    let mut ch = || (0..len).map(|_| r.gen_range(-0.5..0.5)).collect::<Vec<f64>>();
    Waveform::new(ch(), ch(), 8000).unwrap()
}

fn small_stft() -> Arc<Stft<f64>> {
    Arc::new(Stft::new(StftConfig { window: 16, hop: 4, n_fft: 16 }).unwrap())
}

fn eager_loss(mask: &Tensor<f64>, mix: &Waveform<f64>, target: &Waveform<f64>, domain: LossDomain) -> f64 {
    let stft = small_stft();
    let spec = stft.analyze(mix).unwrap();
    compute_loss(&mut Eager, mask, &spec, target, domain, &stft).unwrap().item().unwrap()
}

#[test]
fn exact_estimate_has_zero_loss() {
    let stft = small_stft();
    let mix = noise(60, 1);
    let spec = stft.analyze(&mix).unwrap();
    let mask = Tensor::uniform(spec.magnitude.shape(), 0.0, 1.0, &mut rng(2));
    let est = reconstruct_source(&spec, &mask, 60).unwrap();
    assert_eq!(eager_loss(&mask, &mix, &est, LossDomain::Time), 0.0);
    let ones = Tensor::ones(spec.magnitude.shape());
    assert_eq!(eager_loss(&ones, &mix, &mix, LossDomain::Magnitude), 0.0);
}

#[test]
fn zero_mask_loss_is_target_energy() {
    let mix = noise(60, 3);
    let target = noise(60, 4);
    let shape = small_stft().analyze(&mix).unwrap().magnitude.shape().to_vec();
    let loss = eager_loss(&Tensor::zeros(&shape), &mix, &target, LossDomain::Time);
    assert!((loss - target.energy()).abs() < 1e-12 * target.energy());
    let mags = small_stft().analyze(&target).unwrap().magnitude;
    let mag_loss = eager_loss(&Tensor::zeros(&shape), &mix, &target, LossDomain::Magnitude);
    assert!((mag_loss - mags.data().iter().map(|v| v * v).sum::<f64>()).abs() < 1e-9);
}

#[test]
fn mask_gradient_matches_finite_differences() {
    let stft = small_stft();
    let mix = noise(38, 5);
    let target = noise(38, 6);
    let spec = stft.analyze(&mix).unwrap();
    for domain in [LossDomain::Time, LossDomain::Magnitude] {
        let mask = Tensor::uniform(spec.magnitude.shape(), 0.0, 1.2, &mut rng(7));
        let (_, analytic) = mask_loss_gradient(&mask, &spec, &target, domain, &stft).unwrap();
        let at: Vec<_> = (0..mask.numel()).map(|i| (0, i)).collect();
        let mut params = vec![mask];
        let numeric = finite_differences(&mut params, &at, 1e-5, |p| {
            let mut t = Tape::new();
            let m = t.param(&p[0]);
            let l = compute_loss(&mut t, &m, &spec, &target, domain, &stft)?;
            t.value(l)?.item()
        })
        .unwrap();
        let r = GradCheckReport::new(&analytic, &numeric);
        assert!(r.max_error() < 1e-4, "{domain:?}: {}", r.max_error());
    }
}

#[test]
fn target_longer_than_the_frames_is_rejected() {
    let stft = small_stft();
    let spec = stft.analyze(&noise(38, 8)).unwrap();
    let mask = Tensor::ones(spec.magnitude.shape());
    let long = noise(spec.config.max_len(spec.frames()) + 1, 9);
    assert!(compute_loss(&mut Eager, &mask, &spec, &long, LossDomain::Time, &stft).is_err());
}

fn fixture() -> (tempfile::TempDir, DatasetSplit) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ToyConfig { seconds: 2.0, train_tracks: 2, validation_tracks: 1, test_tracks: 0, ..ToyConfig::default() };
    write_toy_dataset(dir.path(), &cfg).unwrap();
    let opts = DatasetOptions { sources: TOY_SOURCES.map(String::from).to_vec(), ..DatasetOptions::default() };
    let split = scan_dataset(dir.path(), &opts).unwrap();
    (dir, split)
}

fn tiny_model(seed: u64) -> SamsNet<f32> {
    let cfg = ModelConfig { channels: 2, heads: 1, blocks: 1, slices: 1, ..ModelConfig::default() };
    SamsNet::new(cfg, &mut rng(seed)).unwrap()
}

fn train_cfg(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        adam: AdamConfig { lr, ..AdamConfig::default() },
        excerpt_seconds: 1.0,
        max_epochs: epochs,
        patience: 100,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let (_dir, split) = fixture();
    let model = tiny_model(12);
    let report = train_source(model.clone(), "tonal", &split, &train_cfg(0.0, 3), None, 0).unwrap();
    assert_eq!(report.steps, 6);
    assert_eq!(report.best.model, model);
    assert_eq!(report.probe_before, report.probe_after);
}

#[test]
fn seeded_runs_repeat_exactly() {
    let (_dir, split) = fixture();
    let a = train_source(tiny_model(13), "noise", &split, &train_cfg(1e-2, 3), None, 0).unwrap();
    let b = train_source(tiny_model(13), "noise", &split, &train_cfg(1e-2, 3), None, 0).unwrap();
    let losses = |r: &samsnet::train::TrainReport| r.epochs.iter().map(|e| (e.train_loss, e.validation_loss)).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.best, b.best);
    assert_ne!(a.best.model, tiny_model(13));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (_dir, split) = fixture();
    let out = tempfile::tempdir().unwrap();
    for lr in [0.0, 1e-2] {
        let full = train_source(tiny_model(14), "tonal", &split, &train_cfg(lr, 4), None, 0).unwrap();
        let cfg = TrainConfig { checkpoint_dir: Some(out.path().to_path_buf()), patience: 100, ..train_cfg(lr, 2) };
        let first = train_source(tiny_model(14), "tonal", &split, &cfg, None, 0).unwrap();
        let ck = load_checkpoint(out.path().join("tonal.last.ckpt")).unwrap();
        assert_eq!(ck, first.last);
        assert_eq!(ck.epoch, 2);
        let second =
            train_source(ck.model.clone(), "tonal", &split, &train_cfg(lr, 4), ck.optimizer.clone(), ck.epoch).unwrap();
        let tail: Vec<_> = full.epochs[2..].iter().map(|e| (e.train_loss, e.validation_loss)).collect();
        let resumed: Vec<_> = second.epochs.iter().map(|e| (e.train_loss, e.validation_loss)).collect();
        assert_eq!(tail, resumed, "lr {lr}");
        assert_eq!(full.last, second.last, "lr {lr}");
    }
}

#[test]
fn early_stopping_keeps_the_best_checkpoint_and_logs_each_epoch() {
    let (_dir, split) = fixture();
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { patience: 2, checkpoint_dir: Some(out.path().to_path_buf()), ..train_cfg(0.0, 50) };
    let r = train_source(tiny_model(15), "noise", &split, &cfg, None, 0).unwrap();
    // lr 0 never improves on the initial validation loss
    assert_eq!(r.epochs.len(), 2);
    assert_eq!(r.best.epoch, 0);
    let saved = load_checkpoint(out.path().join("noise.ckpt")).unwrap();
    assert_eq!(saved, r.best);
    assert_eq!(saved.label, "noise");
    let log = std::fs::read_to_string(out.path().join("noise.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().next().unwrap().starts_with("1 "));
}

#[test]
fn missing_validation_split_is_rejected() {
    let (_dir, mut split) = fixture();
    split.validation.clear();
    let err = train_source(tiny_model(16), "tonal", &split, &train_cfg(1e-3, 1), None, 0).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    let bad = TrainConfig { patience: 0, ..train_cfg(1e-3, 1) };
    assert!(train_source(tiny_model(16), "tonal", &fixture().1, &bad, None, 0).is_err());
}
