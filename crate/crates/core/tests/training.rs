use glagan::generator::{Generator, ModelConfig};
use glagan::losses::LossWeights;
use glagan::nn::{Mode, Module, Tensor};
use glagan::phantom::{drop_pets, generate_in_space, PhantomSpace, PhantomSpec};
use glagan::training::*;
use glagan::{Error, PairedSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn space16() -> PhantomSpace {
    PhantomSpace::new(&PhantomSpec { shape: [16; 3], r: 8, ..Default::default() }).unwrap()
}

fn model16() -> ModelConfig {
    ModelConfig { resolution: [16; 3], k_patches: 2, gen_width: 2, disc_width: 2, seed: 5, ..Default::default() }
}

fn data(space: &PhantomSpace, n: usize) -> Vec<PairedSample> {
    generate_in_space(space, n, 0.5).unwrap()
}

#[test]
fn one_epoch_smoke_writes_checkpoints_and_log() {
    let space = space16();
    let d = data(&space, 4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    let out = train(&d, &[], &space.atlas, &model16(), &cfg, Some(dir.path())).unwrap();
    assert_eq!(out.log.epochs.len(), 1);
    let row = out.log.epochs[0];
    for v in [row.d_loss, row.g_adv, row.l1, row.ms_ssim, row.roi, row.combined, row.val_l1] {
        assert!(v.is_finite());
    }
    let csv = std::fs::read_to_string(dir.path().join("loss_log.csv")).unwrap();
    assert!(csv.starts_with("epoch,d_loss,g_adv,l1,ms_ssim,roi,combined,val_l1\n1,"));
    let loaded = Checkpoint::load(dir.path().join("final.safetensors")).unwrap();
    assert_eq!(loaded, out.last);
    assert_eq!(loaded.epoch, 1);
    assert!(dir.path().join("best.safetensors").is_file());
}

#[test]
fn l1_only_training_descends() {
    let space = space16();
    let d = data(&space, 16);
    let weights = LossWeights { adversarial: 0.0, perceptual: 0.0, l1: 100.0, roi: 0.0 };
    let cfg = TrainConfig { epochs: 20, learning_rate: 1e-3, beta1: 0.5, weights, ..Default::default() };
    let out = train(&d, &[], &space.atlas, &model16(), &cfg, None).unwrap();
    let l1: Vec<f64> = out.log.epochs.iter().map(|e| e.l1).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(mean(&l1[15..]) < mean(&l1[..5]), "{l1:?}");
    for w in 5..=15 {
        assert!(mean(&l1[w..w + 5]) <= mean(&l1[w - 5..w]) + 1e-9, "trailing mean rose at epoch {w}: {l1:?}");
    }
    assert!(out.log.epochs.iter().all(|e| e.ms_ssim == 0.0 && e.roi == 0.0));
}

#[test]
fn fixed_seed_repeats_first_epoch_exactly() {
    let space = space16();
    let d = data(&space, 6);
    let cfg = TrainConfig { epochs: 1, batch_size: 3, seed: 11, ..Default::default() };
    let a = train(&d, &d[..2], &space.atlas, &model16(), &cfg, None).unwrap();
    let b = train(&d, &d[..2], &space.atlas, &model16(), &cfg, None).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.last, b.last);
}

#[test]
fn diverging_run_names_the_failure() {
    let space = space16();
    let d = data(&space, 4);
    let cfg = TrainConfig { epochs: 2, batch_size: 2, learning_rate: 1e30, ..Default::default() };
    match train(&d, &[], &space.atlas, &model16(), &cfg, None) {
        Err(Error::NonFiniteLoss { term, batch, .. }) => {
            assert!(!term.is_empty());
            assert!(batch <= 1);
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let space = space16();
    let mut d = data(&space, 2);
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    assert!(matches!(
        train(&d, &[], &space.atlas, &ModelConfig { resolution: [32; 3], ..model16() }, &cfg, None),
        Err(Error::ResolutionMismatch { .. })
    ));
    assert!(train(&d, &[], &space.atlas, &model16(), &TrainConfig { batch_size: 0, ..cfg.clone() }, None).is_err());
    d[0].pet = None;
    assert!(matches!(train(&d, &[], &space.atlas, &model16(), &cfg, None), Err(Error::Dataset(_))));
}

#[test]
fn completing_the_incomplete_cohort() {
    let space = space16();
    let ckpt = Checkpoint::new(&model16()).unwrap();
    let mut d = generate_in_space(&space, 581, 0.4).unwrap();
    assert_eq!(synthesize_missing(&d, &ckpt).unwrap(), d);
    drop_pets(&mut d, 179, 3).unwrap();
    let done = synthesize_missing(&d, &ckpt).unwrap();
    let mut synthesized = 0;
    for (before, after) in d.iter().zip(&done) {
        let pet = after.pet.as_ref().unwrap();
        match &before.pet {
            Some(p) => assert_eq!(p, pet),
            None => {
                synthesized += 1;
                assert!(pet.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }
    assert_eq!(synthesized, 179);
    let other = Checkpoint::new(&ModelConfig { resolution: [32; 3], ..model16() }).unwrap();
    assert!(matches!(synthesize_missing(&d, &other), Err(Error::ResolutionMismatch { .. })));
}

#[test]
fn generator_parameter_gradients_match_finite_differences() {
    let cfg = ModelConfig { init_std: 0.3, ..model16() };
    let mut g = Generator::<f64>::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let len = 2 * 16 * 16 * 16;
    let x = Tensor::from_vec(2, 1, [16; 3], (0..len).map(|_| rng.random::<f64>()).collect());
    let c: Vec<f64> = (0..len).map(|_| rng.random::<f64>() - 0.5).collect();
    let objective = |g: &Generator<f64>| -> f64 {
        let (y, _) = g.forward_batch(&x, Mode::Train);
        y.data.iter().zip(&c).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = g.forward_batch(&x, Mode::Train);
    g.zero_grad();
    g.backward(cache.unwrap(), &Tensor::from_vec(2, 1, [16; 3], c.clone()));
    let n_params = g.params_mut().len();
    let mut checked = 0;
    for p in (0..n_params).step_by(n_params / 12 + 1) {
        let size = g.params_mut()[p].value.len();
        let idx = rng.random_range(0..size);
        let analytic = g.params_mut()[p].grad[idx];
        let h = 1e-6;
        let orig = g.params_mut()[p].value[idx];
        g.params_mut()[p].value[idx] = orig + h;
        let up = objective(&g);
        g.params_mut()[p].value[idx] = orig - h;
        let down = objective(&g);
        g.params_mut()[p].value[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        // Conv biases ahead of batch norm have an exactly zero gradient.
        let scale = analytic.abs().max(numeric.abs());
        assert!((analytic - numeric).abs() < 1e-4 * scale + 1e-6, "param {p}[{idx}]: {analytic} vs {numeric}");
        checked += 1;
    }
    assert!(checked >= 10);
}
