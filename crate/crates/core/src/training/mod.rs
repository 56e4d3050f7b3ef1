//! Alternating adversarial training, cross-validation splits, checkpoints and dataset completion.

mod checkpoint;
mod folds;

use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use folds::{kfold_split, FoldSplit};

use crate::atlas::AtlasLabelMap;
use crate::dataset::PairedSample;
use crate::error::{Error, Result};
use crate::generator::ModelConfig;
use crate::losses::{
    adversarial_loss, combined_loss, d_loss_grad, g_loss_grad, l1_with_grad, ms_ssim_with_grad, roi_with_grad,
    ssim_with_grad, LossComponents, LossWeights, MsSsimConfig, Perceptual, SsimConfig,
};
use crate::nn::{Adam, AdamConfig, Mode, Module, Tensor};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// First-moment decay of Adam.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub weights: LossWeights,
    pub perceptual: Perceptual,
    pub ssim: SsimConfig,
    pub ms_ssim: MsSsimConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 2e-5,
            beta1: 0.1,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            weights: LossWeights::default(),
            perceptual: Perceptual::MsSsim,
            ssim: SsimConfig::default(),
            ms_ssim: MsSsimConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam decays must lie in [0, 1) and eps must be positive".into());
        }
        self.weights.validate()?;
        self.ssim.validate()?;
        self.ms_ssim.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// Per-epoch means of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub l1: f64,
    /// Perceptual term `1 − score`, whichever structural score is configured.
    pub ms_ssim: f64,
    pub roi: f64,
    pub combined: f64,
    pub val_l1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub epochs: Vec<EpochLog>,
}

impl LossLog {
    pub const HEADER: &'static str = "epoch,d_loss,g_adv,l1,ms_ssim,roi,combined,val_l1";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.epoch, e.d_loss, e.g_adv, e.l1, e.ms_ssim, e.roi, e.combined, e.val_l1
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::Unwritable { path: path.to_path_buf(), reason: e.to_string() })?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Checkpoint of the epoch with the lowest validation L1.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub log: LossLog,
}

fn check_samples(samples: &[PairedSample], cfg: &ModelConfig) -> Result<()> {
    for s in samples {
        let pet = s.pet.as_ref().ok_or_else(|| Error::Dataset(format!("subject {} has no PET", s.subject_id)))?;
        for v in [&s.mri, pet] {
            if v.shape() != cfg.resolution {
                return Err(Error::ResolutionMismatch { expected: cfg.resolution, found: v.shape() });
            }
        }
    }
    Ok(())
}

fn finite(value: f64, term: &'static str, epoch: usize, batch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term, epoch, batch })
    }
}

/// Perceptual loss `1 − score` and its gradient w.r.t. `y_hat`.
fn perceptual_with_grad(y: &Volume, y_hat: &Volume, cfg: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    let (score, grad) = match cfg.perceptual {
        Perceptual::MsSsim => ms_ssim_with_grad(y_hat, y, &cfg.ms_ssim, true)?,
        Perceptual::Ssim => ssim_with_grad(y_hat, y, &cfg.ssim, true)?,
    };
    Ok((1.0 - score, grad.unwrap().into_iter().map(|g| -g).collect()))
}

/// Mean generator L1 over `samples` in inference mode.
pub fn mean_l1(ckpt: &Checkpoint, samples: &[PairedSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let pet = s.pet.as_ref().ok_or_else(|| Error::Dataset(format!("subject {} has no PET", s.subject_id)))?;
        total += crate::losses::l1_loss(pet, &ckpt.generator.forward(&s.mri)?)?;
    }
    Ok(total / samples.len() as f64)
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    atlas: &'a AtlasLabelMap,
    ckpt: Checkpoint,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
}

impl Trainer<'_> {
    /// One discriminator step followed by one generator step.
    fn step(&mut self, batch: &[&PairedSample], epoch: usize, index: usize) -> Result<(f64, LossComponents)> {
        let w = self.cfg.weights;
        let n = batch.len();
        let x = Tensor::<f32>::from_volumes(batch.iter().map(|s| &s.mri));
        let pets: Vec<&Volume> = batch.iter().map(|s| s.pet.as_ref().unwrap()).collect();
        let real = Tensor::<f32>::from_volumes(pets.iter().copied());

        let (fake, cache) = self.ckpt.generator.forward_batch(&x, Mode::Train);
        if !fake.is_finite() {
            return Err(Error::NonFiniteLoss { term: "generator output", epoch, batch: index });
        }
        let cache = cache.expect("training mode keeps caches");
        let d = &mut self.ckpt.discriminator;

        d.zero_grad();
        let (p_real, c_real) = d.forward_batch(&real, Mode::Train);
        let (p_fake, c_fake) = d.forward_batch(&fake, Mode::Train);
        let to64 = |v: &[f32]| v.iter().map(|&p| p as f64).collect::<Vec<_>>();
        let (p_real, p_fake) = (to64(&p_real), to64(&p_fake));
        let d_loss = finite(adversarial_loss(&p_real, &p_fake)?.d_loss, "d_loss", epoch, index)?;
        let (gr, gf) = d_loss_grad(&p_real, &p_fake);
        let to32 = |v: Vec<f64>| v.into_iter().map(|g| g as f32).collect::<Vec<_>>();
        d.backward(c_real.unwrap(), &to32(gr));
        d.backward(c_fake.unwrap(), &to32(gf));
        self.opt_d.step(d.params_mut());

        let mut grad = vec![0.0f64; fake.data.len()];
        let mut c = LossComponents::default();
        if w.adversarial != 0.0 {
            let (p, cache_d) = d.forward_batch(&fake, Mode::Train);
            let p = to64(&p);
            c.adversarial = finite(adversarial_loss(&p, &p)?.g_loss, "g_adv", epoch, index)?;
            let g_in = d.backward(cache_d.unwrap(), &to32(g_loss_grad(&p).into_iter().map(|g| g * w.adversarial).collect()));
            d.zero_grad();
            grad.iter_mut().zip(&g_in.data).for_each(|(a, &b)| *a += b as f64);
        } else {
            let (p, _) = d.forward_batch(&fake, Mode::Eval);
            c.adversarial = adversarial_loss(&to64(&p), &to64(&p))?.g_loss;
        }

        let s = fake.spatial();
        let inv = 1.0 / n as f64;
        for (i, y) in pets.iter().enumerate() {
            let y_hat = fake.to_volume(i);
            let g = &mut grad[i * s..(i + 1) * s];
            let (l1, gl) = l1_with_grad(y, &y_hat, w.l1 != 0.0)?;
            c.l1 += finite(l1, "l1", epoch, index)? * inv;
            if let Some(gl) = gl {
                g.iter_mut().zip(gl).for_each(|(a, b)| *a += w.l1 * inv * b);
            }
            if w.perceptual != 0.0 {
                let (p, gp) = perceptual_with_grad(y, &y_hat, self.cfg)?;
                c.perceptual += finite(p, "perceptual", epoch, index)? * inv;
                g.iter_mut().zip(gp).for_each(|(a, b)| *a += w.perceptual * inv * b);
            }
            if w.roi != 0.0 {
                let (r, gr) = roi_with_grad(y, &y_hat, self.atlas, true)?;
                c.roi += finite(r, "roi", epoch, index)? * inv;
                g.iter_mut().zip(gr.unwrap()).for_each(|(a, b)| *a += w.roi * inv * b);
            }
        }
        let grad = Tensor::from_vec(fake.n, 1, fake.dims, grad.into_iter().map(|v| v as f32).collect());
        let gen = &mut self.ckpt.generator;
        gen.zero_grad();
        gen.backward(cache, &grad);
        self.opt_g.step(gen.params_mut());
        Ok((d_loss, c))
    }
}

/// Trains a fresh model on `train_set`, tracking the best epoch by mean L1 on `val_set`.
///
/// With an empty `val_set` the epoch's training L1 stands in for the validation L1. When
/// `out_dir` is given, `final.safetensors`, `best.safetensors` and `loss_log.csv` are written
/// there.
pub fn train(
    train_set: &[PairedSample],
    val_set: &[PairedSample],
    atlas: &AtlasLabelMap,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    check_samples(train_set, model)?;
    check_samples(val_set, model)?;
    if atlas.shape() != model.resolution {
        return Err(Error::ResolutionMismatch { expected: model.resolution, found: atlas.shape() });
    }
    let mut trainer = Trainer {
        cfg,
        atlas,
        ckpt: Checkpoint::new(model)?,
        opt_g: Adam::new(cfg.adam()),
        opt_d: Adam::new(cfg.adam()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = LossLog::default();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 6];
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (index, chunk) in batches.iter().enumerate() {
            let batch: Vec<&PairedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (d_loss, c) = trainer.step(&batch, epoch, index)?;
            let combined = finite(combined_loss(&c, &cfg.weights), "combined", epoch, index)?;
            for (s, v) in sums.iter_mut().zip([d_loss, c.adversarial, c.l1, c.perceptual, c.roi, combined]) {
                *s += v;
            }
        }
        let m = batches.len() as f64;
        trainer.ckpt.epoch = epoch;
        let val_l1 = if val_set.is_empty() { sums[2] / m } else { mean_l1(&trainer.ckpt, val_set)? };
        let row = EpochLog {
            epoch,
            d_loss: sums[0] / m,
            g_adv: sums[1] / m,
            l1: sums[2] / m,
            ms_ssim: sums[3] / m,
            roi: sums[4] / m,
            combined: sums[5] / m,
            val_l1,
        };
        info!(
            "epoch {epoch}: d {:.4} adv {:.4} l1 {:.5} perceptual {:.4} roi {:.6} combined {:.4} val_l1 {:.5}",
            row.d_loss, row.g_adv, row.l1, row.ms_ssim, row.roi, row.combined, row.val_l1
        );
        log.epochs.push(row);
        trainer.ckpt.generator.zero_grad();
        trainer.ckpt.discriminator.zero_grad();
        if best.as_ref().is_none_or(|(b, _, _)| val_l1 < *b) {
            best = Some((val_l1, epoch, trainer.ckpt.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    let outcome = TrainOutcome { last: trainer.ckpt, best, best_epoch, log };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        outcome.last.save(dir.join("final.safetensors"))?;
        outcome.best.save(dir.join("best.safetensors"))?;
        outcome.log.write_csv(dir.join("loss_log.csv"))?;
    }
    Ok(outcome)
}

/// Fills in every missing PET with the generator's synthesis; existing PETs are kept.
pub fn synthesize_missing(samples: &[PairedSample], ckpt: &Checkpoint) -> Result<Vec<PairedSample>> {
    let res = ckpt.config().resolution;
    samples
        .iter()
        .map(|s| {
            if s.mri.shape() != res {
                return Err(Error::ResolutionMismatch { expected: res, found: s.mri.shape() });
            }
            let mut out = s.clone();
            if out.pet.is_none() {
                out.pet = Some(ckpt.generator.forward(&s.mri)?);
            }
            Ok(out)
        })
        .collect()
}
