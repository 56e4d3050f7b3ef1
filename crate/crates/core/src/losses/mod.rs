//! Objective terms for training. Every differentiable term also returns its gradient with
//! respect to the predicted volume (or, for the adversarial term, the predicted probabilities).

mod ssim;

use log::warn;
use serde::{Deserialize, Serialize};

pub use ssim::{
    ms_ssim, ms_ssim_loss, ms_ssim_with_grad, scale_shapes, ssim, ssim_with_grad, MsSsimConfig, SsimConfig,
};

use crate::atlas::AtlasLabelMap;
use crate::error::{Error, Result};
use crate::volume::Volume;

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

fn same_shape(y: &Volume, y_hat: &Volume) -> Result<()> {
    if y.shape() != y_hat.shape() {
        return Err(Error::ShapeMismatch { expected: y.shape(), found: y_hat.shape() });
    }
    Ok(())
}

/// Mean absolute voxel difference.
pub fn l1_loss(y: &Volume, y_hat: &Volume) -> Result<f64> {
    Ok(l1_with_grad(y, y_hat, false)?.0)
}

/// L1 loss and its (sub)gradient w.r.t. `y_hat`; the gradient is 0 where the volumes agree.
pub fn l1_with_grad(y: &Volume, y_hat: &Volume, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    same_shape(y, y_hat)?;
    let n = y.len() as f64;
    let diffs = y_hat.data().iter().zip(y.data()).map(|(&p, &t)| p as f64 - t as f64);
    let loss = diffs.clone().map(f64::abs).sum::<f64>() / n;
    let grad = want_grad.then(|| diffs.map(|d| if d == 0.0 { 0.0 } else { d.signum() / n }).collect());
    Ok((loss, grad))
}

/// Mean over regions of the squared per-region mean difference `y − y_hat`.
pub fn roi_loss(y: &Volume, y_hat: &Volume, atlas: &AtlasLabelMap) -> Result<f64> {
    Ok(roi_with_grad(y, y_hat, atlas, false)?.0)
}

/// ROI loss and its gradient w.r.t. `y_hat`. Empty regions are left out of the average.
pub fn roi_with_grad(
    y: &Volume,
    y_hat: &Volume,
    atlas: &AtlasLabelMap,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    same_shape(y, y_hat)?;
    atlas.ensure_matches(y)?;
    let diff: Vec<f64> = y.data().iter().zip(y_hat.data()).map(|(&t, &p)| t as f64 - p as f64).collect();
    let means = atlas.region_means(&diff);
    let sizes = atlas.region_sizes();
    let empty = means.iter().filter(|m| m.is_none()).count();
    if empty > 0 {
        warn!("ROI loss: {empty} empty region(s) excluded from the average");
    }
    let present = means.len() - empty;
    if present == 0 {
        return Err(Error::InvalidConfig("atlas has no nonempty region".into()));
    }
    let r = present as f64;
    let loss = means.iter().flatten().map(|d| d * d).sum::<f64>() / r;
    let grad = want_grad.then(|| {
        // d/dŷ of d_r² is −2 d_r / N_r on every voxel of region r.
        let coef: Vec<f64> = means
            .iter()
            .zip(&sizes)
            .map(|(m, &n)| m.map_or(0.0, |d| -2.0 * d / (n as f64 * r)))
            .collect();
        atlas.labels().iter().map(|&l| if l == 0 { 0.0 } else { coef[l as usize - 1] }).collect()
    });
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialLoss {
    pub d_loss: f64,
    pub g_loss: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Discriminator loss `−mean log D(real) − mean log(1 − D(fake))` and the
/// non-saturating generator loss `−mean log D(fake)`.
pub fn adversarial_loss(d_real: &[f64], d_fake: &[f64]) -> Result<AdversarialLoss> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::InvalidConfig("adversarial loss needs nonempty batches".into()));
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&p| f(clamp_prob(p))).sum::<f64>() / v.len() as f64;
    let d_loss = -mean(d_real, &|p| p.ln()) - mean(d_fake, &|p| (1.0 - p).ln());
    let g_loss = -mean(d_fake, &|p| p.ln());
    Ok(AdversarialLoss { d_loss, g_loss })
}

/// Gradients of the discriminator loss w.r.t. `(d_real, d_fake)`.
pub fn d_loss_grad(d_real: &[f64], d_fake: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (nr, nf) = (d_real.len() as f64, d_fake.len() as f64);
    (
        d_real.iter().map(|&p| -1.0 / (nr * clamp_prob(p))).collect(),
        d_fake.iter().map(|&p| 1.0 / (nf * (1.0 - clamp_prob(p)))).collect(),
    )
}

/// Gradient of the generator loss w.r.t. `d_fake`.
pub fn g_loss_grad(d_fake: &[f64]) -> Vec<f64> {
    let n = d_fake.len() as f64;
    d_fake.iter().map(|&p| -1.0 / (n * clamp_prob(p))).collect()
}

/// Weights of the four generator objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub adversarial: f64,
    pub perceptual: f64,
    pub l1: f64,
    pub roi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adversarial: 1.0, perceptual: 10.0, l1: 100.0, roi: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.adversarial, self.perceptual, self.l1, self.roi];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidConfig("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self {
            adversarial: self.adversarial * factor,
            perceptual: self.perceptual * factor,
            l1: self.l1 * factor,
            roi: self.roi * factor,
        }
    }
}

/// Values of the individual generator loss terms. `perceptual` is `1 − score` of the
/// configured structural similarity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub adversarial: f64,
    pub perceptual: f64,
    pub l1: f64,
    pub roi: f64,
}

/// Weighted sum of the generator loss terms.
pub fn combined_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.adversarial * c.adversarial + w.perceptual * c.perceptual + w.l1 * c.l1 + w.roi * c.roi
}

/// Structural term used as the perceptual loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Perceptual {
    #[default]
    MsSsim,
    Ssim,
}

/// Named loss-term combinations used for ablations; each keeps the default weights of its
/// active terms and zeroes the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    L1,
    L1Ssim,
    L1MsSsim,
    L1SsimRoi,
    L1MsSsimRoi,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Self::L1, Self::L1Ssim, Self::L1MsSsim, Self::L1SsimRoi, Self::L1MsSsimRoi];

    /// Weights and perceptual term for this variant, starting from `base`.
    pub fn apply(self, base: LossWeights) -> (LossWeights, Perceptual) {
        let (perceptual, roi, kind) = match self {
            Self::L1 => (false, false, Perceptual::MsSsim),
            Self::L1Ssim => (true, false, Perceptual::Ssim),
            Self::L1MsSsim => (true, false, Perceptual::MsSsim),
            Self::L1SsimRoi => (true, true, Perceptual::Ssim),
            Self::L1MsSsimRoi => (true, true, Perceptual::MsSsim),
        };
        let w = LossWeights {
            perceptual: if perceptual { base.perceptual } else { 0.0 },
            roi: if roi { base.roi } else { 0.0 },
            ..base
        };
        (w, kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adversarial_plug_in_values() {
        let a = adversarial_loss(&[0.5], &[0.5]).unwrap();
        assert!((a.d_loss - 2.0 * 2f64.ln()).abs() < 1e-12);
        let perfect = adversarial_loss(&[1.0], &[0.0]).unwrap();
        assert!(perfect.d_loss < 1e-6 && perfect.d_loss.is_finite());
        assert!(perfect.g_loss.is_finite());
    }

    #[test]
    fn l1_trivial_cases() {
        let z = Volume::zeros([3, 3, 3]);
        let o = Volume::filled([3, 3, 3], 1.0);
        assert_eq!(l1_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(l1_loss(&z, &o).unwrap(), 1.0);
        assert!(l1_loss(&z, &Volume::zeros([3, 3, 2])).is_err());
    }

    #[test]
    fn roi_constant_offset_and_zero_mean_perturbation() {
        let shape = [4, 4, 4];
        let y = Volume::from_fn(shape, |i, j, k| (i + 2 * j + k) as f32 / 10.0);
        let one = AtlasLabelMap::new(vec![1; 64], shape, 1).unwrap();
        let shifted = y.map(|v| v + 0.25).unwrap();
        assert!((roi_loss(&y, &shifted, &one).unwrap() - 0.0625).abs() < 1e-7);
        // Two regions split along i; ±ε alternating along k keeps every region mean unchanged.
        let labels: Vec<u16> = (0..64).map(|idx| if idx / 16 < 2 { 1 } else { 2 }).collect();
        let two = AtlasLabelMap::new(labels, shape, 2).unwrap();
        let wiggled = Volume::from_fn(shape, |i, j, k| y.get(i, j, k) + if k % 2 == 0 { 0.125 } else { -0.125 });
        assert!(roi_loss(&y, &wiggled, &two).unwrap() < 1e-12);
        assert!(l1_loss(&y, &wiggled).unwrap() > 0.1);
    }

    #[test]
    fn empty_regions_are_excluded() {
        let shape = [2, 2, 2];
        let atlas = AtlasLabelMap::new(vec![1; 8], shape, 3).unwrap();
        let y = Volume::zeros(shape);
        let y_hat = Volume::filled(shape, 0.5);
        assert!((roi_loss(&y, &y_hat, &atlas).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn combined_is_linear() {
        let c = LossComponents { adversarial: 0.7, perceptual: 0.2, l1: 0.05, roi: 0.01 };
        let w = LossWeights::default();
        assert!((combined_loss(&c, &w.scaled(2.0)) - 2.0 * combined_loss(&c, &w)).abs() < 1e-12);
        let only_l1 = LossWeights { adversarial: 0.0, perceptual: 0.0, l1: 1.0, roi: 0.0 };
        assert_eq!(combined_loss(&c, &only_l1), 0.05);
        assert!(LossWeights { adversarial: 0.0, perceptual: 0.0, l1: 0.0, roi: 0.0 }.validate().is_err());
    }

    #[test]
    fn ablations_zero_the_expected_terms() {
        let base = LossWeights::default();
        let (w, _) = Ablation::L1.apply(base);
        assert_eq!((w.perceptual, w.roi, w.l1), (0.0, 0.0, 100.0));
        let (w, p) = Ablation::L1SsimRoi.apply(base);
        assert_eq!((w.perceptual, w.roi, p), (10.0, 10.0, Perceptual::Ssim));
    }
}
