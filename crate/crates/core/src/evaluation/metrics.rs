use log::warn;
use serde::{Deserialize, Serialize};

use crate::atlas::{AtlasLabelMap, TissueMasks};
use crate::error::{Error, Result};
use crate::losses::{l1_loss, ms_ssim, ssim, MsSsimConfig, SsimConfig};
use crate::volume::Volume;

/// Mean absolute error; the same number as the L1 loss.
pub fn mae(y: &Volume, y_hat: &Volume) -> Result<f64> {
    l1_loss(y, y_hat)
}

/// Peak signal-to-noise ratio in dB; `+∞` when the volumes are identical.
pub fn psnr(y: &Volume, y_hat: &Volume, max_val: f64) -> Result<f64> {
    y.ensure_same_shape(y_hat)?;
    let mse = y.data().iter().zip(y_hat.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>()
        / y.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Synthesis quality of one predicted volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisMetrics {
    pub ssim: f64,
    pub ms_ssim: f64,
    pub psnr: f64,
    pub mae: f64,
}

pub fn synthesis_metrics(y: &Volume, y_hat: &Volume) -> Result<SynthesisMetrics> {
    Ok(SynthesisMetrics {
        ssim: ssim(y_hat, y, &SsimConfig::default())?,
        ms_ssim: ms_ssim(y_hat, y, &MsSsimConfig::default())?,
        psnr: psnr(y, y_hat, 1.0)?,
        mae: mae(y, y_hat)?,
    })
}

/// Region means in the order `[GM-MRI | WM-MRI | GM-PET | WM-PET]`, each block by region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiFeatureVector {
    pub values: Vec<f64>,
    /// True where the region∩mask cell was empty and the value is a placeholder 0.
    pub empty: Vec<bool>,
}

pub fn roi_features(mri: &Volume, pet: &Volume, atlas: &AtlasLabelMap, masks: &TissueMasks) -> Result<RoiFeatureVector> {
    mri.ensure_same_shape(pet)?;
    atlas.ensure_matches(mri)?;
    if masks.shape() != atlas.shape() {
        return Err(Error::ShapeMismatch { expected: atlas.shape(), found: masks.shape() });
    }
    let r = atlas.r();
    let mut sums = vec![0.0; 4 * r];
    let mut counts = vec![0usize; 4 * r];
    for (idx, &l) in atlas.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let region = l as usize - 1;
        for (tissue, mask) in [masks.gm(), masks.wm()].iter().enumerate() {
            if mask[idx] {
                for (modality, v) in [mri, pet].iter().enumerate() {
                    let cell = (2 * modality + tissue) * r + region;
                    sums[cell] += v.data()[idx] as f64;
                    counts[cell] += 1;
                }
            }
        }
    }
    let empty: Vec<bool> = counts.iter().map(|&c| c == 0).collect();
    let n_empty = empty.iter().filter(|&&e| e).count();
    if n_empty > 0 {
        warn!("{n_empty} empty region/tissue cells in ROI features; set to 0");
    }
    let values = sums.iter().zip(&counts).map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect();
    Ok(RoiFeatureVector { values, empty })
}
