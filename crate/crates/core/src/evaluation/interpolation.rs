use serde::Serialize;

use super::metrics::roi_features;
use super::svm::SvmModel;
use crate::atlas::{AtlasLabelMap, TissueMasks};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterpolationPoint {
    pub alpha: f64,
    #[serde(skip)]
    pub mri: Volume,
    #[serde(skip)]
    pub pet: Volume,
    pub p_normal: f64,
}

/// `(1 − α) x0 + α x1`, exact at both endpoints.
pub fn lerp(x0: &Volume, x1: &Volume, alpha: f64) -> Result<Volume> {
    x0.ensure_same_shape(x1)?;
    let (a, b) = ((1.0 - alpha) as f32, alpha as f32);
    let data = x0.data().iter().zip(x1.data()).map(|(&u, &v)| a * u + b * v).collect();
    Volume::with_spacing(x0.shape(), data, x0.spacing())
}

/// Walks from `x0` (CN) to `x1` (AD) in MRI space in `steps` evenly spaced stops,
/// synthesizing and classifying the PET at each stop.
pub fn interpolation_study(
    x0: &Volume,
    x1: &Volume,
    steps: usize,
    generator: &Generator<f32>,
    classifier: &SvmModel,
    atlas: &AtlasLabelMap,
    masks: &TissueMasks,
) -> Result<Vec<InterpolationPoint>> {
    if steps < 2 {
        return Err(Error::InvalidConfig(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    x0.ensure_same_shape(x1)?;
    (0..steps)
        .map(|i| {
            let alpha = i as f64 / (steps - 1) as f64;
            let mri = lerp(x0, x1, alpha)?;
            let pet = generator.forward(&mri)?;
            let f = roi_features(&mri, &pet, atlas, masks)?;
            Ok(InterpolationPoint { alpha, p_normal: classifier.p_normal(&f.values), mri, pet })
        })
        .collect()
}

/// One volume per channel of global-path layer `layer_id`, at the input resolution.
pub fn dump_activations(generator: &Generator<f32>, x: &Volume, layer_id: &str) -> Result<Vec<Volume>> {
    let t = generator.layer_activations(x, layer_id)?;
    (0..t.c)
        .map(|ch| Volume::with_spacing(t.dims, t.channel(0, ch).to_vec(), x.spacing()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lerp_endpoints_are_exact() {
        let a = Volume::from_fn([3, 3, 3], |i, j, k| (i + 2 * j + 3 * k) as f32 * 0.037);
        let b = Volume::from_fn([3, 3, 3], |i, j, k| (3 * i + j + k) as f32 * 0.051);
        assert_eq!(lerp(&a, &b, 0.0).unwrap(), a);
        assert_eq!(lerp(&a, &b, 1.0).unwrap(), b);
        let mid = lerp(&a, &b, 0.5).unwrap();
        assert!((mid.data()[5] - 0.5 * (a.data()[5] + b.data()[5])).abs() < 1e-7);
    }
}
