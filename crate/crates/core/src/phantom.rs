//! Deterministic synthetic MRI/PET pairs with a known ground-truth mapping.
//!
//! Every subject shares one atlas space: a centered ellipsoidal brain split into `r`
//! Voronoi regions, with a gray-matter shell around a white-matter core. The MRI is a
//! tissue template textured with random Gaussian blobs and noise. The PET is
//! [`ground_truth_pet`] of the MRI: a Gaussian blur followed by a per-region gain, with
//! hypometabolism subtracted from the AD-sensitive regions of AD subjects.
//!
//! AD subjects also show mild atrophy in those regions of the MRI, so the diagnosis is
//! recoverable from MRI alone, as it must be for synthesized PET to carry it.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::atlas::{AtlasLabelMap, TissueMasks};
use crate::dataset::{Label, PairedSample};
use crate::error::{Error, Result};
use crate::volume::{linear_index, normalize_intensity, voxel_count, Shape, Volume};

/// Fraction of the half-extent covered by the brain ellipsoid along each axis.
const BRAIN_EXTENT: f64 = 0.84;
/// Normalized ellipsoid radius separating white-matter core and gray-matter shell.
const WM_RADIUS: f64 = 0.7;
const WM_INTENSITY: f64 = 0.8;
const GM_INTENSITY: f64 = 0.5;
/// MRI atrophy relative to the PET class effect.
const ATROPHY_RATIO: f64 = 0.5;
const PET_BLUR_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: Shape,
    /// Atlas region count.
    pub r: usize,
    /// Texture blobs per MRI.
    pub n_blobs: usize,
    /// PET hypometabolism in AD-sensitive regions of AD subjects.
    pub class_effect: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self { shape: [32; 3], r: 16, n_blobs: 12, class_effect: 0.3, noise_sigma: 0.02, seed: 0 }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d < 8) {
            return Err(Error::InvalidConfig(format!("phantom axes must be at least 8, got {:?}", self.shape)));
        }
        if self.r == 0 {
            return Err(Error::InvalidConfig("phantom atlas needs at least one region".into()));
        }
        if !(self.class_effect.is_finite() && self.class_effect >= 0.0) {
            return Err(Error::InvalidConfig(format!("class_effect must be finite and >= 0, got {}", self.class_effect)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th subject generated from `spec`.
pub fn sample_seed(spec: &PhantomSpec, index: usize) -> u64 {
    mix_seed(spec.seed, index as u64 + 1)
}

fn radius(shape: Shape, i: usize, j: usize, k: usize) -> f64 {
    [i, j, k]
        .iter()
        .zip(shape)
        .map(|(&p, d)| {
            let c = (d as f64 - 1.0) / 2.0;
            let a = BRAIN_EXTENT * d as f64 / 2.0;
            ((p as f64 - c) / a).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Atlas and tissue masks for `spec`; depends only on `shape`, `r` and `seed`.
pub fn synthetic_atlas(spec: &PhantomSpec) -> Result<(AtlasLabelMap, TissueMasks)> {
    spec.validate()?;
    let shape = spec.shape;
    let n = voxel_count(shape);
    let mut brain = Vec::new();
    let mut gm = vec![false; n];
    let mut wm = vec![false; n];
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let rho = radius(shape, i, j, k);
                let idx = linear_index(shape, i, j, k);
                if rho <= 1.0 {
                    brain.push([i, j, k]);
                    if rho <= WM_RADIUS {
                        wm[idx] = true;
                    } else {
                        gm[idx] = true;
                    }
                }
            }
        }
    }
    if spec.r > brain.len() {
        return Err(Error::InvalidConfig(format!("{} regions exceed the {} brain voxels", spec.r, brain.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xa71a5));
    let sites: Vec<[usize; 3]> = brain.choose_multiple(&mut rng, spec.r).copied().collect();
    let mut labels = vec![0u16; n];
    for p in &brain {
        let d2 = |s: &[usize; 3]| (0..3).map(|a| (p[a] as f64 - s[a] as f64).powi(2)).sum::<f64>();
        // Strict comparison keeps the lowest-index site on ties.
        let mut best = 0;
        let mut best_d = d2(&sites[0]);
        for (r, s) in sites.iter().enumerate().skip(1) {
            let d = d2(s);
            if d < best_d {
                best = r;
                best_d = d;
            }
        }
        labels[linear_index(shape, p[0], p[1], p[2])] = best as u16 + 1;
    }
    Ok((AtlasLabelMap::new(labels, shape, spec.r)?, TissueMasks::new(gm, wm, shape)?))
}

/// Regions `1..=ceil(r / 4)` carry the disease effect.
pub fn ad_sensitive_regions(r: usize) -> Vec<u16> {
    (1..=r.div_ceil(4) as u16).collect()
}

/// Per-region PET gain in `[0.5, 1]`; index 0 is region 1.
pub fn region_gains(spec: &PhantomSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x6a1e));
    (0..spec.r).map(|_| rng.random_range(0.5..=1.0)).collect()
}

/// Separable Gaussian blur with zero padding and unchanged shape.
pub fn gaussian_blur(v: &[f64], shape: Shape, sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-half..=half).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.into_iter().map(|t| t / total).collect();
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut cur = v.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = (idx / strides[axis] % shape[axis]) as isize;
            let mut acc = 0.0;
            for (t, w) in taps.iter().enumerate() {
                let q = pos + t as isize - half;
                if q >= 0 && q < shape[axis] as isize {
                    acc += w * cur[(idx as isize + (q - pos) * strides[axis] as isize) as usize];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// The known MRI → PET mapping: blur, per-region gain (zero outside the brain), an
/// additive deficit of `class_effect` in AD-sensitive regions for AD, clamp at zero,
/// then min-max normalization.
pub fn ground_truth_pet(mri: &Volume, atlas: &AtlasLabelMap, gains: &[f64], label: Label, class_effect: f64) -> Result<Volume> {
    atlas.ensure_matches(mri)?;
    let blurred = gaussian_blur(&mri.to_f64(), mri.shape(), PET_BLUR_SIGMA);
    let sensitive = ad_sensitive_regions(atlas.r());
    let data = blurred
        .iter()
        .zip(atlas.labels())
        .map(|(&b, &l)| {
            if l == 0 {
                return 0.0;
            }
            let mut v = gains[l as usize - 1] * b;
            if label == Label::Ad && sensitive.contains(&l) {
                v -= class_effect;
            }
            v.max(0.0) as f32
        })
        .collect();
    Ok(normalize_intensity(&Volume::new(mri.shape(), data)?))
}

fn synthesize_mri(spec: &PhantomSpec, atlas: &AtlasLabelMap, masks: &TissueMasks, seed: u64, label: Label) -> Result<Volume> {
    let shape = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = masks
        .gm()
        .iter()
        .zip(masks.wm())
        .map(|(&g, &w)| if w { WM_INTENSITY } else if g { GM_INTENSITY } else { 0.0 })
        .collect();
    let brain: Vec<usize> = atlas.labels().iter().enumerate().filter(|(_, &l)| l > 0).map(|(i, _)| i).collect();
    let min_dim = *shape.iter().min().unwrap() as f64;
    for _ in 0..spec.n_blobs {
        let centre = brain[rng.random_range(0..brain.len())];
        let c = [centre / (shape[1] * shape[2]), centre / shape[2] % shape[1], centre % shape[2]];
        let amp = rng.random_range(-0.2..=0.2);
        let sigma = min_dim * rng.random_range(0.06..=0.12);
        for &idx in &brain {
            let p = [idx / (shape[1] * shape[2]), idx / shape[2] % shape[1], idx % shape[2]];
            let d2: f64 = (0..3).map(|a| (p[a] as f64 - c[a] as f64).powi(2)).sum();
            v[idx] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    if label == Label::Ad {
        let sensitive = ad_sensitive_regions(atlas.r());
        for (x, l) in v.iter_mut().zip(atlas.labels()) {
            if sensitive.contains(l) {
                *x -= ATROPHY_RATIO * spec.class_effect;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        v.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
    }
    let data = v.into_iter().map(|x| x.max(0.0) as f32).collect();
    Ok(normalize_intensity(&Volume::new(shape, data)?))
}

/// Shared atlas space, reused for every subject of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpace {
    pub spec: PhantomSpec,
    pub atlas: AtlasLabelMap,
    pub masks: TissueMasks,
    pub gains: Vec<f64>,
}

impl PhantomSpace {
    pub fn new(spec: &PhantomSpec) -> Result<Self> {
        let (atlas, masks) = synthetic_atlas(spec)?;
        Ok(Self { spec: spec.clone(), atlas, masks, gains: region_gains(spec) })
    }

    /// One subject from texture seed `seed`.
    pub fn pair(&self, subject_id: impl Into<String>, seed: u64, label: Label) -> Result<PairedSample> {
        let mri = synthesize_mri(&self.spec, &self.atlas, &self.masks, seed, label)?;
        let pet = ground_truth_pet(&mri, &self.atlas, &self.gains, label, self.spec.class_effect)?;
        PairedSample::new(subject_id, label, mri, Some(pet))
    }

    /// The ground-truth mapping bound to this space.
    pub fn pet_for(&self, mri: &Volume, label: Label) -> Result<Volume> {
        ground_truth_pet(mri, &self.atlas, &self.gains, label, self.spec.class_effect)
    }
}

/// A single pair whose texture is seeded by `spec.seed`.
pub fn generate_phantom_pair(spec: &PhantomSpec, label: Label) -> Result<PairedSample> {
    PhantomSpace::new(spec)?.pair("sub-0000", spec.seed, label)
}

/// `round(n · ad_fraction)` AD subjects and the rest CN, in a seeded order. Subject `i`
/// is `sub-{i:04}` with texture seed [`sample_seed`]`(spec, i)`.
pub fn generate_dataset(n: usize, ad_fraction: f64, spec: &PhantomSpec) -> Result<Vec<PairedSample>> {
    let space = PhantomSpace::new(spec)?;
    generate_in_space(&space, n, ad_fraction)
}

pub fn generate_in_space(space: &PhantomSpace, n: usize, ad_fraction: f64) -> Result<Vec<PairedSample>> {
    let labels = dataset_labels(&space.spec, n, ad_fraction)?;
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| space.pair(format!("sub-{i:04}"), sample_seed(&space.spec, i), label))
        .collect()
}

/// Label sequence used by [`generate_dataset`].
pub fn dataset_labels(spec: &PhantomSpec, n: usize, ad_fraction: f64) -> Result<Vec<Label>> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset needs at least one sample".into()));
    }
    if !(0.0..=1.0).contains(&ad_fraction) {
        return Err(Error::InvalidConfig(format!("ad_fraction must lie in [0, 1], got {ad_fraction}")));
    }
    let n_ad = (n as f64 * ad_fraction).round() as usize;
    let mut labels: Vec<Label> = (0..n).map(|i| if i < n_ad { Label::Ad } else { Label::Cn }).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x1abe1)));
    Ok(labels)
}

/// Removes the PET of `missing` subjects chosen with `seed`, leaving MRI-only samples.
pub fn drop_pets(samples: &mut [PairedSample], missing: usize, seed: u64) -> Result<()> {
    if missing > samples.len() {
        return Err(Error::InvalidConfig(format!("cannot drop {missing} PETs from {} samples", samples.len())));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for &i in &order[..missing] {
        samples[i].pet = None;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec { shape: [16, 16, 16], r: 8, ..Default::default() }
    }

    #[test]
    fn single_region_covers_the_brain() {
        let (atlas, masks) = synthetic_atlas(&PhantomSpec { r: 1, ..small() }).unwrap();
        let brain = masks.gm().iter().zip(masks.wm()).filter(|(g, w)| **g || **w).count();
        assert_eq!(atlas.region_sizes(), vec![brain]);
    }

    #[test]
    fn regions_partition_the_ellipsoid() {
        let spec = PhantomSpec { r: 16, ..Default::default() };
        let (atlas, masks) = synthetic_atlas(&spec).unwrap();
        assert!(atlas.region_sizes().iter().all(|&n| n > 0));
        for (i, &l) in atlas.labels().iter().enumerate() {
            assert_eq!(l > 0, masks.gm()[i] || masks.wm()[i]);
        }
        assert_eq!(synthetic_atlas(&spec).unwrap().0, atlas);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(synthetic_atlas(&PhantomSpec { shape: [4, 16, 16], ..small() }).is_err());
        assert!(synthetic_atlas(&PhantomSpec { r: 1_000_000, ..small() }).is_err());
        assert!(PhantomSpec { class_effect: f64::NAN, ..small() }.validate().is_err());
    }

    #[test]
    fn no_class_effect_means_identical_pairs() {
        let spec = PhantomSpec { class_effect: 0.0, ..small() };
        let cn = generate_phantom_pair(&spec, Label::Cn).unwrap();
        let ad = generate_phantom_pair(&spec, Label::Ad).unwrap();
        assert_eq!(cn.pet, ad.pet);
        assert_eq!(cn.mri, ad.mri);
    }

    #[test]
    fn noiseless_pairs_repeat_bit_exactly() {
        let spec = PhantomSpec { noise_sigma: 0.0, ..small() };
        assert_eq!(generate_phantom_pair(&spec, Label::Ad).unwrap(), generate_phantom_pair(&spec, Label::Ad).unwrap());
    }

    #[test]
    fn outputs_are_normalized() {
        let s = generate_phantom_pair(&small(), Label::Ad).unwrap();
        for v in [&s.mri, s.pet.as_ref().unwrap()] {
            let (lo, hi) = v.min_max();
            assert!(lo >= 0.0 && hi <= 1.0 && hi > 0.5);
        }
    }

    #[test]
    fn dataset_counts_and_reproducibility() {
        let spec = small();
        let d = generate_dataset(10, 0.4, &spec).unwrap();
        assert_eq!(d.iter().filter(|s| s.label == Label::Ad).count(), 4);
        assert_eq!(d[3].subject_id, "sub-0003");
        assert_eq!(d, generate_dataset(10, 0.4, &spec).unwrap());
        assert_ne!(d[0].mri, d[1].mri);
        let labels = dataset_labels(&spec, 402, 161.0 / 402.0).unwrap();
        assert_eq!(labels.iter().filter(|l| **l == Label::Ad).count(), 161);
    }

    #[test]
    fn drop_pets_leaves_mri_only_subjects() {
        let mut d = generate_dataset(6, 0.5, &small()).unwrap();
        drop_pets(&mut d, 2, 1).unwrap();
        assert_eq!(d.iter().filter(|s| s.pet.is_none()).count(), 2);
    }

    #[test]
    fn ad_regions_show_the_hypometabolism() {
        let space = PhantomSpace::new(&PhantomSpec::default()).unwrap();
        let cn = space.pair("a", 3, Label::Cn).unwrap();
        let ad = space.pair("a", 3, Label::Ad).unwrap();
        let means = |v: &Volume| space.atlas.region_means(&v.to_f64());
        let (mc, ma) = (means(cn.pet.as_ref().unwrap()), means(ad.pet.as_ref().unwrap()));
        for r in ad_sensitive_regions(16) {
            let i = r as usize - 1;
            assert!(mc[i].unwrap() - ma[i].unwrap() >= 0.15, "region {r}");
        }
        let (mc, ma) = (means(&cn.mri), means(&ad.mri));
        assert!(mc[0].unwrap() > ma[0].unwrap());
        assert!((mc[15].unwrap() - ma[15].unwrap()).abs() < 1e-9);
    }

    #[test]
    fn blur_preserves_constants_in_the_interior() {
        let shape = [9, 9, 9];
        let b = gaussian_blur(&vec![1.0; 729], shape, 1.0);
        assert!((b[linear_index(shape, 4, 4, 4)] - 1.0).abs() < 1e-12);
        assert!(b[0] < 1.0);
    }
}
