//! Region label maps and tissue masks shared by the loss and feature code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Shape, Volume};

/// Integer parcellation: 0 is background, regions are `1..=r`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtlasLabelMap {
    labels: Vec<u16>,
    shape: Shape,
    r: usize,
}

impl AtlasLabelMap {
    /// Checks that every label is at most `r`. Empty regions are allowed here; consumers
    /// that average over regions skip them.
    pub fn new(labels: Vec<u16>, shape: Shape, r: usize) -> Result<Self> {
        if labels.len() != voxel_count(shape) {
            return Err(Error::InvalidShape(format!("{} labels for shape {shape:?}", labels.len())));
        }
        if r == 0 {
            return Err(Error::InvalidConfig("atlas needs at least one region".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > r) {
            return Err(Error::InvalidConfig(format!("label {bad} exceeds region count {r}")));
        }
        Ok(Self { labels, shape, r })
    }

    /// Region count taken from the largest label present.
    pub fn from_labels(labels: Vec<u16>, shape: Shape) -> Result<Self> {
        let r = labels.iter().copied().max().unwrap_or(0) as usize;
        Self::new(labels, shape, r)
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// Voxel count per region; index 0 is region 1.
    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.r];
        for &l in &self.labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }

    /// Mean of `values` per region, `None` for empty regions.
    pub fn region_means(&self, values: &[f64]) -> Vec<Option<f64>> {
        assert_eq!(values.len(), self.labels.len(), "values must match the atlas");
        let mut sums = vec![0.0; self.r];
        let mut counts = vec![0usize; self.r];
        for (&l, &v) in self.labels.iter().zip(values) {
            if l > 0 {
                sums[l as usize - 1] += v;
                counts[l as usize - 1] += 1;
            }
        }
        sums.into_iter().zip(counts).map(|(s, n)| (n > 0).then(|| s / n as f64)).collect()
    }

    pub fn ensure_matches(&self, v: &Volume) -> Result<()> {
        if v.shape() != self.shape {
            return Err(Error::ShapeMismatch { expected: self.shape, found: v.shape() });
        }
        Ok(())
    }
}

/// Disjoint binary gray- and white-matter masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TissueMasks {
    gm: Vec<bool>,
    wm: Vec<bool>,
    shape: Shape,
}

impl TissueMasks {
    pub fn new(gm: Vec<bool>, wm: Vec<bool>, shape: Shape) -> Result<Self> {
        let n = voxel_count(shape);
        if gm.len() != n || wm.len() != n {
            return Err(Error::InvalidShape(format!("mask lengths do not match shape {shape:?}")));
        }
        if gm.iter().zip(&wm).any(|(&g, &w)| g && w) {
            return Err(Error::InvalidConfig("gray and white matter masks overlap".into()));
        }
        Ok(Self { gm, wm, shape })
    }

    pub fn gm(&self) -> &[bool] {
        &self.gm
    }

    pub fn wm(&self) -> &[bool] {
        &self.wm
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
}
