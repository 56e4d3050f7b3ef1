//! Volume data model, intensity normalization and disjoint patch tiling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along the three spatial axes.
pub type Shape = [usize; 3];

/// Number of voxels in a grid of the given shape.
pub fn voxel_count(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2]
}

/// Row-major linear offset of voxel `(i, j, k)`.
#[inline]
pub fn linear_index(shape: Shape, i: usize, j: usize, k: usize) -> usize {
    (i * shape[1] + j) * shape[2] + k
}

/// A 3D scalar intensity grid with voxel spacing metadata.
///
/// Data is stored row-major: the last axis varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    shape: Shape,
    spacing: [f32; 3],
}

impl Volume {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        Self::with_spacing(shape, data, [1.0; 3])
    }

    pub fn with_spacing(shape: Shape, data: Vec<f32>, spacing: [f32; 3]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!("axis of length zero in {shape:?}")));
        }
        if data.len() != voxel_count(shape) {
            return Err(Error::InvalidShape(format!(
                "{} values do not fill a {:?} grid",
                data.len(),
                shape
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {pos} holds {}", data[pos])));
        }
        Ok(Self { data, shape, spacing })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        assert!(shape.iter().all(|&n| n > 0), "shape components must be >= 1");
        Self { data: vec![value; voxel_count(shape)], shape, spacing: [1.0; 3] }
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(voxel_count(shape));
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(shape, data).expect("from_fn produced an invalid volume")
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn set_spacing(&mut self, spacing: [f32; 3]) {
        self.spacing = spacing;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[linear_index(self.shape, i, j, k)]
    }

    /// Applies `f` voxel-wise, keeping shape and spacing.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::with_spacing(self.shape, self.data.iter().map(|&v| f(v)).collect(), self.spacing)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Voxel data widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn ensure_same_shape(&self, other: &Volume) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { expected: self.shape, found: other.shape });
        }
        Ok(())
    }
}

/// Min-max rescale to `[0, 1]`.
///
/// Constant volumes map to all zeros. The map is monotone, so intensity order is preserved.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let (lo, hi) = v.min_max();
    let range = hi as f64 - lo as f64;
    let data = if range > 0.0 {
        v.data
            .iter()
            .map(|&x| (((x as f64 - lo as f64) / range) as f32).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; v.len()]
    };
    Volume { data, shape: v.shape, spacing: v.spacing }
}

/// Disjoint tiling of a volume into `k` equally sized patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    k: usize,
    splits: [usize; 3],
}

impl PatchGrid {
    /// Canonical factorization: 1 → (1,1,1), 2 → (2,1,1), 4 → (2,2,1), 8 → (2,2,2).
    pub fn new(k: usize) -> Result<Self> {
        let splits = match k {
            1 => [1, 1, 1],
            2 => [2, 1, 1],
            4 => [2, 2, 1],
            8 => [2, 2, 2],
            other => return Err(Error::InvalidConfig(format!("patch count {other} not in {{1, 2, 4, 8}}"))),
        };
        Ok(Self { k, splits })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn splits(&self) -> [usize; 3] {
        self.splits
    }

    /// Per-patch shape for a full volume of `shape`.
    pub fn patch_shape(&self, shape: Shape) -> Result<Shape> {
        let mut out = [0; 3];
        for axis in 0..3 {
            if !shape[axis].is_multiple_of(self.splits[axis]) {
                return Err(Error::IndivisibleShape { shape, splits: self.splits });
            }
            out[axis] = shape[axis] / self.splits[axis];
        }
        Ok(out)
    }

    /// Voxel origin of patch `index` in row-major grid order.
    pub fn patch_origin(&self, index: usize, patch_shape: Shape) -> [usize; 3] {
        let s = self.splits;
        let a = index / (s[1] * s[2]);
        let b = (index / s[2]) % s[1];
        let c = index % s[2];
        [a * patch_shape[0], b * patch_shape[1], c * patch_shape[2]]
    }
}

/// Copies the box `origin .. origin + sub` of a `shape`-grid into a new buffer.
pub(crate) fn extract_box<T: Copy>(data: &[T], shape: Shape, origin: [usize; 3], sub: Shape) -> Vec<T> {
    let mut out = Vec::with_capacity(voxel_count(sub));
    for i in 0..sub[0] {
        for j in 0..sub[1] {
            let start = linear_index(shape, origin[0] + i, origin[1] + j, origin[2]);
            out.extend_from_slice(&data[start..start + sub[2]]);
        }
    }
    out
}

/// Writes a `sub`-shaped buffer into the box at `origin` of a `shape`-grid.
pub(crate) fn insert_box<T: Copy>(dst: &mut [T], shape: Shape, origin: [usize; 3], sub: Shape, src: &[T]) {
    for i in 0..sub[0] {
        for j in 0..sub[1] {
            let start = linear_index(shape, origin[0] + i, origin[1] + j, origin[2]);
            let s = (i * sub[1] + j) * sub[2];
            dst[start..start + sub[2]].copy_from_slice(&src[s..s + sub[2]]);
        }
    }
}

/// Splits `v` into `grid.k()` disjoint patches in row-major grid order.
pub fn tile_patches(v: &Volume, grid: &PatchGrid) -> Result<Vec<Volume>> {
    let patch_shape = grid.patch_shape(v.shape)?;
    Ok((0..grid.k)
        .map(|index| {
            let origin = grid.patch_origin(index, patch_shape);
            Volume {
                data: extract_box(&v.data, v.shape, origin, patch_shape),
                shape: patch_shape,
                spacing: v.spacing,
            }
        })
        .collect())
}

/// Exact inverse of [`tile_patches`].
pub fn fuse_patches(patches: &[Volume], grid: &PatchGrid) -> Result<Volume> {
    if patches.len() != grid.k {
        return Err(Error::PatchCount { expected: grid.k, found: patches.len() });
    }
    let patch_shape = patches[0].shape;
    if let Some(bad) = patches.iter().find(|p| p.shape != patch_shape) {
        return Err(Error::ShapeMismatch { expected: patch_shape, found: bad.shape });
    }
    let s = grid.splits;
    let shape = [patch_shape[0] * s[0], patch_shape[1] * s[1], patch_shape[2] * s[2]];
    let mut data = vec![0.0; voxel_count(shape)];
    for (index, patch) in patches.iter().enumerate() {
        insert_box(&mut data, shape, grid.patch_origin(index, patch_shape), patch_shape, &patch.data);
    }
    Ok(Volume { data, shape, spacing: patches[0].spacing })
}
