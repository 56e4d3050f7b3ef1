//! NIfTI-1 reading and writing for volumes and integer label grids.
//!
//! Intensities are stored as 32-bit floats; label maps as 16-bit integers.

use std::path::Path;

use ndarray::Array3;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};
use crate::volume::{linear_index, Shape, Volume};

fn read_array(path: &Path) -> Result<(NiftiHeader, Vec<f32>, Shape)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let malformed = |reason: String| Error::MalformedHeader { path: path.to_path_buf(), reason };
    let obj = ReaderOptions::new().read_file(path).map_err(|e| match e {
        nifti::NiftiError::Io(source) => Error::io(path, source),
        other => malformed(other.to_string()),
    })?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    if ndim == 0 || ndim > 7 {
        return Err(malformed(format!("dim[0] = {ndim}")));
    }
    // Trailing singleton axes (e.g. a 1-frame 4D file) still count as 3D.
    let extents: Vec<usize> = header.dim[1..=ndim].iter().map(|&d| d as usize).collect();
    let significant = extents.iter().rposition(|&d| d > 1).map_or(1, |p| p + 1);
    if significant > 3 {
        return Err(Error::NonThreeDPayload { path: path.to_path_buf(), dims: ndim });
    }
    let mut shape = [1usize; 3];
    for (axis, &d) in extents.iter().take(3).enumerate() {
        shape[axis] = d;
    }
    let array = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| malformed(e.to_string()))?;
    let mut data = vec![0.0f32; shape.iter().product()];
    let mut index = vec![0usize; array.ndim()];
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                for (slot, v) in index.iter_mut().zip([i, j, k]) {
                    *slot = v;
                }
                data[linear_index(shape, i, j, k)] = array[ndarray::IxDyn(&index)];
            }
        }
    }
    Ok((header, data, shape))
}

/// Reads a 3D NIfTI-1 file (`.nii` or `.nii.gz`) without any normalization.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (header, data, shape) = read_array(path)?;
    let spacing = [header.pixdim[1], header.pixdim[2], header.pixdim[3]];
    let spacing = spacing.map(|s| if s.is_finite() && s > 0.0 { s } else { 1.0 });
    Volume::with_spacing(shape, data, spacing).map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn header_for(spacing: [f32; 3]) -> NiftiHeader {
    NiftiHeader {
        pixdim: [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0],
        // mm units
        xyzt_units: 2,
        ..Default::default()
    }
}

fn to_array<T: Copy>(data: &[T], shape: Shape) -> Array3<T> {
    Array3::from_shape_vec((shape[0], shape[1], shape[2]), data.to_vec()).expect("shape checked by caller")
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(parent) if !parent.as_os_str().is_empty() && !parent.is_dir() => Err(Error::Unwritable {
            path: path.to_path_buf(),
            reason: format!("parent directory {} does not exist", parent.display()),
        }),
        _ => Ok(()),
    }
}

/// Writes `v` as a 32-bit float NIfTI-1 file. A `.gz` suffix selects gzip compression.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let header = header_for(v.spacing());
    nifti::writer::WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&to_array(v.data(), v.shape()))
        .map_err(|e| Error::Unwritable { path: path.to_path_buf(), reason: e.to_string() })
}

/// Writes an integer label grid (atlas or binary mask) as 16-bit integers.
pub fn save_labels(labels: &[u16], shape: Shape, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let data: Vec<i16> = labels
        .iter()
        .map(|&l| i16::try_from(l).map_err(|_| Error::InvalidConfig(format!("label {l} exceeds i16"))))
        .collect::<Result<_>>()?;
    let header = header_for([1.0; 3]);
    nifti::writer::WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&to_array(&data, shape))
        .map_err(|e| Error::Unwritable { path: path.to_path_buf(), reason: e.to_string() })
}

/// Reads an integer label grid written by [`save_labels`].
pub fn load_labels(path: impl AsRef<Path>) -> Result<(Vec<u16>, Shape)> {
    let path = path.as_ref();
    let (_, data, shape) = read_array(path)?;
    let labels = data
        .into_iter()
        .map(|v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u16::MAX as f32 {
                Ok(v as u16)
            } else {
                Err(Error::MalformedHeader { path: path.to_path_buf(), reason: format!("non-label value {v}") })
            }
        })
        .collect::<Result<_>>()?;
    Ok((labels, shape))
}
