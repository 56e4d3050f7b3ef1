//! Orthogonal slice images and signed error maps.

use std::path::Path;

use clap::ValueEnum;
use glagan::{Error, Result, Volume};
use image::{DynamicImage, GrayImage, Luma, Rgb, RgbImage};
use serde::Serialize;

/// Half-width of the error color scale.
pub const ERROR_RANGE: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    /// Fixed third axis.
    Axial,
    /// Fixed second axis.
    Coronal,
    /// Fixed first axis.
    Sagittal,
}

impl Plane {
    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }

    fn axis(self) -> usize {
        match self {
            Plane::Axial => 2,
            Plane::Coronal => 1,
            Plane::Sagittal => 0,
        }
    }
}

/// A 2D cut, row-major with the superior / anterior side on top.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

pub fn extract(v: &Volume, plane: Plane, index: Option<usize>) -> Result<Slice> {
    let [d0, d1, d2] = v.shape();
    let depth = v.shape()[plane.axis()];
    let at = index.unwrap_or(depth / 2);
    if at >= depth {
        return Err(Error::InvalidConfig(format!("slice {at} outside 0..{depth} of the {} axis", plane.name())));
    }
    let (width, height) = match plane {
        Plane::Axial => (d0, d1),
        Plane::Coronal => (d0, d2),
        Plane::Sagittal => (d1, d2),
    };
    let mut values = Vec::with_capacity(width * height);
    for row in 0..height {
        let up = height - 1 - row;
        for col in 0..width {
            values.push(match plane {
                Plane::Axial => v.get(col, up, at),
                Plane::Coronal => v.get(col, at, up),
                Plane::Sagittal => v.get(at, col, up),
            });
        }
    }
    Ok(Slice { width, height, values })
}

fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Intensities in [0, 1] as gray levels, each voxel drawn as a `scale`² block.
pub fn gray_image(s: &Slice, scale: u32) -> GrayImage {
    GrayImage::from_fn(s.width as u32 * scale, s.height as u32 * scale, |x, y| {
        Luma([to_u8(s.values[(y / scale) as usize * s.width + (x / scale) as usize])])
    })
}

/// Blue through white to red over [−range, range]; zero is white.
pub fn diverging(e: f32, range: f32) -> Rgb<u8> {
    let t = (e / range).clamp(-1.0, 1.0);
    let fade = to_u8(1.0 - t.abs());
    if t < 0.0 {
        Rgb([fade, fade, 255])
    } else {
        Rgb([255, fade, fade])
    }
}

/// Signed difference `volume − reference` of two cuts.
pub fn error_image(s: &Slice, reference: &Slice, scale: u32) -> Result<RgbImage> {
    if (s.width, s.height) != (reference.width, reference.height) {
        return Err(Error::InvalidShape(format!(
            "slices differ: {}x{} vs {}x{}",
            s.width, s.height, reference.width, reference.height
        )));
    }
    Ok(RgbImage::from_fn(s.width as u32 * scale, s.height as u32 * scale, |x, y| {
        let i = (y / scale) as usize * s.width + (x / scale) as usize;
        diverging(s.values[i] - reference.values[i], ERROR_RANGE)
    }))
}

pub fn save_png(img: impl Into<DynamicImage>, path: &Path) -> Result<()> {
    img.into()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Unwritable { path: path.to_path_buf(), reason: e.to_string() })
}
