//! Depth, color and normal rasters, pinhole camera geometry and the on-disk
//! container formats shared by every stage of the pipeline.

mod geometry;
pub(crate) mod io;

pub use geometry::{backproject, normals_from_depth, reproject};
pub use io::{
    read_depth, read_depth_with_meta, read_normals, read_rgb, sidecar_path, write_depth, write_normals,
    write_rgb, DepthSidecar, Domain,
};

use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};

/// Smallest raster edge accepted anywhere in the pipeline.
pub const MIN_EXTENT: usize = 8;

/// Range image in meters; `0.0` marks a missing measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
    d_max: f32,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>, d_max: f32) -> Result<Self> {
        if width < MIN_EXTENT || height < MIN_EXTENT {
            return Err(DclError::Data(format!(
                "depth map {width}x{height} is smaller than {MIN_EXTENT}x{MIN_EXTENT}"
            )));
        }
        if values.len() != width * height {
            return Err(DclError::Data(format!(
                "depth map {width}x{height} given {} values",
                values.len()
            )));
        }
        if !(d_max.is_finite() && d_max > 0.0) {
            return Err(DclError::Data(format!("d_max must be positive, got {d_max}")));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > d_max) {
            return Err(DclError::Data(format!("depth value {bad} outside [0, {d_max}]")));
        }
        Ok(Self {
            width,
            height,
            values,
            d_max,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32, d_max: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], d_max)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn d_max(&self) -> f32 {
        self.d_max
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.values[v * self.width + u]
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.get(u, v) > 0.0
    }

    /// Fraction of missing pixels.
    pub fn hole_fraction(&self) -> f64 {
        let holes = self.values.iter().filter(|&&v| v == 0.0).count();
        holes as f64 / self.values.len() as f64
    }

    /// Map to `[-1, 1]` via `2 d / d_max - 1`; missing pixels land on `-1`.
    pub fn to_normalized(&self) -> Vec<f32> {
        let s = 2.0 / self.d_max;
        self.values.iter().map(|&d| d * s - 1.0).collect()
    }

    /// Inverse of [`to_normalized`](Self::to_normalized). Values at or below
    /// `hole_threshold` become missing; the rest are clamped into `[0, d_max]`
    /// and snapped to the millimeter storage grid.
    pub fn from_normalized(
        width: usize,
        height: usize,
        normalized: &[f32],
        d_max: f32,
        hole_threshold: f32,
    ) -> Result<Self> {
        let values = normalized
            .iter()
            .map(|&x| {
                if !(x > hole_threshold) {
                    0.0
                } else {
                    quantize_mm(((x + 1.0) * 0.5 * d_max).clamp(0.0, d_max))
                }
            })
            .collect();
        Self::new(width, height, values, d_max)
    }

    /// Copy with every value snapped to the millimeter grid of the container
    /// format.
    pub fn quantized(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| quantize_mm(v)).collect(),
            ..self.clone()
        }
    }
}

/// Round a depth in meters to the nearest millimeter, as stored on disk.
pub fn quantize_mm(meters: f32) -> f32 {
    (meters * 1000.0).round() / 1000.0
}

/// Linear RGB in `[0, 1]`, interleaved per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    values: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, values: Vec<[f32; 3]>) -> Result<Self> {
        if values.len() != width * height {
            return Err(DclError::Data(format!(
                "rgb image {width}x{height} given {} pixels",
                values.len()
            )));
        }
        if values.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(DclError::Data("rgb channel outside [0, 1]".into()));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.values
    }

    /// Rec. 709 luma of linear RGB.
    pub fn luminance(&self, index: usize) -> f32 {
        let [r, g, b] = self.values[index];
        0.2126 * r + 0.7152 * g + 0.0722 * b
    }

    /// Planar `[3, H, W]` layout mapped to `[-1, 1]`.
    pub fn to_normalized_planar(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.values.iter().enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] * 2.0 - 1.0;
            }
        }
        out
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Kinect-like field of view scaled to a `width x height` raster, with the
    /// principal point at the image center.
    pub fn for_resolution(width: usize, height: usize) -> Self {
        let f = 525.0 / 640.0 * width as f64;
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && (0.0..width as f64).contains(&self.cx)
            && (0.0..height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(DclError::Data(format!(
                "intrinsics {self:?} invalid for a {width}x{height} raster"
            )))
        }
    }

    /// Ray through pixel `(u, v)` scaled so its z component is 1.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// Per-pixel unit normals in camera coordinates; the zero vector marks an
/// invalid pixel. Valid normals face the camera (`z <= 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    width: usize,
    height: usize,
    values: Vec<[f32; 3]>,
}

impl NormalMap {
    pub fn new(width: usize, height: usize, values: Vec<[f32; 3]>) -> Result<Self> {
        if values.len() != width * height {
            return Err(DclError::Data(format!(
                "normal map {width}x{height} given {} vectors",
                values.len()
            )));
        }
        for n in &values {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if !len.is_finite() || (len != 0.0 && ((len - 1.0).abs() > 1e-5 || n[2] > 0.0)) {
                return Err(DclError::Data(format!("invalid normal vector {n:?}")));
            }
        }
        Ok(Self { width, height, values })
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![[0.0; 3]; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[[f32; 3]] {
        &self.values
    }

    pub fn get(&self, u: usize, v: usize) -> [f32; 3] {
        self.values[v * self.width + u]
    }

    pub fn is_valid(&self, index: usize) -> bool {
        self.values[index] != [0.0; 3]
    }

    /// Planar `[3, H, W]` layout.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, v) in self.values.iter().enumerate() {
            for c in 0..3 {
                out[c * n + i] = v[c];
            }
        }
        out
    }

    /// Unit vector scaled to length 1 and flipped to face the camera; the
    /// zero vector stays invalid.
    pub fn orient(n: [f64; 3]) -> [f32; 3] {
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if !(len > 1e-12) || !len.is_finite() {
            return [0.0; 3];
        }
        let s = if n[2] > 0.0 { -1.0 / len } else { 1.0 / len };
        let v = [(n[0] * s) as f32, (n[1] * s) as f32, (n[2] * s) as f32];
        // f32 rounding of a tiny positive z would break the facing invariant
        [v[0], v[1], v[2].min(0.0)]
    }
}

/// Camera-frame points in meters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
