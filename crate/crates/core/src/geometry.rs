//! Camera model, pose conventions and pose normalization.
//!
//! Conventions used throughout the crate:
//!
//! * Camera frame: origin at the optical centre, `x` right, `y` down, `z` along the optical axis.
//! * Pitch is measured from the image plane: 90° puts the shaft axis on the optical axis, pointing
//!   away from the camera. Yaw is the azimuth of the axis about the optical axis.
//! * Lengths are millimetres and angles degrees at every public boundary. Radians only appear
//!   inside trigonometric kernels.
//! * Pixel coordinates: origin top-left, pixel centres at integer + 0.5, boxes half-open.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of regressed pose dimensions (x, y, z, pitch, yaw).
pub const POSE_DIM: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is not in front of the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("invalid range for {dimension}: min {min} must be below max {max}")]
    InvalidRange {
        dimension: &'static str,
        min: f64,
        max: f64,
    },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// 5-DOF pose of a shaft tip in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShaftPose {
    /// mm
    pub x: f64,
    /// mm
    pub y: f64,
    /// mm
    pub z: f64,
    /// degrees
    pub pitch: f64,
    /// degrees
    pub yaw: f64,
}

impl ShaftPose {
    pub fn new(x: f64, y: f64, z: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            z,
            pitch,
            yaw,
        }
    }

    pub fn tip(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Unit vector of the shaft axis.
    pub fn direction(&self) -> Vector3<f64> {
        direction_from_angles(self.pitch, self.yaw)
    }

    pub fn to_array(&self) -> [f64; POSE_DIM] {
        [self.x, self.y, self.z, self.pitch, self.yaw]
    }

    pub fn from_array(v: [f64; POSE_DIM]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }
}

/// Closed interval used by the pose sampler and the normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }
}

/// Per-dimension generation ranges; also the reference frame of the `[-1, 1]` pose encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRanges {
    pub x: Range,
    pub y: Range,
    pub z: Range,
    pub pitch: Range,
    pub yaw: Range,
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            x: Range::new(-20.0, 20.0),
            y: Range::new(-20.0, 20.0),
            z: Range::new(10.0, 40.0),
            pitch: Range::new(50.0, 90.0),
            yaw: Range::new(0.0, 358.0),
        }
    }
}

impl PoseRanges {
    pub const NAMES: [&'static str; POSE_DIM] = ["x", "y", "z", "pitch", "yaw"];

    pub fn dims(&self) -> [Range; POSE_DIM] {
        [self.x, self.y, self.z, self.pitch, self.yaw]
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for (name, r) in Self::NAMES.iter().zip(self.dims()) {
            if !(r.min < r.max) {
                return Err(GeometryError::InvalidRange {
                    dimension: name,
                    min: r.min,
                    max: r.max,
                });
            }
        }
        Ok(())
    }

    /// Pose at the centre of every range.
    pub fn midpoint(&self) -> ShaftPose {
        let d = self.dims();
        ShaftPose::new(d[0].mid(), d[1].mid(), d[2].mid(), d[3].mid(), d[4].mid())
    }
}

/// Pose mapped linearly onto `[-1, 1]` per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPose(pub [f64; POSE_DIM]);

/// Pinhole camera without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub width: u32,
    pub height: u32,
    /// degrees
    pub horizontal_fov: f64,
    /// px
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraModel {
    pub const DEFAULT_FOV: f64 = 95.0;

    /// Camera with the principal point at the image centre.
    pub fn new(width: u32, height: u32, horizontal_fov: f64) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera(format!(
                "image size {width}x{height} must be positive"
            )));
        }
        if !(horizontal_fov > 0.0 && horizontal_fov < 180.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "horizontal field of view {horizontal_fov} must lie in (0, 180)"
            )));
        }
        let focal = (width as f64 / 2.0) / (horizontal_fov.to_radians() / 2.0).tan();
        Ok(Self {
            width,
            height,
            horizontal_fov,
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        })
    }

    pub fn with_principal_point(mut self, cx: f64, cy: f64) -> Self {
        self.cx = cx;
        self.cy = cy;
        self
    }

    /// Ray direction (not normalized, `z = 1`) through the centre of pixel `(col, row)`.
    pub fn pixel_ray(&self, col: u32, row: u32) -> Vector3<f64> {
        Vector3::new(
            (col as f64 + 0.5 - self.cx) / self.focal,
            (row as f64 + 0.5 - self.cy) / self.focal,
            1.0,
        )
    }
}

/// Axis-aligned half-open pixel box `[x_min, x_max) x [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn area(&self) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            self.width() * self.height()
        }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }
}

/// Unit shaft-axis direction for the given pitch and yaw (degrees).
pub fn direction_from_angles(pitch: f64, yaw: f64) -> Vector3<f64> {
    let (sp, cp) = pitch.to_radians().sin_cos();
    let (sy, cy) = yaw.to_radians().sin_cos();
    Vector3::new(cp * cy, cp * sy, sp)
}

pub fn project_point(camera: &CameraModel, p: &Vector3<f64>) -> Result<[f64; 2], GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::BehindCamera { z: p.z });
    }
    Ok([
        camera.cx + camera.focal * p.x / p.z,
        camera.cy + camera.focal * p.y / p.z,
    ])
}

pub fn normalize_pose(pose: &ShaftPose, ranges: &PoseRanges) -> NormalizedPose {
    let v = pose.to_array();
    let mut out = [0.0; POSE_DIM];
    for (i, r) in ranges.dims().iter().enumerate() {
        out[i] = 2.0 * (v[i] - r.min) / r.width() - 1.0;
    }
    NormalizedPose(out)
}

pub fn denormalize_pose(v: &NormalizedPose, ranges: &PoseRanges) -> ShaftPose {
    let mut out = [0.0; POSE_DIM];
    for (i, r) in ranges.dims().iter().enumerate() {
        out[i] = r.min + (v.0[i] + 1.0) * 0.5 * r.width();
    }
    ShaftPose::from_array(out)
}

/// Circular distance between two angles in degrees, in `[0, 180]`.
pub fn yaw_error(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}
