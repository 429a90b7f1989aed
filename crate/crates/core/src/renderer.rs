//! Ray-cast rendering of cylindrical shafts over a background image.
//!
//! A shaft is a solid cylinder whose distal end sits at the pose tip. The body extends from the
//! tip backwards along `-d`, where `d` is the axis direction from
//! [`direction_from_angles`](crate::geometry::direction_from_angles), so for the usual pitch range
//! the tip is the far end and the body runs towards the camera and out of the frame.

use image::{GrayImage, Luma, Rgb, RgbImage};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, CameraModel, ShaftPose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("background is {got_w}x{got_h} but the camera expects {want_w}x{want_h}")]
    BackgroundSize {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    MaskSize(u32, u32, u32, u32),
    #[error("mask is empty: no object")]
    EmptyMask,
    #[error("invalid shaft geometry: {0}")]
    InvalidGeometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TipStyle {
    Flat,
    Hemisphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShaftGeometry {
    /// mm
    pub radius: f64,
    /// mm
    pub length: f64,
    pub tip_style: TipStyle,
}

impl Default for ShaftGeometry {
    fn default() -> Self {
        Self {
            radius: 1.75,
            length: 100.0,
            tip_style: TipStyle::Hemisphere,
        }
    }
}

impl ShaftGeometry {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.radius > 0.0) || !(self.length > 0.0) {
            return Err(RenderError::InvalidGeometry(format!(
                "radius {} and length {} must be positive",
                self.radius, self.length
            )));
        }
        if self.tip_style == TipStyle::Hemisphere && self.length <= self.radius {
            return Err(RenderError::InvalidGeometry(
                "a hemispherical tip needs length > radius".into(),
            ));
        }
        Ok(())
    }
}

/// Binary per-pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.data[(y * self.width + x) as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    /// `true` when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Pixels at or above 128 are set.
    pub fn from_gray_image(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p.0[0] >= 128).collect(),
        }
    }

    /// Set pixels with at least one 4-neighbour unset (or on the image border).
    pub fn boundary(&self) -> Mask {
        let mut out = Mask::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x + 1 == self.width
                    || y + 1 == self.height
                    || !self.get(x - 1, y)
                    || !self.get(x + 1, y)
                    || !self.get(x, y - 1)
                    || !self.get(x, y + 1);
                out.set(x, y, edge);
            }
        }
        out
    }
}

/// Output of [`rasterize_shafts`]: the composed image plus one visible mask and box per shaft.
#[derive(Debug, Clone)]
pub struct RenderedSample {
    pub image: RgbImage,
    pub masks: Vec<Mask>,
    pub bboxes: Vec<Option<BBox>>,
}

/// Surface hit: ray parameter and outward unit normal.
#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    normal: Vector3<f64>,
}

/// Solid shaft in camera coordinates.
struct ShaftSolid {
    /// Start of the cylindrical part on the tip side.
    front: Vector3<f64>,
    /// Unit vector from the tip into the body (`-d`).
    axis: Vector3<f64>,
    /// Length of the cylindrical part.
    body_len: f64,
    radius: f64,
    /// Centre of the tip hemisphere, if any.
    sphere: Option<Vector3<f64>>,
}

impl ShaftSolid {
    fn new(pose: &ShaftPose, geom: &ShaftGeometry) -> Self {
        let d = pose.direction();
        let tip = pose.tip();
        let axis = -d;
        match geom.tip_style {
            TipStyle::Flat => Self {
                front: tip,
                axis,
                body_len: geom.length,
                radius: geom.radius,
                sphere: None,
            },
            TipStyle::Hemisphere => {
                let centre = tip + axis * geom.radius;
                Self {
                    front: centre,
                    axis,
                    body_len: geom.length - geom.radius,
                    radius: geom.radius,
                    sphere: Some(centre),
                }
            }
        }
    }

    /// Nearest intersection with `t > 0` of the ray `t * w` from the camera origin.
    fn intersect(&self, w: &Vector3<f64>) -> Option<Hit> {
        const EPS: f64 = 1e-9;
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, normal: Vector3<f64>| {
            if t > EPS && best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, normal });
            }
        };
        let a = self.axis;
        let r2 = self.radius * self.radius;

        // lateral surface
        let q = -self.front;
        let w_perp = w - a * w.dot(&a);
        let q_perp = q - a * q.dot(&a);
        let qa = w_perp.dot(&w_perp);
        let qb = 2.0 * q_perp.dot(&w_perp);
        let qc = q_perp.dot(&q_perp) - r2;
        if qa > 0.0 {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                for t in [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)] {
                    let p = w * t;
                    let s = (p - self.front).dot(&a);
                    if (0.0..=self.body_len).contains(&s) {
                        let radial = (p - self.front) - a * s;
                        consider(t, radial / self.radius);
                    }
                }
            }
        }

        // end caps
        let wa = w.dot(&a);
        if wa.abs() > 1e-15 {
            let back = self.front + a * self.body_len;
            let t = back.dot(&a) / wa;
            if (w * t - back).norm_squared() <= r2 {
                consider(t, a);
            }
            if self.sphere.is_none() {
                let t = self.front.dot(&a) / wa;
                if (w * t - self.front).norm_squared() <= r2 {
                    consider(t, -a);
                }
            }
        }

        // tip hemisphere, the half facing away from the body
        if let Some(c) = self.sphere {
            let sa = w.dot(w);
            let sb = -2.0 * c.dot(w);
            let sc = c.dot(&c) - r2;
            let disc = sb * sb - 4.0 * sa * sc;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                for t in [(-sb - sq) / (2.0 * sa), (-sb + sq) / (2.0 * sa)] {
                    let p = w * t;
                    if (p - c).dot(&a) <= 0.0 {
                        consider(t, (p - c) / self.radius);
                    }
                }
            }
        }
        best
    }

    /// Distance from the camera origin to the solid's axis segment (tip side included).
    fn axis_clearance(&self, tip: &Vector3<f64>) -> f64 {
        let seg = self.axis * (self.body_len + (self.front - tip).norm());
        let s = ((-tip).dot(&seg) / seg.norm_squared()).clamp(0.0, 1.0);
        (tip + seg * s).norm()
    }
}

/// Distance from the camera origin to the shaft's axis segment. Below the radius the lens sits
/// inside the shaft.
pub fn camera_clearance(pose: &ShaftPose, geom: &ShaftGeometry) -> f64 {
    ShaftSolid::new(pose, geom).axis_clearance(&pose.tip())
}

const METAL: [f64; 3] = [150.0, 152.0, 160.0];
const AMBIENT: f64 = 0.12;
const SPECULAR_EXPONENT: i32 = 32;
const SPECULAR_STRENGTH: f64 = 0.85;

/// Lambertian plus Phong specular with the light at the camera origin.
fn shade(hit: &Hit, w: &Vector3<f64>, light_intensity: f64) -> Rgb<u8> {
    let to_cam = -w.normalize();
    let mut n = hit.normal;
    if n.dot(&to_cam) < 0.0 {
        n = -n;
    }
    let ndl = n.dot(&to_cam).max(0.0);
    // reflection of the headlight direction, compared with the view direction (the same vector)
    let rdv = (2.0 * ndl * ndl - 1.0).max(0.0);
    let spec = SPECULAR_STRENGTH * rdv.powi(SPECULAR_EXPONENT) * light_intensity;
    let mut px = [0u8; 3];
    for (c, out) in px.iter_mut().enumerate() {
        let v = METAL[c] * (AMBIENT + (1.0 - AMBIENT) * ndl * light_intensity) + 255.0 * spec;
        *out = v.round().clamp(0.0, 255.0) as u8;
    }
    Rgb(px)
}

/// Renders `poses` over `background`. Where shafts overlap the nearest hit wins, so the returned
/// masks are the visible parts and are pairwise disjoint.
pub fn rasterize_shafts(
    camera: &CameraModel,
    poses: &[ShaftPose],
    geom: &ShaftGeometry,
    light_intensity: f64,
    background: &RgbImage,
) -> Result<RenderedSample, RenderError> {
    if background.width() != camera.width || background.height() != camera.height {
        return Err(RenderError::BackgroundSize {
            got_w: background.width(),
            got_h: background.height(),
            want_w: camera.width,
            want_h: camera.height,
        });
    }
    let solids: Vec<ShaftSolid> = poses.iter().map(|p| ShaftSolid::new(p, geom)).collect();
    let mut image = background.clone();
    let mut masks = vec![Mask::new(camera.width, camera.height); poses.len()];
    for row in 0..camera.height {
        for col in 0..camera.width {
            let w = camera.pixel_ray(col, row);
            let nearest = solids
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.intersect(&w).map(|h| (i, h)))
                .fold(None, |acc: Option<(usize, Hit)>, (i, h)| match acc {
                    Some((_, b)) if b.t <= h.t => acc,
                    _ => Some((i, h)),
                });
            if let Some((i, hit)) = nearest {
                masks[i].set(col, row, true);
                image.put_pixel(col, row, shade(&hit, &w, light_intensity));
            }
        }
    }
    let bboxes = masks.iter().map(|m| mask_to_bbox(m).ok()).collect();
    Ok(RenderedSample {
        image,
        masks,
        bboxes,
    })
}

/// Single-shaft convenience wrapper around [`rasterize_shafts`].
pub fn rasterize_shaft(
    camera: &CameraModel,
    pose: &ShaftPose,
    geom: &ShaftGeometry,
    light_intensity: f64,
    background: &RgbImage,
) -> Result<RenderedSample, RenderError> {
    rasterize_shafts(
        camera,
        std::slice::from_ref(pose),
        geom,
        light_intensity,
        background,
    )
}

/// Silhouette of a single shaft, ignoring any other object in the scene.
pub fn render_silhouette(camera: &CameraModel, pose: &ShaftPose, geom: &ShaftGeometry) -> Mask {
    let solid = ShaftSolid::new(pose, geom);
    let mut mask = Mask::new(camera.width, camera.height);
    for row in 0..camera.height {
        for col in 0..camera.width {
            if solid.intersect(&camera.pixel_ray(col, row)).is_some() {
                mask.set(col, row, true);
            }
        }
    }
    mask
}

/// Visible part of each shaft when all of `poses` are in the scene (nearest hit wins).
pub fn render_visible_silhouettes(
    camera: &CameraModel,
    poses: &[ShaftPose],
    geom: &ShaftGeometry,
) -> Vec<Mask> {
    let solids: Vec<ShaftSolid> = poses.iter().map(|p| ShaftSolid::new(p, geom)).collect();
    let mut masks = vec![Mask::new(camera.width, camera.height); poses.len()];
    for row in 0..camera.height {
        for col in 0..camera.width {
            let w = camera.pixel_ray(col, row);
            let mut best: Option<(usize, f64)> = None;
            for (i, s) in solids.iter().enumerate() {
                if let Some(h) = s.intersect(&w) {
                    if best.is_none_or(|(_, t)| h.t < t) {
                        best = Some((i, h.t));
                    }
                }
            }
            if let Some((i, _)) = best {
                masks[i].set(col, row, true);
            }
        }
    }
    masks
}

/// Tight half-open box around the set pixels.
pub fn mask_to_bbox(mask: &Mask) -> Result<BBox, RenderError> {
    let mut x_min = u32::MAX;
    let mut y_min = u32::MAX;
    let mut x_max = 0;
    let mut y_max = 0;
    let mut any = false;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                any = true;
                x_min = x_min.min(x);
                y_min = y_min.min(y);
                x_max = x_max.max(x);
                y_max = y_max.max(y);
            }
        }
    }
    if !any {
        return Err(RenderError::EmptyMask);
    }
    Ok(BBox::new(
        x_min as f64,
        y_min as f64,
        (x_max + 1) as f64,
        (y_max + 1) as f64,
    ))
}

/// `|a ∧ b| / |a ∨ b|`. Two empty masks are treated as identical (IoU 1).
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, RenderError> {
    if a.width != b.width || a.height != b.height {
        return Err(RenderError::MaskSize(a.width, a.height, b.width, b.height));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
