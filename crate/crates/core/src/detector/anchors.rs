//! Default boxes, center-size box encoding and box overlap.

use serde::{Deserialize, Serialize};

use super::DetectorError;
use crate::geometry::BBox;

/// Decoded log-scale offsets are capped here so extreme network outputs stay finite.
const MAX_LOG_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    pub min_scale: f64,
    pub max_scale: f64,
    pub aspect_ratios: Vec<f64>,
    /// Adds a ratio-1 box at `sqrt(s_k * s_{k+1})` per location.
    pub extra_box: bool,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            min_scale: 0.2,
            max_scale: 0.9,
            aspect_ratios: vec![1.0, 2.0, 0.5],
            extra_box: true,
        }
    }
}

impl AnchorConfig {
    pub fn boxes_per_location(&self) -> usize {
        self.aspect_ratios.len() + self.extra_box as usize
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale && self.max_scale <= 1.0) {
            return Err(DetectorError::Config(format!(
                "anchor scales must satisfy 0 < min <= max <= 1, got {} and {}",
                self.min_scale, self.max_scale
            )));
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(DetectorError::Config(
                "anchor aspect ratios must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }
}

/// One default box in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn to_bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Position of an anchor in the head outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorLocation {
    pub level: usize,
    pub y: usize,
    pub x: usize,
    pub b: usize,
}

/// All default boxes, flattened in `(level, y, x, box)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub image_size: u32,
    pub level_sizes: Vec<usize>,
    pub boxes_per_location: usize,
    pub anchors: Vec<Anchor>,
    /// Index of the first anchor of every level, plus the total as a final entry.
    pub level_offsets: Vec<usize>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn index(&self, loc: AnchorLocation) -> usize {
        let s = self.level_sizes[loc.level];
        self.level_offsets[loc.level] + (loc.y * s + loc.x) * self.boxes_per_location + loc.b
    }

    pub fn locate(&self, index: usize) -> AnchorLocation {
        assert!(index < self.len(), "anchor index {index} out of range");
        let level = self.level_offsets.partition_point(|&o| o <= index) - 1;
        let local = index - self.level_offsets[level];
        let n = self.boxes_per_location;
        let s = self.level_sizes[level];
        AnchorLocation {
            level,
            y: local / n / s,
            x: local / n % s,
            b: local % n,
        }
    }
}

/// Builds the SSD-style default boxes for square `image_size` inputs and square feature grids.
pub fn build_anchors(
    image_size: u32,
    level_sizes: &[usize],
    cfg: &AnchorConfig,
) -> Result<AnchorSet, DetectorError> {
    cfg.validate()?;
    if level_sizes.is_empty() || level_sizes.contains(&0) || image_size == 0 {
        return Err(DetectorError::Config(
            "anchors need a positive image size and non-empty positive level sizes".into(),
        ));
    }
    let m = level_sizes.len();
    let scale = |k: usize| -> f64 {
        if k >= m {
            1.0
        } else if m == 1 {
            cfg.min_scale
        } else {
            cfg.min_scale + (cfg.max_scale - cfg.min_scale) * k as f64 / (m - 1) as f64
        }
    };
    let size = image_size as f64;
    let n = cfg.boxes_per_location();
    let mut anchors = Vec::new();
    let mut level_offsets = Vec::with_capacity(m + 1);
    for (k, &grid) in level_sizes.iter().enumerate() {
        level_offsets.push(anchors.len());
        let s = scale(k);
        let mut shapes: Vec<(f64, f64)> = cfg
            .aspect_ratios
            .iter()
            .map(|&r| (s * r.sqrt(), s / r.sqrt()))
            .collect();
        if cfg.extra_box {
            let s2 = (s * scale(k + 1)).sqrt();
            shapes.push((s2, s2));
        }
        for y in 0..grid {
            for x in 0..grid {
                let cx = (x as f64 + 0.5) / grid as f64 * size;
                let cy = (y as f64 + 0.5) / grid as f64 * size;
                for &(sw, sh) in &shapes {
                    anchors.push(Anchor {
                        cx,
                        cy,
                        w: (sw * size).min(size),
                        h: (sh * size).min(size),
                    });
                }
            }
        }
    }
    level_offsets.push(anchors.len());
    Ok(AnchorSet {
        image_size,
        level_sizes: level_sizes.to_vec(),
        boxes_per_location: n,
        anchors,
        level_offsets,
    })
}

/// Center-size offsets of `gt` relative to `anchor` (no variance scaling).
pub fn encode_box(gt: &BBox, anchor: &Anchor) -> Result<[f64; 4], DetectorError> {
    if !(gt.width() > 0.0 && gt.height() > 0.0) {
        return Err(DetectorError::InvalidBox(*gt));
    }
    let (cx, cy) = gt.center();
    Ok([
        (cx - anchor.cx) / anchor.w,
        (cy - anchor.cy) / anchor.h,
        (gt.width() / anchor.w).ln(),
        (gt.height() / anchor.h).ln(),
    ])
}

pub fn decode_box(offsets: &[f64; 4], anchor: &Anchor) -> BBox {
    let cx = anchor.cx + offsets[0] * anchor.w;
    let cy = anchor.cy + offsets[1] * anchor.h;
    let w = anchor.w * offsets[2].min(MAX_LOG_SCALE).exp();
    let h = anchor.h * offsets[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Intersection over union of half-open boxes; 0 if either box is degenerate.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}
