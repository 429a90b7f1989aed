//! Synthetic, automatically annotated training data: pose sampling, procedural backgrounds,
//! photometric augmentation and the on-disk dataset format.
//!
//! Every record is a pure function of `(global_seed, index, config)`, so any single record can be
//! regenerated without touching the others.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, CameraModel, GeometryError, PoseRanges, ShaftPose};
use crate::renderer::{
    camera_clearance, rasterize_shafts, Mask, RenderError, RenderedSample, ShaftGeometry,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("record {index}: no valid sample after {retries} attempts; check pose ranges and camera")]
    RetriesExhausted { index: u64, retries: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path} line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path} line {line}: schema version {found}, expected {expected}")]
    SchemaVersion {
        path: PathBuf,
        line: usize,
        found: u32,
        expected: u32,
    },
    #[error("record {index} references missing file {path}")]
    MissingFile { index: u64, path: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Photometric augmentation. Hue is in degrees; saturation, brightness and contrast are relative
/// half-widths (0.2 means a factor drawn from [0.8, 1.2]); noise is on the 0-255 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub hue: f64,
    pub saturation: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_amplitude: f64,
    pub noise_probability: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            hue: 8.0,
            saturation: 0.2,
            brightness: 0.2,
            contrast: 0.2,
            noise_amplitude: 10.0,
            noise_probability: 0.5,
        }
    }
}

impl AugmentationConfig {
    /// Leaves images untouched.
    pub fn identity() -> Self {
        Self {
            hue: 0.0,
            saturation: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            noise_amplitude: 0.0,
            noise_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let widths = [
            ("hue", self.hue),
            ("saturation", self.saturation),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("noise_amplitude", self.noise_amplitude),
        ];
        for (name, v) in widths {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DatagenError::Config(format!(
                    "augmentation {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.saturation > 1.0 || self.brightness > 1.0 || self.contrast > 1.0 {
            return Err(DatagenError::Config(
                "relative jitter half-widths must not exceed 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_probability) {
            return Err(DatagenError::Config(format!(
                "noise_probability must lie in [0, 1], got {}",
                self.noise_probability
            )));
        }
        Ok(())
    }
}

/// HSV jitter applied to procedural backgrounds so a small pool of base fields yields many
/// distinct-looking scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundJitter {
    pub hue: f64,
    pub saturation: f64,
    pub brightness: f64,
}

impl Default for BackgroundJitter {
    fn default() -> Self {
        Self {
            hue: 12.0,
            saturation: 0.25,
            brightness: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub width: u32,
    pub height: u32,
    /// degrees
    pub horizontal_fov: f64,
    pub ranges: PoseRanges,
    pub shaft: ShaftGeometry,
    pub two_shaft_probability: f64,
    pub fraction_pose_stripped: f64,
    pub light_min: f64,
    pub light_max: f64,
    /// Number of distinct base background fields.
    pub background_pool: u64,
    pub background_jitter: BackgroundJitter,
    /// Minimum distance (mm) between the lens and the shaft surface.
    pub clearance_margin: f64,
    /// A shaft must cover at least this many visible pixels.
    pub min_visible_pixels: usize,
    pub max_retries: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            horizontal_fov: CameraModel::DEFAULT_FOV,
            ranges: PoseRanges::default(),
            shaft: ShaftGeometry::default(),
            two_shaft_probability: 0.5,
            fraction_pose_stripped: 0.0,
            light_min: 0.6,
            light_max: 1.0,
            background_pool: 64,
            background_jitter: BackgroundJitter::default(),
            clearance_margin: 3.0,
            min_visible_pixels: 20,
            max_retries: 200,
        }
    }
}

impl GenerationConfig {
    pub fn camera(&self) -> Result<CameraModel, GeometryError> {
        CameraModel::new(self.width, self.height, self.horizontal_fov)
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        self.camera()?;
        self.ranges.validate()?;
        self.shaft.validate()?;
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(DatagenError::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        prob("two_shaft_probability", self.two_shaft_probability)?;
        prob("fraction_pose_stripped", self.fraction_pose_stripped)?;
        if !(self.light_min > 0.0 && self.light_min <= self.light_max) {
            return Err(DatagenError::Config(format!(
                "light range [{}, {}] must be positive and ordered",
                self.light_min, self.light_max
            )));
        }
        if self.background_pool == 0 || self.max_retries == 0 {
            return Err(DatagenError::Config(
                "background_pool and max_retries must be positive".into(),
            ));
        }
        if !(self.clearance_margin >= 0.0) {
            return Err(DatagenError::Config("clearance_margin must be >= 0".into()));
        }
        Ok(())
    }
}

/// Annotation of one shaft. `pose` is absent on pose-stripped records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShaftAnnotation {
    pub bbox: BBox,
    pub pose: Option<ShaftPose>,
    /// Mask path relative to the dataset directory.
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub schema_version: u32,
    pub index: u64,
    pub seed: u64,
    /// Image path relative to the dataset directory.
    pub image: String,
    pub shafts: Vec<ShaftAnnotation>,
}

impl DatasetRecord {
    pub fn is_pose_labeled(&self) -> bool {
        self.shafts.iter().all(|s| s.pose.is_some())
    }

    pub fn image_path(index: u64) -> String {
        format!("images/{index:06}.png")
    }

    pub fn mask_path(index: u64, k: usize) -> String {
        format!("masks/{index:06}_{k}.png")
    }
}

/// A generated record together with its pixels.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub record: DatasetRecord,
    pub rendered: RenderedSample,
    /// Ground-truth poses, kept even when the record itself is pose-stripped.
    pub poses: Vec<ShaftPose>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-record seed derived from the dataset seed and the record index.
pub fn record_seed(global_seed: u64, index: u64) -> u64 {
    splitmix64(global_seed ^ splitmix64(index))
}

/// Each dimension independently uniform over its range.
pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R, ranges: &PoseRanges) -> ShaftPose {
    let d = ranges.dims();
    let mut v = [0.0; 5];
    for (out, r) in v.iter_mut().zip(d) {
        *out = rng.random_range(r.min..=r.max);
    }
    ShaftPose::from_array(v)
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Shifts hue by `dh` degrees and scales saturation and value.
fn hsv_shift(img: &mut RgbImage, dh: f64, s_scale: f64, v_scale: f64) {
    for px in img.pixels_mut() {
        let rgb = px.0.map(|c| c as f64 / 255.0);
        let [h, s, v] = rgb_to_hsv(rgb);
        let out = hsv_to_rgb([h + dh, (s * s_scale).min(1.0), (v * v_scale).min(1.0)]);
        *px = Rgb(out.map(|c| to_u8(c * 255.0)));
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// Smooth value noise on a coarse lattice, bilinearly interpolated with a smoothstep fade.
fn value_noise(rng: &mut ChaCha8Rng, width: u32, height: u32, cells: u32) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.random::<f64>())
        .collect();
    let fade = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity((width * height) as usize);
    for y in 0..height {
        let fy = (y as f64 + 0.5) / height as f64 * cells as f64;
        let (iy, ty) = ((fy as u32).min(cells - 1), fade(fy.fract()));
        for x in 0..width {
            let fx = (x as f64 + 0.5) / width as f64 * cells as f64;
            let (ix, tx) = ((fx as u32).min(cells - 1), fade(fx.fract()));
            let at = |i: u32, j: u32| lattice[(j * (cells + 1) + i) as usize];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

const TISSUE_DARK: [f64; 3] = [92.0, 22.0, 28.0];
const TISSUE_LIGHT: [f64; 3] = [232.0, 140.0, 138.0];

/// Procedural tissue-like backdrop. The base field depends only on `base_seed`; `rng` drives the
/// HSV jitter, so with zero jitter two calls with the same base seed agree exactly.
pub fn generate_background<R: Rng + ?Sized>(
    base_seed: u64,
    rng: &mut R,
    camera: &CameraModel,
    jitter: &BackgroundJitter,
) -> RgbImage {
    let (w, h) = (camera.width, camera.height);
    let mut field_rng = ChaCha8Rng::seed_from_u64(splitmix64(base_seed ^ 0xB6_0000));
    let coarse = value_noise(&mut field_rng, w, h, 3);
    let fine = value_noise(&mut field_rng, w, h, 9);
    let mut img = RgbImage::new(w, h);
    for (i, px) in img.pixels_mut().enumerate() {
        let t = (0.7 * coarse[i] + 0.3 * fine[i]).clamp(0.0, 1.0);
        *px = Rgb(std::array::from_fn(|c| {
            to_u8(TISSUE_DARK[c] + (TISSUE_LIGHT[c] - TISSUE_DARK[c]) * t)
        }));
    }
    let dh = symmetric(rng, jitter.hue);
    let ds = 1.0 + symmetric(rng, jitter.saturation);
    let dv = 1.0 + symmetric(rng, jitter.brightness);
    if dh != 0.0 || ds != 1.0 || dv != 1.0 {
        hsv_shift(&mut img, dh, ds, dv);
    }
    img
}

/// Photometric jitter followed, with probability `noise_probability`, by i.i.d. uniform noise on
/// every pixel of every channel. Geometry is never changed.
pub fn augment<R: Rng + ?Sized>(image: &RgbImage, rng: &mut R, cfg: &AugmentationConfig) -> RgbImage {
    let mut img = image.clone();
    let dh = symmetric(rng, cfg.hue);
    let ds = 1.0 + symmetric(rng, cfg.saturation);
    let dv = 1.0 + symmetric(rng, cfg.brightness);
    let dc = 1.0 + symmetric(rng, cfg.contrast);
    if dh != 0.0 || ds != 1.0 || dv != 1.0 {
        hsv_shift(&mut img, dh, ds, dv);
    }
    if dc != 1.0 {
        let n = (img.width() * img.height()) as f64;
        let mut mean = [0.0f64; 3];
        for px in img.pixels() {
            for c in 0..3 {
                mean[c] += px.0[c] as f64 / n;
            }
        }
        for px in img.pixels_mut() {
            for c in 0..3 {
                px.0[c] = to_u8((px.0[c] as f64 - mean[c]) * dc + mean[c]);
            }
        }
    }
    if cfg.noise_amplitude > 0.0 && rng.random_bool(cfg.noise_probability) {
        let a = cfg.noise_amplitude;
        for px in img.pixels_mut() {
            for c in px.0.iter_mut() {
                *c = to_u8(*c as f64 + rng.random_range(-a..=a));
            }
        }
    }
    img
}

/// Draws and renders one sample. Poses whose shaft would swallow the lens, and scenes where some
/// shaft shows fewer than `min_visible_pixels`, are redrawn up to `max_retries` times.
pub fn generate_sample<R: Rng + ?Sized>(
    rng: &mut R,
    config: &GenerationConfig,
    index: u64,
    seed: u64,
) -> Result<GeneratedSample, DatagenError> {
    let camera = config.camera()?;
    for _ in 0..config.max_retries {
        let count = if rng.random_bool(config.two_shaft_probability) { 2 } else { 1 };
        let poses: Vec<ShaftPose> = (0..count)
            .map(|_| sample_pose(rng, &config.ranges))
            .collect();
        let light = rng.random_range(config.light_min..=config.light_max);
        let base = rng.random_range(0..config.background_pool);
        let stripped = rng.random_bool(config.fraction_pose_stripped);
        let min_clearance = config.shaft.radius + config.clearance_margin;
        if poses
            .iter()
            .any(|p| camera_clearance(p, &config.shaft) < min_clearance)
        {
            continue;
        }
        let background = generate_background(base, rng, &camera, &config.background_jitter);
        let rendered = rasterize_shafts(&camera, &poses, &config.shaft, light, &background)?;
        if rendered
            .masks
            .iter()
            .any(|m| m.count() < config.min_visible_pixels.max(1))
        {
            continue;
        }
        let shafts = rendered
            .bboxes
            .iter()
            .zip(&poses)
            .enumerate()
            .map(|(k, (bbox, pose))| ShaftAnnotation {
                bbox: bbox.expect("non-empty mask has a box"),
                pose: (!stripped).then_some(*pose),
                mask: (!stripped).then(|| DatasetRecord::mask_path(index, k)),
            })
            .collect();
        let record = DatasetRecord {
            schema_version: SCHEMA_VERSION,
            index,
            seed,
            image: DatasetRecord::image_path(index),
            shafts,
        };
        return Ok(GeneratedSample {
            record,
            rendered,
            poses,
        });
    }
    Err(DatagenError::RetriesExhausted {
        index,
        retries: config.max_retries,
    })
}

/// Regenerates record `index` of the dataset identified by `global_seed`.
pub fn generate_record(
    global_seed: u64,
    index: u64,
    config: &GenerationConfig,
) -> Result<GeneratedSample, DatagenError> {
    let seed = record_seed(global_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_sample(&mut rng, config, index, seed)
}

/// Records `first..first + count`, generated in parallel and returned in index order.
pub fn generate_dataset(
    global_seed: u64,
    first: u64,
    count: u64,
    config: &GenerationConfig,
) -> Result<Vec<GeneratedSample>, DatagenError> {
    config.validate()?;
    (first..first + count)
        .into_par_iter()
        .map(|i| generate_record(global_seed, i, config))
        .collect()
}

/// Writes images, masks and the manifest. The directory is created if needed; an existing
/// manifest is replaced.
pub fn write_dataset(dir: &Path, samples: &[GeneratedSample]) -> Result<(), DatagenError> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let manifest = dir.join(MANIFEST);
    let mut w = BufWriter::new(File::create(&manifest).map_err(io_err(&manifest))?);
    for s in samples {
        let img_path = dir.join(&s.record.image);
        s.rendered
            .image
            .save(&img_path)
            .map_err(|source| DatagenError::Image {
                path: img_path.clone(),
                source,
            })?;
        for (ann, mask) in s.record.shafts.iter().zip(&s.rendered.masks) {
            if let Some(rel) = &ann.mask {
                let p = dir.join(rel);
                mask.to_gray_image()
                    .save(&p)
                    .map_err(|source| DatagenError::Image { path: p.clone(), source })?;
            }
        }
        let line = serde_json::to_string(&s.record).expect("records always serialize");
        writeln!(w, "{line}").map_err(io_err(&manifest))?;
    }
    w.flush().map_err(io_err(&manifest))
}

/// Parses and validates the manifest. Every referenced image and mask must exist.
pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetRecord>, DatagenError> {
    let manifest = dir.join(MANIFEST);
    let file = File::open(&manifest).map_err(io_err(&manifest))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&manifest))?;
        if line.trim().is_empty() {
            continue;
        }
        let manifest_err = |message: String| DatagenError::Manifest {
            path: manifest.clone(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| manifest_err(e.to_string()))?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| manifest_err("missing schema_version".into()))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(DatagenError::SchemaVersion {
                path: manifest.clone(),
                line: i + 1,
                found: found.min(u32::MAX as u64) as u32,
                expected: SCHEMA_VERSION,
            });
        }
        let record: DatasetRecord =
            serde_json::from_value(value).map_err(|e| manifest_err(e.to_string()))?;
        if record.shafts.is_empty() || record.shafts.len() > 2 {
            return Err(manifest_err(format!(
                "record {} has {} shafts, expected 1 or 2",
                record.index,
                record.shafts.len()
            )));
        }
        let files = std::iter::once(&record.image)
            .chain(record.shafts.iter().filter_map(|s| s.mask.as_ref()));
        for rel in files {
            let p = dir.join(rel);
            if !p.is_file() {
                return Err(DatagenError::MissingFile {
                    index: record.index,
                    path: p,
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_image(dir: &Path, rel: &str) -> Result<RgbImage, DatagenError> {
    let p = dir.join(rel);
    image::open(&p)
        .map(|img| img.to_rgb8())
        .map_err(|source| DatagenError::Image { path: p, source })
}

pub fn load_mask(dir: &Path, rel: &str) -> Result<Mask, DatagenError> {
    let p = dir.join(rel);
    image::open(&p)
        .map(|img| Mask::from_gray_image(&img.to_luma8()))
        .map_err(|source| DatagenError::Image { path: p, source })
}

/// In-memory dataset: records plus decoded images, in manifest order.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub images: Vec<RgbImage>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<GeneratedSample>) -> Self {
        let mut ds = Self::default();
        for s in samples {
            ds.records.push(s.record);
            ds.images.push(s.rendered.image);
        }
        ds
    }

    pub fn load(dir: &Path) -> Result<Self, DatagenError> {
        let records = read_dataset(dir)?;
        let images = records
            .iter()
            .map(|r| load_image(dir, &r.image))
            .collect::<Result<_, _>>()?;
        Ok(Self { records, images })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends another dataset, e.g. pose-stripped records mixed into a labeled training set.
    pub fn extend(&mut self, other: Dataset) {
        self.records.extend(other.records);
        self.images.extend(other.images);
    }
}
