//! Flat JSON run configuration.
//!
//! Every key is optional and falls back to the default listed in [`RunConfig::default`]; unknown
//! keys are rejected. Precedence, lowest first: built-in defaults, the `--config` file, then
//! command-line flags. The fully resolved config is written as `config.json` into every output
//! directory and can be fed back through `--config` to repeat a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shaftpose::datagen::{AugmentationConfig, GenerationConfig};
use shaftpose::detector::{
    AnchorConfig, DetectorConfig, LossConfig, PoseActivation, TrainConfig, Variant,
};
use shaftpose::geometry::{PoseRanges, Range};
use shaftpose::infer_eval::InferenceConfig;
use shaftpose::renderer::ShaftGeometry;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum VariantKey {
    C,
    D,
}

impl From<VariantKey> for Variant {
    fn from(v: VariantKey) -> Self {
        match v {
            VariantKey::C => Variant::C,
            VariantKey::D => Variant::D,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    /// Dataset directories used for training, concatenated in order.
    pub train_data: Vec<PathBuf>,
    pub eval_data: PathBuf,
    /// Training output: config echo, loss trace and checkpoints.
    pub run_dir: PathBuf,

    pub count: u64,
    pub first_index: u64,
    pub image_size: u32,
    /// degrees
    pub horizontal_fov: f64,
    pub pose_stripped_fraction: f64,
    pub two_shaft_probability: f64,
    /// mm
    pub shaft_radius: f64,
    /// mm
    pub shaft_length: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub pitch_min: f64,
    pub pitch_max: f64,
    pub yaw_min: f64,
    pub yaw_max: f64,

    pub variant: VariantKey,
    pub level_sizes: Vec<usize>,
    pub channels: usize,
    pub pose_channels: usize,
    pub pose_activation: PoseActivation,

    pub alpha: f64,
    pub beta: [f64; 5],
    pub gamma: f64,
    pub neg_pos_ratio: usize,
    pub match_threshold: f64,
    pub pose_loss_on_negatives: bool,

    pub base_lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,

    pub aug_hue: f64,
    pub aug_saturation: f64,
    pub aug_brightness: f64,
    pub aug_contrast: f64,
    pub noise_amplitude: f64,
    pub noise_probability: f64,

    pub top_k: usize,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub eval_iou_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenerationConfig::default();
        let det = DetectorConfig::default();
        let loss = LossConfig::default();
        let train = TrainConfig::default();
        let aug = AugmentationConfig::default();
        let inf = InferenceConfig::default();
        let r = gen.ranges;
        Self {
            seed: 0,
            train_data: vec![PathBuf::from("data/train")],
            eval_data: PathBuf::from("data/test"),
            run_dir: PathBuf::from("runs/default"),
            count: 4000,
            first_index: 0,
            image_size: gen.width,
            horizontal_fov: gen.horizontal_fov,
            pose_stripped_fraction: gen.fraction_pose_stripped,
            two_shaft_probability: gen.two_shaft_probability,
            shaft_radius: gen.shaft.radius,
            shaft_length: gen.shaft.length,
            x_min: r.x.min,
            x_max: r.x.max,
            y_min: r.y.min,
            y_max: r.y.max,
            z_min: r.z.min,
            z_max: r.z.max,
            pitch_min: r.pitch.min,
            pitch_max: r.pitch.max,
            yaw_min: r.yaw.min,
            yaw_max: r.yaw.max,
            variant: VariantKey::D,
            level_sizes: det.level_sizes,
            channels: det.channels,
            pose_channels: det.pose_channels,
            pose_activation: det.pose_activation,
            alpha: loss.alpha,
            beta: loss.beta,
            gamma: loss.gamma,
            neg_pos_ratio: loss.neg_pos_ratio,
            match_threshold: loss.match_threshold,
            pose_loss_on_negatives: loss.pose_loss_on_negatives,
            base_lr: train.base_lr,
            steps: train.steps,
            batch_size: train.batch_size,
            checkpoint_every: 1000,
            aug_hue: aug.hue,
            aug_saturation: aug.saturation,
            aug_brightness: aug.brightness,
            aug_contrast: aug.contrast,
            noise_amplitude: aug.noise_amplitude,
            noise_probability: aug.noise_probability,
            top_k: inf.top_k,
            score_threshold: inf.score_threshold,
            nms_threshold: inf.nms_threshold,
            eval_iou_threshold: inf.match_threshold,
        }
    }
}

impl RunConfig {
    /// Reads a config file; absent keys keep their defaults.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn ranges(&self) -> PoseRanges {
        PoseRanges {
            x: Range::new(self.x_min, self.x_max),
            y: Range::new(self.y_min, self.y_max),
            z: Range::new(self.z_min, self.z_max),
            pitch: Range::new(self.pitch_min, self.pitch_max),
            yaw: Range::new(self.yaw_min, self.yaw_max),
        }
    }

    pub fn shaft(&self) -> ShaftGeometry {
        ShaftGeometry {
            radius: self.shaft_radius,
            length: self.shaft_length,
            ..ShaftGeometry::default()
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            width: self.image_size,
            height: self.image_size,
            horizontal_fov: self.horizontal_fov,
            ranges: self.ranges(),
            shaft: self.shaft(),
            two_shaft_probability: self.two_shaft_probability,
            fraction_pose_stripped: self.pose_stripped_fraction,
            ..GenerationConfig::default()
        }
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            variant: self.variant.into(),
            input_size: self.image_size,
            level_sizes: self.level_sizes.clone(),
            channels: self.channels,
            pose_channels: self.pose_channels,
            pose_activation: self.pose_activation,
            anchors: AnchorConfig::default(),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            seed: self.seed,
            augmentation: AugmentationConfig {
                hue: self.aug_hue,
                saturation: self.aug_saturation,
                brightness: self.aug_brightness,
                contrast: self.aug_contrast,
                noise_amplitude: self.noise_amplitude,
                noise_probability: self.noise_probability,
            },
            loss: LossConfig {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
                neg_pos_ratio: self.neg_pos_ratio,
                match_threshold: self.match_threshold,
                pose_loss_on_negatives: self.pose_loss_on_negatives,
            },
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            top_k: self.top_k,
            score_threshold: self.score_threshold,
            nms_threshold: self.nms_threshold,
            match_threshold: self.eval_iou_threshold,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.generation().validate().map_err(|e| bad(&e))?;
        self.detector().validate().map_err(|e| bad(&e))?;
        self.train().validate().map_err(|e| bad(&e))?;
        self.inference().validate().map_err(|e| bad(&e))?;
        if self.checkpoint_every == 0 {
            return Err(CliError::Config("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }
}
