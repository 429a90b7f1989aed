//! Multi-scale single-shot detector with a per-anchor pose head.

pub mod anchors;
pub mod loss;
pub mod matching;
pub mod model;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use anchors::{box_iou, build_anchors, decode_box, encode_box, Anchor, AnchorConfig, AnchorLocation, AnchorSet};
pub use loss::{pose_residuals, total_loss, LossBreakdown, LossConfig};
pub use matching::{
    build_targets, hard_negative_mine, match_anchors, GroundTruth, ImageTargets, MatchResult,
    PositiveTarget,
};
pub use model::{
    images_to_tensor, is_pose_branch_param, AnchorRows, Detector, HeadOutputs, LevelOutput,
    PoseActivation, Variant, NUM_CLASSES,
};
pub use train::{TrainConfig, Trainer, TrainingData};

use crate::geometry::BBox;
use crate::nn::{CheckpointError, NnError};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("ground-truth box {0:?} has non-positive size")]
    InvalidBox(BBox),
    #[error("record {0} has pose labels on some shafts but not on others")]
    PartialPoseLabels(u64),
    #[error(
        "non-finite loss at step {step} (lr {lr:e}): conf {conf}, bbox {bbox}, pose {pose}"
    )]
    NonFiniteLoss {
        step: u64,
        lr: f64,
        conf: f64,
        bbox: f64,
        pose: f64,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not describe this model: {0}")]
    CheckpointMismatch(String),
    #[error("training data: {0}")]
    Data(String),
}

/// Architecture description; also embedded in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub variant: Variant,
    /// Square input side in pixels.
    pub input_size: u32,
    /// Square feature-grid side per pyramid level.
    pub level_sizes: Vec<usize>,
    pub channels: usize,
    pub pose_channels: usize,
    pub pose_activation: PoseActivation,
    pub anchors: AnchorConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::D,
            input_size: 64,
            level_sizes: vec![16, 8, 4, 2],
            channels: 32,
            pose_channels: 32,
            pose_activation: PoseActivation::Tanh,
            anchors: AnchorConfig::default(),
        }
    }
}

fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

impl DetectorConfig {
    /// Number of stride-2 stem convolutions between the input and the first level.
    pub fn stem_depth(&self) -> usize {
        let mut s = self.input_size as usize;
        let mut depth = 0;
        while s > self.level_sizes[0] {
            s = halve(s);
            depth += 1;
        }
        depth
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        self.anchors.validate()?;
        let l = &self.level_sizes;
        if l.is_empty() || *l.last().unwrap() < 2 {
            return Err(DetectorError::Config(
                "level sizes must be non-empty and end at 2 or more".into(),
            ));
        }
        if l.windows(2).any(|w| w[1] >= w[0] || w[1] != halve(w[0])) {
            return Err(DetectorError::Config(format!(
                "level sizes {l:?} must halve (rounding up) from one level to the next"
            )));
        }
        let mut s = self.input_size as usize;
        let mut depth = 0;
        while s > l[0] {
            s = halve(s);
            depth += 1;
        }
        if s != l[0] || depth == 0 {
            return Err(DetectorError::Config(format!(
                "input size {} cannot be halved down to the first level size {}",
                self.input_size, l[0]
            )));
        }
        if self.channels == 0 || self.pose_channels == 0 {
            return Err(DetectorError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn build_anchors(&self) -> Result<AnchorSet, DetectorError> {
        build_anchors(self.input_size, &self.level_sizes, &self.anchors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = DetectorConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stem_depth(), 2);
        assert_eq!(c.build_anchors().unwrap().len(), 1360);
    }

    #[test]
    fn large_input_pyramid_is_accepted() {
        let c = DetectorConfig {
            input_size: 299,
            level_sizes: vec![38, 19, 10, 5, 3, 2],
            ..DetectorConfig::default()
        };
        c.validate().unwrap();
        assert_eq!(c.stem_depth(), 3);
    }

    #[test]
    fn bad_pyramids_are_rejected() {
        for levels in [vec![], vec![16, 8, 4, 2, 1], vec![16, 16], vec![16, 4], vec![12, 6]] {
            let c = DetectorConfig {
                level_sizes: levels.clone(),
                ..DetectorConfig::default()
            };
            assert!(c.validate().is_err(), "{levels:?}");
        }
    }
}
