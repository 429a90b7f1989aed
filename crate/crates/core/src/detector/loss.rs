//! Composite detection and pose loss with hand-written gradients.

use serde::{Deserialize, Serialize};

use super::anchors::AnchorSet;
use super::matching::{hard_negative_mine, ImageTargets};
use super::model::{HeadOutputs, LevelOutput, NUM_CLASSES};
use super::DetectorError;
use crate::geometry::POSE_DIM;
use crate::nn::{smooth_l1, smooth_l1_grad, softmax_cross_entropy, NnError, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the box term.
    pub alpha: f64,
    /// Per-dimension pose weights (x, y, z, pitch, yaw).
    pub beta: [f64; POSE_DIM],
    /// Scale applied to pose residuals before smooth L1.
    pub gamma: f64,
    pub neg_pos_ratio: usize,
    pub match_threshold: f64,
    /// Also pull the pose map of background anchors towards zero.
    pub pose_loss_on_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            beta: [1.0, 1.0, 2.0, 2.0, 2.0],
            gamma: 5.0,
            neg_pos_ratio: 3,
            match_threshold: 0.5,
            pose_loss_on_negatives: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.alpha >= 0.0 && self.gamma > 0.0 && self.beta.iter().all(|&b| b >= 0.0)) {
            return Err(DetectorError::Config(
                "loss weights must be non-negative and gamma positive".into(),
            ));
        }
        if self.neg_pos_ratio == 0 {
            return Err(DetectorError::Config("neg_pos_ratio must be at least 1".into()));
        }
        if !(self.match_threshold > 0.0 && self.match_threshold < 1.0) {
            return Err(DetectorError::Config("match_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Loss terms before normalization, the normalizer and the normalized total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub conf: f64,
    pub bbox: f64,
    pub pose: f64,
    /// Matched anchors over the batch.
    pub positives: usize,
    /// `max(positives, 1)`.
    pub n: usize,
    pub total: f64,
}

#[derive(Clone, Copy)]
enum Map {
    Cls,
    Boxes,
    Pose,
}

impl Map {
    fn width(self) -> usize {
        match self {
            Map::Cls => NUM_CLASSES,
            Map::Boxes => 4,
            Map::Pose => POSE_DIM,
        }
    }

    fn of<T>(self, lv: &LevelOutput<T>) -> &Tensor<T> {
        match self {
            Map::Cls => &lv.cls,
            Map::Boxes => &lv.boxes,
            Map::Pose => &lv.pose,
        }
    }

    fn of_mut<T>(self, lv: &mut LevelOutput<T>) -> &mut Tensor<T> {
        match self {
            Map::Cls => &mut lv.cls,
            Map::Boxes => &mut lv.boxes,
            Map::Pose => &mut lv.pose,
        }
    }
}

/// Image `i`'s rows of one map, in global anchor order. Within a level the per-image block of
/// an NHWC map is already laid out anchor by anchor.
fn gather<T: Scalar>(o: &HeadOutputs<T>, anchors: &AnchorSet, i: usize, map: Map) -> Vec<T> {
    let mut out = Vec::with_capacity(anchors.len() * map.width());
    for (l, lv) in o.levels.iter().enumerate() {
        let len = (anchors.level_offsets[l + 1] - anchors.level_offsets[l]) * map.width();
        out.extend_from_slice(&map.of(lv).data()[i * len..(i + 1) * len]);
    }
    out
}

fn scatter<T: Scalar>(o: &mut HeadOutputs<T>, anchors: &AnchorSet, i: usize, map: Map, src: &[T]) {
    let mut off = 0;
    for (l, lv) in o.levels.iter_mut().enumerate() {
        let len = (anchors.level_offsets[l + 1] - anchors.level_offsets[l]) * map.width();
        map.of_mut(lv).data_mut()[i * len..(i + 1) * len].copy_from_slice(&src[off..off + len]);
        off += len;
    }
}

fn check_layout<T: Scalar>(
    outputs: &HeadOutputs<T>,
    anchors: &AnchorSet,
    batch: usize,
) -> Result<(), DetectorError> {
    let n = anchors.boxes_per_location;
    if outputs.levels.len() != anchors.level_sizes.len() {
        return Err(NnError::Shape("head outputs and anchors disagree on level count".into()).into());
    }
    for (l, lv) in outputs.levels.iter().enumerate() {
        let s = anchors.level_sizes[l];
        for (t, w) in [(&lv.cls, NUM_CLASSES), (&lv.boxes, 4), (&lv.pose, POSE_DIM)] {
            if t.shape() != [batch, s, s, w * n] {
                return Err(NnError::Shape(format!(
                    "level {l} output {:?} does not match anchors [{batch}, {s}, {s}, {}]",
                    t.shape(),
                    w * n
                ))
                .into());
            }
        }
    }
    Ok(())
}

/// `gamma * (pred - target)` for every supervised pose component, image by image in batch
/// order. Unlabeled images contribute nothing.
pub fn pose_residuals<T: Scalar>(
    outputs: &HeadOutputs<T>,
    anchors: &AnchorSet,
    targets: &[ImageTargets],
    cfg: &LossConfig,
) -> Result<Vec<f64>, DetectorError> {
    check_layout(outputs, anchors, targets.len())?;
    let mut out = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if !t.pose_labeled {
            continue;
        }
        let pose = gather(outputs, anchors, i, Map::Pose);
        for p in &t.positives {
            let target = p.pose.expect("pose-labeled targets carry poses");
            for d in 0..POSE_DIM {
                out.push(cfg.gamma * (pose[p.anchor * POSE_DIM + d].f64() - target[d]));
            }
        }
    }
    Ok(out)
}

/// Computes the loss and its gradient with respect to every head output.
pub fn total_loss<T: Scalar>(
    outputs: &HeadOutputs<T>,
    anchors: &AnchorSet,
    targets: &[ImageTargets],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, HeadOutputs<T>), DetectorError> {
    check_layout(outputs, anchors, targets.len())?;
    let a_count = anchors.len();
    let positives: usize = targets.iter().map(|t| t.positives.len()).sum();
    let n = positives.max(1);
    let inv_n = 1.0 / n as f64;
    let mut grads = HeadOutputs::zeros_like(outputs);
    let (mut l_conf, mut l_bbox, mut l_pose) = (0.0f64, 0.0f64, 0.0f64);

    for (i, t) in targets.iter().enumerate() {
        if t.num_anchors != a_count {
            return Err(NnError::Shape(format!(
                "targets built for {} anchors, model has {a_count}",
                t.num_anchors
            ))
            .into());
        }
        let labels = t.labels();
        let is_pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();

        let logits = gather(outputs, anchors, i, Map::Cls);
        let ce = softmax_cross_entropy(&logits, NUM_CLASSES, &labels, &vec![true; a_count])?;
        let ce_f64: Vec<f64> = ce.losses.iter().map(|v| v.f64()).collect();
        let mined = hard_negative_mine(&ce_f64, &is_pos, cfg.neg_pos_ratio);
        let mut weights = vec![T::zero(); a_count];
        for a in 0..a_count {
            if is_pos[a] || mined[a] {
                l_conf += ce_f64[a];
                weights[a] = T::of(inv_n);
            }
        }
        let dlogits = ce.backward(&weights);
        scatter(&mut grads, anchors, i, Map::Cls, &dlogits);

        let boxes = gather(outputs, anchors, i, Map::Boxes);
        let mut dbox = vec![T::zero(); boxes.len()];
        for p in &t.positives {
            for d in 0..4 {
                let r = boxes[p.anchor * 4 + d].f64() - p.offsets[d];
                l_bbox += smooth_l1(r);
                dbox[p.anchor * 4 + d] = T::of(cfg.alpha * smooth_l1_grad(r) * inv_n);
            }
        }
        scatter(&mut grads, anchors, i, Map::Boxes, &dbox);

        if t.pose_labeled {
            let pose = gather(outputs, anchors, i, Map::Pose);
            let mut dpose = vec![T::zero(); pose.len()];
            let mut add = |a: usize, target: &[f64; POSE_DIM], l_pose: &mut f64| {
                for d in 0..POSE_DIM {
                    let r = cfg.gamma * (pose[a * POSE_DIM + d].f64() - target[d]);
                    *l_pose += cfg.beta[d] * smooth_l1(r);
                    dpose[a * POSE_DIM + d] =
                        T::of(cfg.beta[d] * cfg.gamma * smooth_l1_grad(r) * inv_n);
                }
            };
            for p in &t.positives {
                add(p.anchor, &p.pose.expect("pose-labeled targets carry poses"), &mut l_pose);
            }
            if cfg.pose_loss_on_negatives {
                for a in (0..a_count).filter(|&a| !is_pos[a]) {
                    add(a, &[0.0; POSE_DIM], &mut l_pose);
                }
            }
            scatter(&mut grads, anchors, i, Map::Pose, &dpose);
        }
    }

    let total = (l_conf + cfg.alpha * l_bbox + l_pose) * inv_n;
    let breakdown = LossBreakdown {
        conf: l_conf,
        bbox: l_bbox,
        pose: l_pose,
        positives,
        n,
        total,
    };
    if !total.is_finite() {
        return Err(NnError::NonFinite("total_loss").into());
    }
    Ok((breakdown, grads))
}
