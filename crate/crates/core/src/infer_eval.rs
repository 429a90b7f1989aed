//! Turning head outputs into detections, and the detection / pose metrics.

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::detector::{
    box_iou, decode_box, images_to_tensor, AnchorSet, Detector, DetectorError, HeadOutputs,
    NUM_CLASSES,
};
use crate::geometry::{
    denormalize_pose, yaw_error, BBox, CameraModel, NormalizedPose, PoseRanges, ShaftPose, POSE_DIM,
};
use crate::nn::{Mode, Scalar};
use crate::renderer::{mask_iou, render_silhouette, render_visible_silhouettes, Mask, RenderError, ShaftGeometry};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("invalid inference config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// Candidates kept before the score gate.
    pub top_k: usize,
    /// Minimum shaft-class probability.
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// IoU needed for a detection to count as finding a ground-truth shaft.
    pub match_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            top_k: 250,
            score_threshold: 0.5,
            nms_threshold: 0.45,
            match_threshold: 0.5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.top_k == 0 {
            return Err(EvalError::Config("top_k must be at least 1".into()));
        }
        if !(unit(self.score_threshold) && unit(self.nms_threshold) && unit(self.match_threshold)) {
            return Err(EvalError::Config("thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub pose: ShaftPose,
    /// Anchor the detection was decoded from.
    pub anchor: usize,
}

/// Indices of the `k` highest scores, best first; equal scores keep the lower index first.
pub fn select_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Greedy suppression: detections are visited by descending score (then anchor index) and kept
/// unless they overlap an already kept one with IoU at or above `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.anchor.cmp(&b.anchor)));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| box_iou(&k.bbox, &d.bbox) < iou_threshold) {
            kept.push(*d);
        }
    }
    kept
}

/// Shaft-class softmax probability of every anchor from interleaved logits.
pub fn shaft_scores<T: Scalar>(cls_rows: &[T]) -> Vec<f64> {
    cls_rows
        .chunks_exact(NUM_CLASSES)
        .map(|r| 1.0 / (1.0 + (r[0].f64() - r[1].f64()).exp()))
        .collect()
}

/// Post-processes one image: top-k, score gate, box decoding (clipped to the image), NMS and
/// the pose read from each surviving anchor.
pub fn decode_detections<T: Scalar>(
    outputs: &HeadOutputs<T>,
    item: usize,
    anchors: &AnchorSet,
    ranges: &PoseRanges,
    cfg: &InferenceConfig,
) -> Vec<Detection> {
    let rows = outputs.image_rows(item);
    let scores = shaft_scores(&rows.cls);
    let size = anchors.image_size as f64;
    let candidates: Vec<Detection> = select_topk(&scores, cfg.top_k)
        .into_iter()
        .filter(|&a| scores[a] >= cfg.score_threshold)
        .map(|a| {
            let off: [f64; 4] = std::array::from_fn(|k| rows.boxes[a * 4 + k].f64());
            let b = decode_box(&off, &anchors.anchors[a]);
            let clip = |v: f64| v.clamp(0.0, size);
            let pose: [f64; POSE_DIM] = std::array::from_fn(|k| rows.pose[a * POSE_DIM + k].f64());
            Detection {
                bbox: BBox::new(clip(b.x_min), clip(b.y_min), clip(b.x_max), clip(b.y_max)),
                score: scores[a],
                pose: denormalize_pose(&NormalizedPose(pose), ranges),
                anchor: a,
            }
        })
        .collect();
    nms(&candidates, cfg.nms_threshold)
}

/// Runs the model in inference mode on `images` in chunks of `chunk`.
pub fn detect(
    model: &mut Detector<f32>,
    images: &[&RgbImage],
    anchors: &AnchorSet,
    ranges: &PoseRanges,
    cfg: &InferenceConfig,
    chunk: usize,
) -> Result<Vec<Vec<Detection>>, EvalError> {
    cfg.validate()?;
    let size = model.config().input_size;
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let x = images_to_tensor::<f32>(part, size)?;
        let heads = model.forward(&x, Mode::Eval)?;
        for i in 0..part.len() {
            out.push(decode_detections(&heads, i, anchors, ranges, cfg));
        }
    }
    Ok(out)
}

/// Outcome of the greedy score-ordered assignment used for AP.
#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub ground_truths: usize,
}

/// All-point interpolated average precision of one class.
///
/// Detections from all images are ranked by score (stable, so ties keep image order). Each
/// detection is matched to its highest-IoU ground truth in the same image; it is a true positive
/// if that IoU reaches `iou_threshold` and the ground truth is still unclaimed. With no ground
/// truth at all, AP is 0.
pub fn average_precision(detections: &[Vec<Detection>], gts: &[Vec<BBox>], iou_threshold: f64) -> ApResult {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().map(move |d| (i, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(ranked.len());
    for (img, d) in &ranked {
        let best = gts[*img]
            .iter()
            .enumerate()
            .map(|(j, g)| (j, box_iou(&d.bbox, g)))
            .fold(None, |acc: Option<(usize, f64)>, (j, iou)| match acc {
                Some((_, b)) if b >= iou => acc,
                _ => Some((j, iou)),
            });
        let tp = match best {
            Some((j, iou)) if iou >= iou_threshold && !claimed[*img][j] => {
                claimed[*img][j] = true;
                true
            }
            _ => false,
        };
        hits.push(tp);
    }
    let tp_total = hits.iter().filter(|&&h| h).count();
    let result = |ap| ApResult {
        ap,
        true_positives: tp_total,
        false_positives: hits.len() - tp_total,
        ground_truths: n_gt,
    };
    if n_gt == 0 {
        return result(0.0);
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    result(ap)
}

/// Fraction of ground-truth boxes overlapped by at least one detection at `iou_threshold`.
/// Several detections on one shaft count once. With no ground truth the rate is 0.
pub fn detected_rate(detections: &[Vec<Detection>], gts: &[Vec<BBox>], iou_threshold: f64) -> f64 {
    let (hit, total) = detected_counts(detections, gts, iou_threshold);
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

fn detected_counts(detections: &[Vec<Detection>], gts: &[Vec<BBox>], iou_threshold: f64) -> (usize, usize) {
    let mut hit = 0;
    let mut total = 0;
    for (ds, gs) in detections.iter().zip(gts) {
        total += gs.len();
        hit += gs
            .iter()
            .filter(|g| ds.iter().any(|d| box_iou(&d.bbox, g) >= iou_threshold))
            .count();
    }
    (hit, total)
}

/// Mean absolute pose error per dimension: x, y, z in mm, pitch and yaw in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMae {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl PoseMae {
    pub fn from_array(v: [f64; POSE_DIM]) -> Self {
        Self {
            x: v[0],
            y: v[1],
            z: v[2],
            pitch: v[3],
            yaw: v[4],
        }
    }

    pub fn to_array(&self) -> [f64; POSE_DIM] {
        [self.x, self.y, self.z, self.pitch, self.yaw]
    }

    /// Sum over dimensions of the error divided by the dimension's range width.
    pub fn normalized_total(&self, ranges: &PoseRanges) -> f64 {
        self.to_array()
            .iter()
            .zip(ranges.dims())
            .map(|(e, r)| e / r.width())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorReport {
    /// `None` when no ground truth was matched.
    pub mae: Option<PoseMae>,
    pub matched: usize,
    pub unmatched: usize,
}

/// Absolute error per dimension, with circular distance for yaw.
pub fn pose_abs_error(pred: &ShaftPose, gt: &ShaftPose) -> [f64; POSE_DIM] {
    let (p, g) = (pred.to_array(), gt.to_array());
    let mut e: [f64; POSE_DIM] = std::array::from_fn(|k| (p[k] - g[k]).abs());
    e[4] = yaw_error(p[4], g[4]);
    e
}

/// Index of the detection with the highest IoU against `gt`, if that IoU reaches the threshold.
/// Ties keep the earlier detection.
fn best_by_iou(dets: &[Detection], gt: &BBox, iou_threshold: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, d) in dets.iter().enumerate() {
        let iou = box_iou(&d.bbox, gt);
        if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    best.map(|(i, _)| i)
}

/// Pairs every ground-truth shaft with its highest-IoU detection (IoU at or above the
/// threshold) and averages the absolute errors. Unmatched shafts are only counted.
pub fn pose_error_report(
    detections: &[Vec<Detection>],
    gts: &[Vec<(BBox, ShaftPose)>],
    iou_threshold: f64,
) -> PoseErrorReport {
    let mut sum = [0.0; POSE_DIM];
    let (mut matched, mut unmatched) = (0, 0);
    for (ds, gs) in detections.iter().zip(gts) {
        for (b, pose) in gs {
            match best_by_iou(ds, b, iou_threshold) {
                Some(i) => {
                    matched += 1;
                    for (s, e) in sum.iter_mut().zip(pose_abs_error(&ds[i].pose, pose)) {
                        *s += e;
                    }
                }
                None => unmatched += 1,
            }
        }
    }
    PoseErrorReport {
        mae: (matched > 0).then(|| PoseMae::from_array(sum.map(|s| s / matched as f64))),
        matched,
        unmatched,
    }
}

/// Errors of the constant predictor that answers the range midpoint for every shaft, placed on
/// the exact ground-truth box.
pub fn midpoint_baseline(gts: &[Vec<(BBox, ShaftPose)>], ranges: &PoseRanges) -> PoseErrorReport {
    let mid = ranges.midpoint();
    let dets: Vec<Vec<Detection>> = gts
        .iter()
        .map(|gs| {
            gs.iter()
                .enumerate()
                .map(|(a, (b, _))| Detection {
                    bbox: *b,
                    score: 1.0,
                    pose: mid,
                    anchor: a,
                })
                .collect()
        })
        .collect();
    pose_error_report(&dets, gts, 0.5)
}

/// Per-shaft re-render IoU: the highest-scoring detection overlapping the shaft's box at the
/// threshold is rendered from its pose and compared with the shaft's mask. Shafts without such
/// a detection score 0.
pub fn rerender_ious(
    detections: &[Detection],
    gts: &[(BBox, Mask)],
    camera: &CameraModel,
    geom: &ShaftGeometry,
    iou_threshold: f64,
) -> Result<Vec<f64>, EvalError> {
    gts.iter()
        .map(|(b, mask)| {
            let best = detections
                .iter()
                .filter(|d| box_iou(&d.bbox, b) >= iou_threshold)
                .fold(None, |acc: Option<&Detection>, d| match acc {
                    Some(a) if a.score >= d.score => acc,
                    _ => Some(d),
                });
            match best {
                Some(d) => Ok(mask_iou(&render_silhouette(camera, &d.pose, geom), mask)?),
                None => Ok(0.0),
            }
        })
        .collect()
}

/// Mean of [`rerender_ious`]; 0 with no shafts.
pub fn rerender_iou(
    detections: &[Detection],
    gts: &[(BBox, Mask)],
    camera: &CameraModel,
    geom: &ShaftGeometry,
    iou_threshold: f64,
) -> Result<f64, EvalError> {
    let v = rerender_ious(detections, gts, camera, geom, iou_threshold)?;
    Ok(if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub ground_truths: usize,
    pub detections: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub map: f64,
    pub detected_rate: f64,
    pub pose: PoseErrorReport,
    /// Constant range-midpoint predictor on the same shafts.
    pub baseline: PoseErrorReport,
    pub rerender_iou: f64,
    /// Shafts that entered the pose and re-render metrics (pose-labeled images only).
    pub pose_labeled_shafts: usize,
}

impl EvalReport {
    /// Aligned plain-text table with one header row and one value row.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let mae = self.pose.mae.map(|m| m.to_array());
        let mut cells = vec![
            ("mAP", format!("{:.4}", self.map)),
            ("detected", format!("{:.4}", self.detected_rate)),
        ];
        let units = ["x[mm]", "y[mm]", "z[mm]", "pitch[deg]", "yaw[deg]"];
        for (k, u) in units.iter().enumerate() {
            cells.push((u, fmt(mae.map(|m| m[k]))));
        }
        cells.push(("rerender IoU", format!("{:.4}", self.rerender_iou)));
        let widths: Vec<usize> = cells.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let row = |f: &dyn Fn(&(&str, String)) -> String| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{:>w$}", f(c), w = *w))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!("{}\n{}\n", row(&|c| c.0.to_string()), row(&|c| c.1.clone()))
    }
}

/// One line of the per-image JSONL diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDiagnostics {
    pub index: u64,
    pub ground_truths: Vec<BBox>,
    pub detections: Vec<Detection>,
    /// Best detection IoU per ground-truth box.
    pub best_iou: Vec<f64>,
    pub rerender_iou: Vec<f64>,
}

/// Scene parameters needed to regenerate ground-truth masks.
#[derive(Debug, Clone, Copy)]
pub struct EvalScene<'a> {
    pub camera: &'a CameraModel,
    pub geom: &'a ShaftGeometry,
    pub ranges: &'a PoseRanges,
}

/// Evaluates precomputed detections against a dataset. Ground-truth masks of pose-labeled
/// images are re-rendered from the stored poses with occlusion, which reproduces the stored
/// mask files exactly.
pub fn evaluate_detections(
    dataset: &Dataset,
    detections: &[Vec<Detection>],
    scene: EvalScene<'_>,
    iou_threshold: f64,
) -> Result<(EvalReport, Vec<ImageDiagnostics>), EvalError> {
    let gt_boxes: Vec<Vec<BBox>> = dataset
        .records
        .iter()
        .map(|r| r.shafts.iter().map(|s| s.bbox).collect())
        .collect();
    let gt_poses: Vec<Vec<(BBox, ShaftPose)>> = dataset
        .records
        .iter()
        .map(|r| r.shafts.iter().filter_map(|s| s.pose.map(|p| (s.bbox, p))).collect())
        .collect();
    let rerender: Vec<Vec<f64>> = gt_poses
        .par_iter()
        .zip(detections)
        .map(|(gs, ds)| {
            let poses: Vec<ShaftPose> = gs.iter().map(|g| g.1).collect();
            let masks = render_visible_silhouettes(scene.camera, &poses, scene.geom);
            let with_masks: Vec<(BBox, Mask)> = gs.iter().map(|g| g.0).zip(masks).collect();
            rerender_ious(ds, &with_masks, scene.camera, scene.geom, iou_threshold)
        })
        .collect::<Result<_, _>>()?;

    let ap = average_precision(detections, &gt_boxes, iou_threshold);
    let flat: Vec<f64> = rerender.iter().flatten().copied().collect();
    let report = EvalReport {
        images: dataset.len(),
        ground_truths: ap.ground_truths,
        detections: detections.iter().map(Vec::len).sum(),
        true_positives: ap.true_positives,
        false_positives: ap.false_positives,
        false_negatives: ap.ground_truths - ap.true_positives,
        map: ap.ap,
        detected_rate: detected_rate(detections, &gt_boxes, iou_threshold),
        pose: pose_error_report(detections, &gt_poses, iou_threshold),
        baseline: midpoint_baseline(&gt_poses, scene.ranges),
        rerender_iou: if flat.is_empty() { 0.0 } else { flat.iter().sum::<f64>() / flat.len() as f64 },
        pose_labeled_shafts: flat.len(),
    };
    let diagnostics = dataset
        .records
        .iter()
        .zip(detections)
        .zip(gt_boxes)
        .zip(rerender)
        .map(|(((r, ds), gs), rr)| ImageDiagnostics {
            index: r.index,
            best_iou: gs
                .iter()
                .map(|g| ds.iter().map(|d| box_iou(&d.bbox, g)).fold(0.0, f64::max))
                .collect(),
            ground_truths: gs,
            detections: ds.clone(),
            rerender_iou: rr,
        })
        .collect();
    Ok((report, diagnostics))
}

/// Detects on every image of `dataset` and evaluates the result.
pub fn evaluate(
    model: &mut Detector<f32>,
    dataset: &Dataset,
    scene: EvalScene<'_>,
    cfg: &InferenceConfig,
) -> Result<(EvalReport, Vec<ImageDiagnostics>), EvalError> {
    let anchors = model.config().build_anchors()?;
    let images: Vec<&RgbImage> = dataset.images.iter().collect();
    let dets = detect(model, &images, &anchors, scene.ranges, cfg, 64)?;
    evaluate_detections(dataset, &dets, scene, cfg.match_threshold)
}
