//! Anchor-to-ground-truth matching, training targets and hard negative mining.

use super::anchors::{box_iou, encode_box, AnchorSet};
use super::DetectorError;
use crate::datagen::DatasetRecord;
use crate::geometry::{normalize_pose, BBox, PoseRanges, ShaftPose, POSE_DIM};

/// Per-anchor assignment: `matches[i]` is the ground-truth index of anchor `i`, if positive.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub matches: Vec<Option<usize>>,
    pub ious: Vec<f64>,
}

impl MatchResult {
    pub fn positives(&self) -> usize {
        self.matches.iter().filter(|m| m.is_some()).count()
    }
}

/// Threshold matching plus forced best-anchor matching.
///
/// Every anchor takes its highest-IoU ground truth (lowest index on ties) when that IoU reaches
/// `threshold`. Then, in ground-truth order, each box claims its highest-IoU anchor (lowest anchor
/// index on ties) among anchors not already claimed this way, provided the overlap is positive.
pub fn match_anchors(anchors: &AnchorSet, gt: &[BBox], threshold: f64) -> MatchResult {
    let a_boxes: Vec<BBox> = anchors.anchors.iter().map(|a| a.to_bbox()).collect();
    let mut matches = vec![None; a_boxes.len()];
    let mut ious = vec![0.0; a_boxes.len()];
    if gt.is_empty() {
        return MatchResult { matches, ious };
    }
    let table: Vec<Vec<f64>> = gt
        .iter()
        .map(|g| a_boxes.iter().map(|a| box_iou(a, g)).collect())
        .collect();
    for i in 0..a_boxes.len() {
        let mut best = 0;
        for j in 1..gt.len() {
            if table[j][i] > table[best][i] {
                best = j;
            }
        }
        ious[i] = table[best][i];
        if ious[i] >= threshold {
            matches[i] = Some(best);
        }
    }
    let mut forced = vec![false; a_boxes.len()];
    for (j, row) in table.iter().enumerate() {
        let mut best: Option<usize> = None;
        for (i, &v) in row.iter().enumerate() {
            if forced[i] || v <= 0.0 {
                continue;
            }
            if best.is_none_or(|b| v > row[b]) {
                best = Some(i);
            }
        }
        if let Some(i) = best {
            forced[i] = true;
            matches[i] = Some(j);
            ious[i] = row[i];
        }
    }
    MatchResult { matches, ious }
}

/// Selects the `min(ratio * max(positives, 1), negatives)` negatives with the largest loss.
/// Equal losses are ranked by anchor index.
pub fn hard_negative_mine(conf_losses: &[f64], positive: &[bool], ratio: usize) -> Vec<bool> {
    assert_eq!(conf_losses.len(), positive.len(), "one loss per anchor");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let mut negatives: Vec<usize> = (0..positive.len()).filter(|&i| !positive[i]).collect();
    let keep = (ratio * n_pos.max(1)).min(negatives.len());
    negatives.sort_by(|&a, &b| conf_losses[b].total_cmp(&conf_losses[a]).then(a.cmp(&b)));
    let mut selected = vec![false; positive.len()];
    for &i in &negatives[..keep] {
        selected[i] = true;
    }
    selected
}

/// Ground truth of one image. `poses` is `None` for pose-stripped images.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    pub poses: Option<Vec<ShaftPose>>,
}

impl GroundTruth {
    /// Rejects records where only some shafts carry a pose.
    pub fn from_record(record: &DatasetRecord) -> Result<Self, DetectorError> {
        let boxes = record.shafts.iter().map(|s| s.bbox).collect();
        let poses: Vec<ShaftPose> = record.shafts.iter().filter_map(|s| s.pose).collect();
        let poses = match poses.len() {
            0 => None,
            n if n == record.shafts.len() => Some(poses),
            _ => return Err(DetectorError::PartialPoseLabels(record.index)),
        };
        Ok(Self { boxes, poses })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositiveTarget {
    pub anchor: usize,
    pub gt: usize,
    pub offsets: [f64; 4],
    /// Normalized pose; `None` on pose-stripped images.
    pub pose: Option<[f64; POSE_DIM]>,
}

/// Sparse training targets of one image: everything not listed is background with zero box and
/// pose targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTargets {
    pub num_anchors: usize,
    pub positives: Vec<PositiveTarget>,
    pub pose_labeled: bool,
}

impl ImageTargets {
    /// Dense class labels: 1 for shaft, 0 for background.
    pub fn labels(&self) -> Vec<usize> {
        let mut l = vec![0; self.num_anchors];
        for p in &self.positives {
            l[p.anchor] = 1;
        }
        l
    }

    /// Dense normalized pose targets, or `None` when the image carries no pose labels.
    pub fn pose_map(&self) -> Option<Vec<[f64; POSE_DIM]>> {
        if !self.pose_labeled {
            return None;
        }
        let mut m = vec![[0.0; POSE_DIM]; self.num_anchors];
        for p in &self.positives {
            m[p.anchor] = p.pose.expect("pose-labeled targets carry poses");
        }
        Some(m)
    }
}

pub fn build_targets(
    anchors: &AnchorSet,
    gt: &GroundTruth,
    ranges: &PoseRanges,
    threshold: f64,
) -> Result<ImageTargets, DetectorError> {
    let m = match_anchors(anchors, &gt.boxes, threshold);
    let mut positives = Vec::new();
    for (i, j) in m.matches.iter().enumerate() {
        if let Some(j) = *j {
            positives.push(PositiveTarget {
                anchor: i,
                gt: j,
                offsets: encode_box(&gt.boxes[j], &anchors.anchors[i])?,
                pose: gt.poses.as_ref().map(|p| normalize_pose(&p[j], ranges).0),
            });
        }
    }
    Ok(ImageTargets {
        num_anchors: anchors.len(),
        positives,
        pose_labeled: gt.poses.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::anchors::{build_anchors, Anchor, AnchorConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn anchor_set(boxes: Vec<BBox>) -> AnchorSet {
        let n = boxes.len();
        AnchorSet {
            image_size: 100,
            level_sizes: vec![1],
            boxes_per_location: n,
            anchors: boxes
                .iter()
                .map(|b| {
                    let (cx, cy) = b.center();
                    Anchor { cx, cy, w: b.width(), h: b.height() }
                })
                .collect(),
            level_offsets: vec![0, n],
        }
    }

    #[test]
    fn identical_anchor_matches_with_iou_one() {
        let g = BBox::new(10.0, 10.0, 30.0, 40.0);
        let set = anchor_set(vec![BBox::new(50.0, 50.0, 60.0, 60.0), g]);
        let m = match_anchors(&set, &[g], 0.5);
        assert_eq!(m.matches, vec![None, Some(0)]);
        assert_eq!(m.ious[1], 1.0);
    }

    #[test]
    fn no_ground_truth_means_no_matches() {
        let set = build_anchors(64, &[4, 2], &AnchorConfig::default()).unwrap();
        let m = match_anchors(&set, &[], 0.5);
        assert_eq!(m.positives(), 0);
    }

    #[test]
    fn best_anchor_is_forced_below_threshold() {
        let set = anchor_set(vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(0.0, 0.0, 40.0, 40.0)]);
        let m = match_anchors(&set, &[BBox::new(0.0, 0.0, 20.0, 20.0)], 0.5);
        // IoUs are 0.25 and 0.25; the lower anchor index wins the forced match
        assert_eq!(m.matches, vec![Some(0), None]);
    }

    #[test]
    fn second_gt_skips_anchor_claimed_by_first() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let set = anchor_set(vec![a, BBox::new(0.0, 0.0, 12.0, 12.0)]);
        let m = match_anchors(&set, &[a, a], 0.5);
        // anchor 0 is claimed by gt 0, so gt 1 takes anchor 1 even though anchor 0 fits it better
        assert_eq!(m.matches, vec![Some(0), Some(1)]);
    }

    #[test]
    fn mining_examples() {
        let mut losses: Vec<f64> = (0..22).map(|i| i as f64).collect();
        losses.reverse();
        let mut pos = vec![false; 22];
        pos[0] = true;
        pos[5] = true;
        let sel = hard_negative_mine(&losses, &pos, 3);
        let picked: Vec<usize> = (0..22).filter(|&i| sel[i]).collect();
        assert_eq!(picked, vec![1, 2, 3, 4, 6, 7]);

        let sel = hard_negative_mine(&[0.1, 0.5, 0.3, 0.9, 0.2], &[false; 5], 3);
        assert_eq!(sel, vec![false, true, true, true, false]);

        let sel = hard_negative_mine(&[1.0; 6], &[true, true, false, false, false, false], 3);
        assert_eq!(sel, vec![false, false, true, true, true, true]);
    }

    #[test]
    fn targets_for_empty_image_are_background() {
        let set = build_anchors(64, &[4, 2], &AnchorConfig::default()).unwrap();
        let gt = GroundTruth { boxes: vec![], poses: Some(vec![]) };
        let t = build_targets(&set, &gt, &PoseRanges::default(), 0.5).unwrap();
        assert!(t.labels().iter().all(|&l| l == 0));
        assert!(t.pose_map().unwrap().iter().all(|p| *p == [0.0; POSE_DIM]));
    }

    #[test]
    fn midpoint_pose_targets_are_zero_and_stripped_poses_are_absent() {
        let set = build_anchors(64, &[4, 2], &AnchorConfig::default()).unwrap();
        let ranges = PoseRanges::default();
        let b = BBox::new(10.0, 12.0, 40.0, 30.0);
        let gt = GroundTruth { boxes: vec![b], poses: Some(vec![ranges.midpoint()]) };
        let t = build_targets(&set, &gt, &ranges, 0.5).unwrap();
        assert!(!t.positives.is_empty());
        assert!(t.positives.iter().all(|p| p.pose == Some([0.0; POSE_DIM])));
        let stripped = GroundTruth { boxes: vec![b], poses: None };
        let t = build_targets(&set, &stripped, &ranges, 0.5).unwrap();
        assert!(!t.pose_labeled && t.pose_map().is_none());
        assert!(t.positives.iter().all(|p| p.pose.is_none()));
    }

    /// Straightforward re-statement of the matching rule used as an oracle.
    fn oracle(anchors: &[BBox], gt: &[BBox], thr: f64) -> Vec<Option<usize>> {
        let mut out = vec![None; anchors.len()];
        for (i, a) in anchors.iter().enumerate() {
            let mut best_j = None;
            let mut best_v = f64::NEG_INFINITY;
            for (j, g) in gt.iter().enumerate() {
                let v = crate::detector::anchors::box_iou(a, g);
                if v > best_v {
                    best_v = v;
                    best_j = Some(j);
                }
            }
            if best_v >= thr {
                out[i] = best_j;
            }
        }
        let mut taken = vec![false; anchors.len()];
        for (j, g) in gt.iter().enumerate() {
            let mut cands: Vec<(f64, usize)> = anchors
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[*i])
                .map(|(i, a)| (crate::detector::anchors::box_iou(a, g), i))
                .filter(|(v, _)| *v > 0.0)
                .collect();
            cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            if let Some(&(_, i)) = cands.first() {
                taken[i] = true;
                out[i] = Some(j);
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            // integer coordinates make exact IoU ties common
            let rand_box = |rng: &mut ChaCha8Rng| {
                let x = rng.random_range(0..40) as f64;
                let y = rng.random_range(0..40) as f64;
                BBox::new(x, y, x + rng.random_range(1..20) as f64, y + rng.random_range(1..20) as f64)
            };
            let anchors: Vec<BBox> = (0..200).map(|_| rand_box(&mut rng)).collect();
            let n_gt = rng.random_range(0..=3);
            let gt: Vec<BBox> = (0..n_gt).map(|_| rand_box(&mut rng)).collect();
            let set = anchor_set(anchors.clone());
            let m = match_anchors(&set, &gt, 0.5);
            assert_eq!(m.matches, oracle(&set.anchors.iter().map(|a| a.to_bbox()).collect::<Vec<_>>(), &gt, 0.5));
        }
    }
}
