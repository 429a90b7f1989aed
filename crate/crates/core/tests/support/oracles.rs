//! Brute-force reference implementations and randomized comparison drivers. Shared by the core
//! oracle tests and the acceptance suite.

#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shaftpose::detector::{box_iou, match_anchors, Anchor, AnchorSet};
use shaftpose::geometry::{BBox, ShaftPose};
use shaftpose::infer_eval::{average_precision, nms, select_topk, Detection};
use shaftpose::renderer::{mask_iou, Mask};

/// IoU by counting unit cells of integer-aligned boxes.
pub fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
    let cells = |r: &BBox| -> HashSet<(i64, i64)> {
        let mut s = HashSet::new();
        for y in r.y_min as i64..r.y_max as i64 {
            for x in r.x_min as i64..r.x_max as i64 {
                s.insert((x, y));
            }
        }
        s
    };
    let (ca, cb) = (cells(a), cells(b));
    let union = ca.union(&cb).count();
    if ca.is_empty() || cb.is_empty() || union == 0 {
        return 0.0;
    }
    ca.intersection(&cb).count() as f64 / union as f64
}

pub fn mask_iou_oracle(a: &Mask, b: &Mask) -> f64 {
    let set = |m: &Mask| -> HashSet<(u32, u32)> {
        let mut s = HashSet::new();
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) {
                    s.insert((x, y));
                }
            }
        }
        s
    };
    let (sa, sb) = (set(a), set(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        1.0
    } else {
        sa.intersection(&sb).count() as f64 / union as f64
    }
}

/// Threshold matching with lowest-index tie breaks, then forced best anchors in gt order.
pub fn match_oracle(anchors: &[BBox], gt: &[BBox], thr: f64) -> Vec<Option<usize>> {
    let mut out = vec![None; anchors.len()];
    for (i, a) in anchors.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            let v = box_iou(a, g);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v >= thr {
                out[i] = Some(j);
            }
        }
    }
    let mut taken = vec![false; anchors.len()];
    for (j, g) in gt.iter().enumerate() {
        let mut cands: Vec<(f64, usize)> = (0..anchors.len())
            .filter(|&i| !taken[i])
            .map(|i| (box_iou(&anchors[i], g), i))
            .filter(|c| c.0 > 0.0)
            .collect();
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        if let Some(&(_, i)) = cands.first() {
            taken[i] = true;
            out[i] = Some(j);
        }
    }
    out
}

/// Repeatedly takes the best remaining detection and deletes everything it suppresses.
pub fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut pool: Vec<Detection> = dets.to_vec();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (a, b) = (&pool[i], &pool[best]);
            if a.score > b.score || (a.score == b.score && a.anchor < b.anchor) {
                best = i;
            }
        }
        let top = pool.remove(best);
        pool.retain(|d| box_iou(&top.bbox, &d.bbox) < thr);
        kept.push(top);
    }
    kept
}

pub fn topk_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps lower indices first among equal scores
    idx.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap());
    idx.truncate(k);
    idx
}

/// AP as the sum over true positives of `1/n_gt` times the best precision at or beyond that rank.
pub fn ap_oracle(dets: &[Vec<Detection>], gts: &[Vec<BBox>], thr: f64) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (i, ds) in dets.iter().enumerate() {
        for (k, d) in ds.iter().enumerate() {
            ranked.push((d.score, i, k));
        }
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut tp_flags = Vec::new();
    for &(_, i, k) in &ranked {
        let d = &dets[i][k];
        let mut best_j = None;
        let mut best_v = -1.0;
        for (j, g) in gts[i].iter().enumerate() {
            let v = box_iou(&d.bbox, g);
            if v > best_v {
                best_v = v;
                best_j = Some(j);
            }
        }
        let tp = matches!(best_j, Some(j) if best_v >= thr && used.insert((i, j)));
        tp_flags.push(tp);
    }
    let precision: Vec<f64> = (0..tp_flags.len())
        .map(|r| tp_flags[..=r].iter().filter(|&&t| t).count() as f64 / (r + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for r in 0..tp_flags.len() {
        if tp_flags[r] {
            let best = precision[r..].iter().cloned().fold(0.0, f64::max);
            ap += best / n_gt as f64;
        }
    }
    ap
}

pub fn int_box(rng: &mut ChaCha8Rng, span: i64, max_side: i64) -> BBox {
    let x = rng.random_range(0..span) as f64;
    let y = rng.random_range(0..span) as f64;
    BBox::new(x, y, x + rng.random_range(1..max_side) as f64, y + rng.random_range(1..max_side) as f64)
}

pub fn det_with(bbox: BBox, score: f64, anchor: usize) -> Detection {
    Detection {
        bbox,
        score,
        pose: ShaftPose::new(0.0, 0.0, 20.0, 70.0, 0.0),
        anchor,
    }
}

/// Scores drawn from a small grid so ties are common.
pub fn random_dets(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|a| det_with(int_box(rng, 40, 20), rng.random_range(0..20) as f64 / 20.0, a))
        .collect()
}

pub fn anchor_set(boxes: &[BBox]) -> AnchorSet {
    let anchors: Vec<Anchor> = boxes
        .iter()
        .map(|b| {
            let (cx, cy) = b.center();
            Anchor { cx, cy, w: b.width(), h: b.height() }
        })
        .collect();
    AnchorSet {
        image_size: 64,
        level_sizes: vec![1],
        boxes_per_location: anchors.len(),
        level_offsets: vec![0, anchors.len()],
        anchors,
    }
}

/// Mismatch count and worst numeric deviation of one comparison.
#[derive(Debug, Clone, Copy, Default)]
pub struct Agreement {
    pub trials: usize,
    pub mismatches: usize,
    pub worst: f64,
}

impl Agreement {
    fn record(&mut self, deviation: f64, tol: f64) {
        self.trials += 1;
        self.worst = self.worst.max(deviation);
        if !(deviation <= tol) {
            self.mismatches += 1;
        }
    }

    fn record_eq(&mut self, equal: bool) {
        self.record(if equal { 0.0 } else { 1.0 }, 0.0);
    }

    pub fn ok(&self) -> bool {
        self.mismatches == 0
    }
}

pub const REAL_TOL: f64 = 1e-9;

pub fn compare_box_iou(trials: usize, seed: u64) -> Agreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agg = Agreement::default();
    for _ in 0..trials {
        let (a, b) = (int_box(&mut rng, 20, 15), int_box(&mut rng, 20, 15));
        agg.record((box_iou(&a, &b) - pixel_iou(&a, &b)).abs(), REAL_TOL);
    }
    agg
}

pub fn compare_mask_iou(trials: usize, seed: u64) -> Agreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agg = Agreement::default();
    for _ in 0..trials {
        let (w, h) = (rng.random_range(1..12), rng.random_range(1..12));
        let density = rng.random_range(0.0..1.0);
        let mut pair = [Mask::new(w, h), Mask::new(w, h)];
        for m in &mut pair {
            for y in 0..h {
                for x in 0..w {
                    m.set(x, y, rng.random_bool(density));
                }
            }
        }
        let got = mask_iou(&pair[0], &pair[1]).unwrap();
        agg.record((got - mask_iou_oracle(&pair[0], &pair[1])).abs(), REAL_TOL);
    }
    agg
}

pub fn compare_matching(trials: usize, seed: u64) -> Agreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agg = Agreement::default();
    for _ in 0..trials {
        let anchors: Vec<BBox> = (0..200).map(|_| int_box(&mut rng, 40, 20)).collect();
        let n_gt = rng.random_range(0..=3);
        let gt: Vec<BBox> = (0..n_gt).map(|_| int_box(&mut rng, 40, 20)).collect();
        let got = match_anchors(&anchor_set(&anchors), &gt, 0.5).matches;
        agg.record_eq(got == match_oracle(&anchors, &gt, 0.5));
    }
    agg
}

pub fn compare_nms(trials: usize, seed: u64) -> Agreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agg = Agreement::default();
    for _ in 0..trials {
        let dets = random_dets(&mut rng, 100);
        agg.record_eq(nms(&dets, 0.45) == nms_oracle(&dets, 0.45));
    }
    agg
}

pub fn compare_topk(trials: usize, seed: u64) -> Agreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agg = Agreement::default();
    for _ in 0..trials {
        let n = rng.random_range(1..400);
        let k = rng.random_range(1..300);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..50) as f64 / 50.0).collect();
        agg.record_eq(select_topk(&scores, k) == topk_oracle(&scores, k));
    }
    agg
}

pub fn compare_ap(trials: usize, seed: u64) -> Agreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agg = Agreement::default();
    for _ in 0..trials {
        let images = rng.random_range(1..5);
        let gts: Vec<Vec<BBox>> = (0..images)
            .map(|_| (0..rng.random_range(0..4)).map(|_| int_box(&mut rng, 30, 15)).collect())
            .collect();
        // detections near the ground truth so both hits and misses occur
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|gs| {
                let mut ds = Vec::new();
                for (a, g) in gs.iter().enumerate() {
                    for _ in 0..rng.random_range(0..3) {
                        let j = rng.random_range(-2..=2) as f64;
                        let b = BBox::new(g.x_min + j, g.y_min, g.x_max + j, g.y_max);
                        ds.push(det_with(b, rng.random_range(0..10) as f64 / 10.0, a));
                    }
                }
                for a in 0..rng.random_range(0..3) {
                    ds.push(det_with(int_box(&mut rng, 30, 15), rng.random_range(0..10) as f64 / 10.0, 100 + a));
                }
                ds
            })
            .collect();
        let got = average_precision(&dets, &gts, 0.5).ap;
        agg.record((got - ap_oracle(&dets, &gts, 0.5)).abs(), REAL_TOL);
    }
    agg
}
