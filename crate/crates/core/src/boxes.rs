//! Normalized boxes, IoU, greedy NMS and COCO-style mean average precision.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

/// A labelled box in normalized `(cx, cy, w, h)` form. `weight` scales the
/// supervision of the box (1 except after mixup).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl GroundTruthBox {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { class_id, cx, cy, w, h, weight: 1.0 }
    }

    pub fn from_corners(class_id: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(class_id, (x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn corners(&self) -> [f64; 4] {
        corners(self.cx, self.cy, self.w, self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Positive size and inside `[0,1]²` up to `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let [x0, y0, x1, y1] = self.corners();
        self.w > 0.0 && self.h > 0.0 && x0 >= -tol && y0 >= -tol && x1 <= 1.0 + tol && y1 <= 1.0 + tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl Detection {
    pub fn corners(&self) -> [f64; 4] {
        corners(self.cx, self.cy, self.w, self.h)
    }
}

impl From<&GroundTruthBox> for Detection {
    fn from(g: &GroundTruthBox) -> Self {
        Detection { class_id: g.class_id, cx: g.cx, cy: g.cy, w: g.w, h: g.h, score: 1.0 }
    }
}

fn corners(cx: f64, cy: f64, w: f64, h: f64) -> [f64; 4] {
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

/// Intersection over union of two corner boxes; 0 for disjoint or zero-area boxes.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |c: [f64; 4]| (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// IoU of two `(cx, cy, w, h)` boxes.
pub fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    iou_corners(corners(a.0, a.1, a.2, a.3), corners(b.0, b.1, b.2, b.3))
}

/// Score descending, then smaller cx, then smaller cy; remaining fields only
/// make the order total.
fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.cx.total_cmp(&b.cx))
        .then(a.cy.total_cmp(&b.cy))
        .then(a.class_id.cmp(&b.class_id))
        .then(a.w.total_cmp(&b.w))
        .then(a.h.total_cmp(&b.h))
}

/// Greedy per-class suppression of boxes overlapping a kept box by more than
/// `iou_thresh`. Output is in rank order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let c = d.corners();
        if kept.iter().all(|k| k.class_id != d.class_id || iou_corners(k.corners(), c) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    /// mAP at the first threshold.
    pub map50: f64,
    /// mAP averaged over all thresholds.
    pub map50_95: f64,
    /// Per-class AP at the first threshold; `None` for classes with neither
    /// ground truth nor detections.
    pub per_class_ap50: Vec<Option<f64>>,
}

/// 101-point interpolated AP of one class at one IoU threshold, or `None`
/// when the class has neither ground truth nor detections.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthBox>],
    class_id: usize,
    iou_thresh: f64,
) -> Option<f64> {
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (i, d)))
        .collect();
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class_id == class_id).count()).sum();
    if n_gt == 0 && ranked.is_empty() {
        return None;
    }
    if n_gt == 0 {
        return Some(0.0);
    }
    ranked.sort_by(|a, b| rank(a.1, b.1).then(a.0.cmp(&b.0)));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(ranked.len());
    for (img, d) in ranked {
        let c = d.corners();
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[img].iter().enumerate() {
            if g.class_id != class_id || matched[img][j] {
                continue;
            }
            let v = iou_corners(c, g.corners());
            if v >= iou_thresh && best.map_or(true, |b| v > b.1) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                matched[img][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // precision envelope from the right
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let sum: f64 = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            curve.iter().find(|(rec, _)| *rec >= r).map_or(0.0, |p| p.1)
        })
        .sum();
    Some(sum / 101.0)
}

/// Mean over classes, then over thresholds. Images are matched by index.
pub fn mean_average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthBox>],
    num_classes: usize,
    thresholds: &[f64],
) -> MapReport {
    assert_eq!(dets.len(), gts.len(), "detections and ground truth cover different image counts");
    let per_threshold: Vec<Vec<Option<f64>>> = thresholds
        .iter()
        .map(|&t| (0..num_classes).map(|c| average_precision(dets, gts, c, t)).collect())
        .collect();
    let class_mean = |aps: &[Option<f64>]| {
        let vals: Vec<f64> = aps.iter().flatten().copied().collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let means: Vec<f64> = per_threshold.iter().map(|aps| class_mean(aps)).collect();
    MapReport {
        map50: means.first().copied().unwrap_or(0.0),
        map50_95: if means.is_empty() { 0.0 } else { means.iter().sum::<f64>() / means.len() as f64 },
        per_class_ap50: per_threshold.into_iter().next().unwrap_or_default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(class_id: usize, cx: f64, cy: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection { class_id, cx, cy, w, h, score }
    }

    #[test]
    fn iou_unit_cases() {
        let a = (0.5, 0.5, 1.0, 1.0);
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou((0.1, 0.1, 0.1, 0.1), (0.8, 0.8, 0.1, 0.1)), 0.0);
        assert_eq!(iou(a, (1.0, 0.5, 1.0, 1.0)), 1.0 / 3.0);
        assert_eq!(iou((0.5, 0.5, 0.0, 0.2), (0.5, 0.5, 0.3, 0.2)), 0.0);
    }

    #[test]
    fn nms_examples() {
        let d = det(0, 0.5, 0.5, 0.2, 0.2, 0.7);
        assert_eq!(nms(&[d], 0.5), vec![d]);
        let hi = det(0, 0.5, 0.5, 0.2, 0.2, 0.9);
        let lo = det(0, 0.5, 0.5, 0.2, 0.2, 0.8);
        assert_eq!(nms(&[lo, hi], 0.5), vec![hi]);
        let other_class = Detection { class_id: 1, ..lo };
        assert_eq!(nms(&[lo, hi, other_class], 0.5), vec![hi, other_class]);
    }

    #[test]
    fn nms_tie_break() {
        let a = det(0, 0.3, 0.5, 0.2, 0.2, 0.5);
        let b = det(0, 0.31, 0.5, 0.2, 0.2, 0.5);
        assert_eq!(nms(&[b, a], 0.5), vec![a]);
        let c = det(0, 0.3, 0.49, 0.2, 0.2, 0.5);
        assert_eq!(nms(&[a, c], 0.5), vec![c]);
    }

    /// A higher threshold can keep fewer boxes: at 0.7, B survives A and then
    /// suppresses both C and D, which A alone would have kept at 0.5.
    #[test]
    fn nms_threshold_monotonicity_counterexample() {
        let s = 0.2;
        // horizontal shift giving IoU 0.71 between equal squares
        let dx = s * 0.29 / 1.71;
        let a = det(0, 0.5, 0.45, s, s, 0.9);
        let b = det(0, 0.5, 0.5, s, s, 0.8);
        let c = det(0, 0.5 - dx, 0.5, s, s, 0.7);
        let d = det(0, 0.5 + dx, 0.5, s, s, 0.6);
        let i = |p: &Detection, q: &Detection| iou((p.cx, p.cy, p.w, p.h), (q.cx, q.cy, q.w, q.h));
        assert!((i(&a, &b) - 0.6).abs() < 1e-9);
        assert!(i(&b, &c) > 0.7 && i(&b, &d) > 0.7);
        assert!(i(&a, &c) <= 0.5 && i(&a, &d) <= 0.5 && i(&c, &d) <= 0.5);
        assert_eq!(nms(&[a, b, c, d], 0.5), vec![a, c, d]);
        assert_eq!(nms(&[a, b, c, d], 0.7), vec![a, b]);
    }

    #[test]
    fn map_examples() {
        let gts = vec![vec![GroundTruthBox::new(0, 0.3, 0.3, 0.2, 0.2), GroundTruthBox::new(1, 0.7, 0.7, 0.2, 0.3)]];
        let perfect = vec![gts[0].iter().map(Detection::from).collect()];
        let r = mean_average_precision(&perfect, &gts, 3, &coco_thresholds());
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.map50_95, 1.0);
        assert_eq!(r.per_class_ap50, vec![Some(1.0), Some(1.0), None]);
        let none = mean_average_precision(&[vec![]], &gts, 3, &coco_thresholds());
        assert_eq!(none.map50, 0.0);
    }

    /// Two GT boxes, detections ranked TP, FP, TP.
    #[test]
    fn map_handcrafted() {
        let gts = vec![vec![GroundTruthBox::new(0, 0.2, 0.2, 0.2, 0.2), GroundTruthBox::new(0, 0.7, 0.7, 0.2, 0.2)]];
        let dets = vec![vec![det(0, 0.2, 0.2, 0.2, 0.2, 0.9), det(0, 0.5, 0.2, 0.1, 0.1, 0.8), det(0, 0.7, 0.7, 0.2, 0.2, 0.7)]];
        // recall/precision: (0.5, 1), (0.5, 1/2), (1, 2/3); envelope 1 up to r=0.5, 2/3 after
        let want = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
        let got = average_precision(&dets, &gts, 0, 0.5).unwrap();
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }

    fn arb_det() -> impl Strategy<Value = Detection> {
        (0..3usize, 0.05..0.95f64, 0.05..0.95f64, 0.02..0.4f64, 0.02..0.4f64, 0.0..1.0f64)
            .prop_map(|(c, x, y, w, h, s)| det(c, x, y, w, h, s))
    }

    proptest! {
        #[test]
        fn nms_is_idempotent(ds in prop::collection::vec(arb_det(), 0..40), t in 0.05..1.0f64) {
            let once = nms(&ds, t);
            prop_assert_eq!(nms(&once, t), once);
        }

        #[test]
        fn nms_keeps_each_class_top(ds in prop::collection::vec(arb_det(), 1..40), t in 0.05..1.0f64) {
            let kept = nms(&ds, t);
            for c in 0..3 {
                let top = ds.iter().filter(|d| d.class_id == c).min_by(|a, b| rank(a, b));
                if let Some(top) = top {
                    prop_assert!(kept.contains(top));
                }
            }
        }

        #[test]
        fn map_bounds_and_fp_removal(
            gt in prop::collection::vec((0..3usize, 0.1..0.9f64, 0.1..0.9f64, 0.05..0.2f64, 0.05..0.2f64), 1..6),
            noise in prop::collection::vec(arb_det(), 0..6),
            keep in prop::collection::vec(any::<bool>(), 6),
            score in prop::collection::vec(0.0..1.0f64, 6),
        ) {
            let gts = vec![gt.iter().map(|&(c, x, y, w, h)| GroundTruthBox::new(c, x, y, w, h)).collect::<Vec<_>>()];
            let mut dets: Vec<Detection> = gts[0].iter().zip(&keep).zip(&score).filter(|((_, k), _)| **k)
                .map(|((g, _), &s)| Detection { score: s, ..Detection::from(g) }).collect();
            let tps = dets.clone();
            // noise is kept only where it cannot match at IoU 0.5
            dets.extend(noise.into_iter().filter(|n| {
                gts[0].iter().all(|g| g.class_id != n.class_id || iou_corners(g.corners(), n.corners()) < 0.5)
            }));
            let with_fp = mean_average_precision(&[dets.clone()], &gts, 3, &coco_thresholds());
            prop_assert!((0.0..=1.0).contains(&with_fp.map50) && (0.0..=1.0).contains(&with_fp.map50_95));
            let clean = mean_average_precision(&[tps.clone()], &gts, 3, &[0.5]);
            let with_fp50 = mean_average_precision(&[dets], &gts, 3, &[0.5]);
            let mut dup = tps.clone();
            dup.extend(tps.iter().map(|d| Detection { score: d.score * 0.5, ..*d }));
            let duped = mean_average_precision(&[dup], &gts, 3, &[0.5]);
            prop_assert!(duped.map50 <= 1.0);
            for c in 0..3 {
                if let (Some(a), Some(b)) = (clean.per_class_ap50[c], with_fp50.per_class_ap50[c]) {
                    prop_assert!(a + 1e-12 >= b, "class {}: {} < {}", c, a, b);
                }
            }
        }
    }
}
