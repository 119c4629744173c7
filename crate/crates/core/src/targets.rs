//! Ground truth to per-cell targets, and raw predictions back to detections.
//!
//! Prediction channels per cell: `tx, ty, tw, th, obj, cls_0..cls_{C-1}`. The
//! box decodes as `cx = (col + σ(tx))·stride/S` and `w = exp(tw)·stride/S`.

use crate::boxes::{Detection, GroundTruthBox};
use crate::model::STRIDES;
use crate::scalar::Real;
use crate::tensor::{sigmoid_scalar, Tensor};

/// Encoded offsets are kept this far inside `(0, 1)` so their logits are finite.
pub const OFFSET_EPS: f64 = 1e-6;

/// Scale index (0, 1, 2 for strides 8, 16, 32) chosen from `max(w, h)`.
pub fn scale_for(gt: &GroundTruthBox) -> usize {
    let m = gt.w.max(gt.h);
    if m <= 0.1 {
        0
    } else if m <= 0.3 {
        1
    } else {
        2
    }
}

/// Cell `(col, row)` containing the box centre on a `grid × grid` map.
pub fn cell_of(gt: &GroundTruthBox, grid: usize) -> (usize, usize) {
    let c = |v: f64| ((v * grid as f64).floor().max(0.0) as usize).min(grid - 1);
    (c(gt.cx), c(gt.cy))
}

/// Targets for one scale of a batch.
#[derive(Debug, Clone)]
pub struct ScaleTargets<T: Real = f32> {
    pub stride: usize,
    pub grid: usize,
    /// `[N,4,G,G]`: centre offsets within the cell, `√w`, `√h`.
    pub boxes: Tensor<T>,
    /// `[N,1,G,G]`: label weight on positive cells, 0 elsewhere.
    pub positive: Tensor<T>,
    /// `[N,1,G,G]`: 1 on negative cells.
    pub negative: Tensor<T>,
    /// `[N,C,G,G]`: one-hot class.
    pub classes: Tensor<T>,
}

impl<T: Real> ScaleTargets<T> {
    fn empty(n: usize, num_classes: usize, stride: usize, grid: usize) -> Self {
        Self {
            stride,
            grid,
            boxes: Tensor::zeros(&[n, 4, grid, grid]),
            positive: Tensor::zeros(&[n, 1, grid, grid]),
            negative: Tensor::ones(&[n, 1, grid, grid]),
            classes: Tensor::zeros(&[n, num_classes, grid, grid]),
        }
    }

    pub fn positive_cells(&self) -> usize {
        self.positive.data().iter().filter(|&&v| v > T::zero()).count()
    }
}

/// Assigns each box to one scale and the cell holding its centre. When two
/// boxes land on the same cell the larger one wins. Boxes with zero weight are
/// ignored.
pub fn assign_targets<T: Real>(batch: &[Vec<GroundTruthBox>], num_classes: usize, input_size: usize) -> Vec<ScaleTargets<T>> {
    let n = batch.len();
    let mut out: Vec<ScaleTargets<T>> = STRIDES.iter().map(|&s| ScaleTargets::empty(n, num_classes, s, input_size / s)).collect();
    for (img, gts) in batch.iter().enumerate() {
        // owner[scale][cell] = index of the winning box
        let mut owner: Vec<Vec<Option<usize>>> = out.iter().map(|t| vec![None; t.grid * t.grid]).collect();
        for (i, gt) in gts.iter().enumerate() {
            if gt.weight <= 0.0 || gt.class_id >= num_classes {
                continue;
            }
            let s = scale_for(gt);
            let (col, row) = cell_of(gt, out[s].grid);
            let slot = &mut owner[s][row * out[s].grid + col];
            if slot.map_or(true, |j| gt.area() > gts[j].area()) {
                *slot = Some(i);
            }
        }
        for (s, t) in out.iter_mut().enumerate() {
            let g = t.grid;
            let plane = g * g;
            for (cell, who) in owner[s].iter().enumerate() {
                let Some(i) = *who else { continue };
                let gt = &gts[i];
                let (col, row) = (cell % g, cell / g);
                let ox = (gt.cx * g as f64 - col as f64).clamp(OFFSET_EPS, 1.0 - OFFSET_EPS);
                let oy = (gt.cy * g as f64 - row as f64).clamp(OFFSET_EPS, 1.0 - OFFSET_EPS);
                for (ch, v) in [ox, oy, gt.w.sqrt(), gt.h.sqrt()].into_iter().enumerate() {
                    t.boxes.data_mut()[(img * 4 + ch) * plane + cell] = T::of(v);
                }
                t.positive.data_mut()[img * plane + cell] = T::of(gt.weight);
                t.negative.data_mut()[img * plane + cell] = T::zero();
                t.classes.data_mut()[(img * num_classes + gt.class_id) * plane + cell] = T::one();
            }
        }
    }
    out
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Raw prediction maps that decode exactly to `batch`: the inverse of
/// [`decode`] on the assigned cells, with saturated objectness and class
/// logits of magnitude `confidence`.
pub fn encode<T: Real>(batch: &[Vec<GroundTruthBox>], num_classes: usize, input_size: usize, confidence: f64) -> Vec<Tensor<T>> {
    let targets = assign_targets::<f64>(batch, num_classes, input_size);
    targets
        .iter()
        .map(|t| {
            let (g, plane, n) = (t.grid, t.grid * t.grid, batch.len());
            let ch = 5 + num_classes;
            let mut raw = vec![T::of(-confidence); n * ch * plane];
            for img in 0..n {
                for cell in 0..plane {
                    if t.positive.data()[img * plane + cell] <= 0.0 {
                        continue;
                    }
                    let at = |c: usize| (img * ch + c) * plane + cell;
                    let b = |c: usize| t.boxes.data()[(img * 4 + c) * plane + cell];
                    let unit = input_size as f64 / t.stride as f64;
                    raw[at(0)] = T::of(logit(b(0)));
                    raw[at(1)] = T::of(logit(b(1)));
                    raw[at(2)] = T::of((b(2) * b(2) * unit).ln());
                    raw[at(3)] = T::of((b(3) * b(3) * unit).ln());
                    raw[at(4)] = T::of(confidence);
                    for c in 0..num_classes {
                        if t.classes.data()[(img * num_classes + c) * plane + cell] > 0.0 {
                            raw[at(5 + c)] = T::of(confidence);
                        }
                    }
                }
            }
            Tensor::new(&[n, ch, g, g], raw).expect("encode shape")
        })
        .collect()
}

/// Detections scoring at least `conf_thresh`, per image, in scan order.
pub fn decode<T: Real>(preds: &[Tensor<T>], input_size: usize, conf_thresh: f64) -> Vec<Vec<Detection>> {
    let n = preds.first().map_or(0, |p| p.dim(0));
    let mut out = vec![Vec::new(); n];
    for (p, &stride) in preds.iter().zip(&STRIDES) {
        let (ch, g) = (p.dim(1), p.dim(2));
        let nc = ch - 5;
        let plane = g * g;
        let unit = stride as f64 / input_size as f64;
        let d = p.data();
        for (img, dets) in out.iter_mut().enumerate() {
            let at = |c: usize, cell: usize| d[(img * ch + c) * plane + cell].f64();
            for cell in 0..plane {
                let obj = sigmoid_scalar(at(4, cell));
                let (class_id, cls) = (0..nc)
                    .map(|c| (c, sigmoid_scalar(at(5 + c, cell))))
                    .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
                let score = (obj * cls).clamp(0.0, 1.0);
                if score < conf_thresh || nc == 0 {
                    continue;
                }
                let (col, row) = ((cell % g) as f64, (cell / g) as f64);
                let cx = (col + sigmoid_scalar(at(0, cell))) * unit;
                let cy = (row + sigmoid_scalar(at(1, cell))) * unit;
                let w = (at(2, cell).exp() * unit).min(1.0);
                let h = (at(3, cell).exp() * unit).min(1.0);
                let (x0, x1) = ((cx - w / 2.0).max(0.0), (cx + w / 2.0).min(1.0));
                let (y0, y1) = ((cy - h / 2.0).max(0.0), (cy + h / 2.0).min(1.0));
                if x1 <= x0 || y1 <= y0 {
                    continue;
                }
                dets.push(Detection { class_id, cx: (x0 + x1) / 2.0, cy: (y0 + y1) / 2.0, w: x1 - x0, h: y1 - y0, score });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn centred_small_box() {
        let t = assign_targets::<f32>(&[vec![GroundTruthBox::new(1, 0.5, 0.5, 0.05, 0.05)]], 3, 64);
        assert_eq!(t[0].positive_cells(), 1);
        assert_eq!(t[0].positive.data()[4 * 8 + 4], 1.0);
        assert_eq!(t[0].classes.data()[64 + 4 * 8 + 4], 1.0);
        assert_eq!(t[1].positive_cells() + t[2].positive_cells(), 0);
    }

    #[test]
    fn no_boxes_no_positives() {
        let t = assign_targets::<f32>(&[vec![], vec![]], 3, 64);
        for s in &t {
            assert_eq!(s.positive_cells(), 0);
            assert!(s.classes.data().iter().all(|&v| v == 0.0));
            assert!(s.negative.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn collision_keeps_larger() {
        let small = GroundTruthBox::new(0, 0.51, 0.51, 0.04, 0.04);
        let large = GroundTruthBox::new(2, 0.52, 0.52, 0.08, 0.06);
        let t = assign_targets::<f32>(&[vec![small, large]], 3, 64);
        assert_eq!(t[0].positive_cells(), 1);
        assert_eq!(t[0].classes.data()[2 * 64 + 4 * 8 + 4], 1.0);
    }

    #[test]
    fn very_negative_logits_decode_to_nothing() {
        let preds: Vec<Tensor<f32>> = [8, 4, 2].iter().map(|&g| Tensor::full(&[1, 8, g, g], -100.0)).collect();
        assert!(decode(&preds, 64, 1e-9)[0].is_empty());
    }

    fn arb_box() -> impl Strategy<Value = GroundTruthBox> {
        (0..3usize, 0.02..0.6f64, 0.02..0.6f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(c, w, h, u, v)| {
            GroundTruthBox::new(c, w / 2.0 + u * (1.0 - w), h / 2.0 + v * (1.0 - h), w, h)
        })
    }

    proptest! {
        #[test]
        fn one_positive_per_surviving_box(boxes in prop::collection::vec(arb_box(), 0..8)) {
            let t = assign_targets::<f64>(&[boxes.clone()], 3, 64);
            // brute-force scan: count distinct (scale, cell) pairs the boxes land on
            let mut cells: Vec<(usize, usize, usize)> = boxes.iter().map(|b| {
                let s = scale_for(b);
                let (c, r) = cell_of(b, 64 / STRIDES[s]);
                (s, r, c)
            }).collect();
            cells.sort();
            cells.dedup();
            let total: usize = t.iter().map(|s| s.positive_cells()).sum();
            prop_assert_eq!(total, cells.len());
            for s in &t {
                let classes_per_cell: f64 = s.classes.data().iter().sum();
                prop_assert_eq!(classes_per_cell as usize, s.positive_cells());
            }
        }

        #[test]
        fn encode_decode_round_trip(boxes in prop::collection::vec(arb_box(), 1..5)) {
            let preds = encode::<f32>(&[boxes.clone()], 3, 64, 40.0);
            let dets = &decode(&preds, 64, 0.5)[0];
            let t = assign_targets::<f64>(&[boxes.clone()], 3, 64);
            prop_assert_eq!(dets.len(), t.iter().map(|s| s.positive_cells()).sum::<usize>());
            for d in dets {
                let hit = boxes.iter().any(|b| {
                    b.class_id == d.class_id
                        && (b.cx - d.cx).abs() <= 1e-5 && (b.cy - d.cy).abs() <= 1e-5
                        && (b.w - d.w).abs() <= 1e-5 && (b.h - d.h).abs() <= 1e-5
                });
                prop_assert!(hit, "{:?} not in {:?}", d, boxes);
            }
        }

        #[test]
        fn lower_threshold_is_superset(seed in 0u64..1000, hi in 0.0..1.0f64, lo_frac in 0.0..1.0f64) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let preds: Vec<Tensor<f32>> = [8, 4, 2].iter().map(|&g| Tensor::uniform(&[1, 8, g, g], -4.0, 4.0, &mut rng)).collect();
            let strict = &decode(&preds, 64, hi)[0];
            let loose = &decode(&preds, 64, hi * lo_frac)[0];
            for d in strict {
                prop_assert!(loose.contains(d));
            }
        }
    }
}
