//! Composite detection loss.
//!
//! Over positive cells (weighted by the label weight `m`):
//!
//! ```text
//! λ_coord·Σ m·[(σ(tx)−x)² + (σ(ty)−y)² + (√ŵ−√w)² + (√ĥ−√h)²]
//! + λ_obj·Σ m·(σ(obj)−1)²  + λ_noobj·Σ_neg σ(obj)²
//! + λ_cls·Σ m·Σ_c BCE(cls_c, onehot_c)
//! ```
//!
//! with `√ŵ = exp(tw/2)·√(stride/S)` and `BCE(l, z) = softplus(l) − l·z`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::STRIDES;
use crate::scalar::Real;
use crate::targets::ScaleTargets;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub coord: f64,
    pub obj: f64,
    pub noobj: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { coord: 5.0, obj: 1.0, noobj: 0.5, cls: 1.0 }
    }
}

/// Weighted loss terms as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub coord: Var,
    pub obj: Var,
    pub noobj: Var,
    pub cls: Var,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub coord: f64,
    pub obj: f64,
    pub noobj: f64,
    pub cls: f64,
}

impl LossVars {
    pub fn values<T: Real>(&self, g: &Graph<'_, T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().f64();
        LossBreakdown { total: v(self.total), coord: v(self.coord), obj: v(self.obj), noobj: v(self.noobj), cls: v(self.cls) }
    }
}

fn check_finite<T: Real>(t: &Tensor<T>, what: impl FnOnce() -> String) -> Result<()> {
    if t.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Contract(format!("{} contains NaN", what())));
    }
    Ok(())
}

/// Repeats a `[N,1,G,G]` mask along the channel axis.
fn repeat_channels<T: Real>(mask: &Tensor<T>, c: usize) -> Tensor<T> {
    let (n, plane) = (mask.dim(0), mask.dim(2) * mask.dim(3));
    let mut data = Vec::with_capacity(n * c * plane);
    for img in mask.data().chunks(plane) {
        for _ in 0..c {
            data.extend_from_slice(img);
        }
    }
    Tensor::new(&[n, c, mask.dim(2), mask.dim(3)], data).expect("mask shape")
}

/// Records the loss of `preds` (strides 8, 16, 32) against `targets`.
pub fn detection_loss<'a, T: Real>(
    g: &mut Graph<'a, T>,
    preds: &[Var],
    targets: &[ScaleTargets<T>],
    w: &LossWeights,
    input_size: usize,
) -> Result<LossVars> {
    if preds.len() != targets.len() {
        return Err(Error::Contract(format!("{} prediction maps for {} target scales", preds.len(), targets.len())));
    }
    let mut terms: [Option<Var>; 4] = [None; 4];
    let mut acc = |g: &mut Graph<'a, T>, slot: usize, v: Var| -> Result<()> {
        terms[slot] = Some(match terms[slot] {
            Some(prev) => g.add(prev, v)?,
            None => v,
        });
        Ok(())
    };
    for (i, (&p, t)) in preds.iter().zip(targets).enumerate() {
        let stride = STRIDES.get(i).copied().unwrap_or(t.stride);
        check_finite(g.value(p), || format!("predictions at stride {stride}"))?;
        check_finite(&t.boxes, || format!("box targets at stride {stride}"))?;
        check_finite(&t.positive, || format!("positive mask at stride {stride}"))?;
        let shape = g.shape(p).to_vec();
        let nc = t.classes.dim(1);
        if shape != [t.positive.dim(0), 5 + nc, t.grid, t.grid] {
            return Err(Error::Contract(format!(
                "predictions at stride {stride} have shape {shape:?}, targets expect [{}, {}, {g}, {g}]",
                t.positive.dim(0),
                5 + nc,
                g = t.grid
            )));
        }
        let pos2 = g.constant(repeat_channels(&t.positive, 2));
        let pos1 = g.constant(t.positive.clone());
        let neg1 = g.constant(t.negative.clone());

        let xy_t = g.constant(crate::tensor::narrow(&t.boxes, 1, 0, 2)?);
        let wh_t = g.constant(crate::tensor::narrow(&t.boxes, 1, 2, 2)?);
        let xy = g.narrow(p, 1, 0, 2)?;
        let xy = g.sigmoid(xy)?;
        let d = g.sub(xy, xy_t)?;
        let d = g.square(d)?;
        let d = g.mul(d, pos2)?;
        let coord_xy = g.sum(d)?;
        let wh = g.narrow(p, 1, 2, 2)?;
        let wh = g.scale(wh, 0.5)?;
        let wh = g.exp(wh)?;
        let wh = g.scale(wh, (t.stride as f64 / input_size as f64).sqrt())?;
        let d = g.sub(wh, wh_t)?;
        let d = g.square(d)?;
        let d = g.mul(d, pos2)?;
        let coord_wh = g.sum(d)?;
        let coord = g.add(coord_xy, coord_wh)?;
        acc(g, 0, coord)?;

        let obj = g.narrow(p, 1, 4, 1)?;
        let obj = g.sigmoid(obj)?;
        let miss = g.add_scalar(obj, -1.0)?;
        let miss = g.square(miss)?;
        let miss = g.mul(miss, pos1)?;
        let pos_term = g.sum(miss)?;
        acc(g, 1, pos_term)?;
        let fa = g.square(obj)?;
        let fa = g.mul(fa, neg1)?;
        let neg_term = g.sum(fa)?;
        acc(g, 2, neg_term)?;

        if nc > 0 {
            let posc = g.constant(repeat_channels(&t.positive, nc));
            let onehot = g.constant(t.classes.clone());
            let logits = g.narrow(p, 1, 5, nc)?;
            let sp = g.softplus(logits)?;
            let lz = g.mul(logits, onehot)?;
            let bce = g.sub(sp, lz)?;
            let bce = g.mul(bce, posc)?;
            let cls = g.sum(bce)?;
            acc(g, 3, cls)?;
        }
    }
    let zero = || Tensor::scalar(T::zero());
    let get = |g: &mut Graph<'a, T>, slot: usize, lambda: f64| -> Result<Var> {
        let v = match terms[slot] {
            Some(v) => v,
            None => g.constant(zero()),
        };
        g.scale(v, lambda)
    };
    let coord = get(g, 0, w.coord)?;
    let obj = get(g, 1, w.obj)?;
    let noobj = get(g, 2, w.noobj)?;
    let cls = get(g, 3, w.cls)?;
    let total = g.add(coord, obj)?;
    let total = g.add(total, noobj)?;
    let total = g.add(total, cls)?;
    Ok(LossVars { total, coord, obj, noobj, cls })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::GroundTruthBox;
    use crate::targets::{assign_targets, encode};
    use crate::tensor::sigmoid_scalar;

    fn boxes() -> Vec<Vec<GroundTruthBox>> {
        vec![
            vec![GroundTruthBox::new(0, 0.3, 0.3, 0.05, 0.07), GroundTruthBox::new(2, 0.6, 0.7, 0.25, 0.2)],
            vec![GroundTruthBox::new(1, 0.5, 0.5, 0.6, 0.5)],
        ]
    }

    fn eval(preds: &[Tensor<f64>], targets: &[ScaleTargets<f64>], w: &LossWeights) -> LossBreakdown {
        let mut g = Graph::new();
        let p: Vec<Var> = preds.iter().map(|t| g.constant(t.clone())).collect();
        let l = detection_loss(&mut g, &p, targets, w, 64).unwrap();
        l.values(&g)
    }

    /// Predictions with saturated logits; targets rebuilt from the predictions'
    /// own decoded values so every residual is exactly zero.
    #[test]
    fn zero_at_perfection() {
        let preds = encode::<f64>(&boxes(), 3, 64, 1000.0);
        let mut targets = assign_targets::<f64>(&boxes(), 3, 64);
        for (t, p) in targets.iter_mut().zip(&preds) {
            let plane = t.grid * t.grid;
            let unit = (t.stride as f64 / 64.0).sqrt();
            for img in 0..2 {
                for cell in 0..plane {
                    let at = |c: usize| p.data()[(img * 8 + c) * plane + cell];
                    let vals = [sigmoid_scalar(at(0)), sigmoid_scalar(at(1)), (at(2) * 0.5).exp() * unit, (at(3) * 0.5).exp() * unit];
                    for (c, v) in vals.into_iter().enumerate() {
                        t.boxes.data_mut()[(img * 4 + c) * plane + cell] = v;
                    }
                }
            }
        }
        let l = eval(&preds, &targets, &LossWeights::default());
        assert_eq!(l, LossBreakdown::default());
    }

    #[test]
    fn encoded_predictions_are_near_zero() {
        let preds = encode::<f64>(&boxes(), 3, 64, 1000.0);
        let targets = assign_targets::<f64>(&boxes(), 3, 64);
        let l = eval(&preds, &targets, &LossWeights::default());
        assert!(l.total >= 0.0 && l.total <= 1e-20, "{l:?}");
    }

    #[test]
    fn weights_scale_their_term_only() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let preds: Vec<Tensor<f64>> = [8, 4, 2].iter().map(|&g| Tensor::uniform(&[2, 8, g, g], -2.0, 2.0, &mut rng)).collect();
        let targets = assign_targets::<f64>(&boxes(), 3, 64);
        let base = LossWeights::default();
        let a = eval(&preds, &targets, &base);
        let b = eval(&preds, &targets, &LossWeights { coord: 2.0 * base.coord, ..base });
        assert_eq!(b.coord, 2.0 * a.coord);
        assert_eq!((b.obj, b.noobj, b.cls), (a.obj, a.noobj, a.cls));
        assert!(a.coord > 0.0 && a.obj > 0.0 && a.noobj > 0.0 && a.cls > 0.0);
    }

    #[test]
    fn nan_names_the_tensor() {
        let mut preds: Vec<Tensor<f64>> = [8, 4, 2].iter().map(|&g| Tensor::zeros(&[2, 8, g, g])).collect();
        preds[1].data_mut()[3] = f64::NAN;
        let targets = assign_targets::<f64>(&boxes(), 3, 64);
        let mut g = Graph::new();
        let p: Vec<Var> = preds.iter().map(|t| g.constant(t.clone())).collect();
        match detection_loss(&mut g, &p, &targets, &LossWeights::default(), 64) {
            Err(Error::Contract(m)) => assert!(m.contains("stride 16"), "{m}"),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }
}
