//! Mosaic and MixUp.

use crate::boxes::GroundTruthBox;
use crate::data::Sample;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

/// Fill value for canvas regions no source image covers.
pub const FILL: f32 = 0.5;
/// Clipped boxes keeping less than this fraction of their area are dropped.
pub const MIN_VISIBLE: f64 = 0.1;
/// Range of the per-image mosaic scale.
pub const SCALE_RANGE: (f64, f64) = (0.7, 1.3);

fn check_same_size(samples: &[&Sample]) -> Result<usize> {
    let shape = samples[0].image.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(dim_err!("augmentation expects square [3,S,S] images, got {shape:?}"));
    }
    if let Some(s) = samples.iter().find(|s| s.image.shape() != shape.as_slice()) {
        return Err(dim_err!("augmentation inputs differ in size: {shape:?} vs {:?}", s.image.shape()));
    }
    Ok(shape[1])
}

/// Four-image mosaic with a random split point in the middle half of the
/// canvas and a random scale per image.
pub fn mosaic(inputs: [&Sample; 4], seed: u64) -> Result<Sample> {
    let s = check_same_size(&inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (s / 4, 3 * s / 4);
    let center = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
    let scales = std::array::from_fn(|_| rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1));
    mosaic_at(inputs, center, scales)
}

/// Mosaic with an explicit split point `(x, y)` in pixels and per-image
/// scales. Image `k` fills quadrant `k` (top-left, top-right, bottom-left,
/// bottom-right) and is scaled about that quadrant's outer canvas corner, so at
/// scale 1 every quadrant shows the same region of its source image.
pub fn mosaic_at(inputs: [&Sample; 4], center: (usize, usize), scales: [f64; 4]) -> Result<Sample> {
    let s = check_same_size(&inputs)?;
    let (xc, yc) = center;
    if xc > s || yc > s || scales.iter().any(|&k| !(k > 0.0)) {
        return Err(dim_err!("mosaic split {center:?} outside a {s}×{s} canvas or non-positive scale"));
    }
    let plane = s * s;
    let n = s as f64;
    let mut out = vec![FILL; 3 * plane];
    let mut labels = Vec::new();
    for (k, (src, &scale)) in inputs.iter().zip(&scales).enumerate() {
        let (right, bottom) = (k % 2 == 1, k >= 2);
        let (qx0, qx1) = if right { (xc, s) } else { (0, xc) };
        let (qy0, qy1) = if bottom { (yc, s) } else { (0, yc) };
        let ox = if right { n } else { 0.0 };
        let oy = if bottom { n } else { 0.0 };
        let d = src.image.data();
        for y in qy0..qy1 {
            let sy = oy + (y as f64 + 0.5 - oy) / scale;
            if !(0.0..n).contains(&sy) {
                continue;
            }
            let sy = sy as usize;
            for x in qx0..qx1 {
                let sx = ox + (x as f64 + 0.5 - ox) / scale;
                if !(0.0..n).contains(&sx) {
                    continue;
                }
                let sx = sx as usize;
                for c in 0..3 {
                    out[c * plane + y * s + x] = d[c * plane + sy * s + sx];
                }
            }
        }
        let (qx0, qx1, qy0, qy1) = (qx0 as f64 / n, qx1 as f64 / n, qy0 as f64 / n, qy1 as f64 / n);
        let (ox, oy) = (ox / n, oy / n);
        for b in &src.labels {
            let [x0, y0, x1, y1] = b.corners();
            let map = |v: f64, o: f64| o + (v - o) * scale;
            let (x0, x1, y0, y1) = (map(x0, ox), map(x1, ox), map(y0, oy), map(y1, oy));
            let full = (x1 - x0) * (y1 - y0);
            let (cx0, cx1) = (x0.max(qx0), x1.min(qx1));
            let (cy0, cy1) = (y0.max(qy0), y1.min(qy1));
            // at least one pixel in each direction, and enough of the box visible
            if cx1 - cx0 < 1.0 / n || cy1 - cy0 < 1.0 / n || (cx1 - cx0) * (cy1 - cy0) < MIN_VISIBLE * full {
                continue;
            }
            labels.push(GroundTruthBox { weight: b.weight, ..GroundTruthBox::from_corners(b.class_id, cx0, cy0, cx1, cy1) });
        }
    }
    Ok(Sample { image: Tensor::new(&[3, s, s], out)?, labels })
}

/// Blend with `λ ~ Beta(β, β)`.
pub fn mixup(a: &Sample, b: &Sample, beta: f64, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = Beta::new(beta, beta).map_err(|e| crate::error::cfg_err!("mixup beta {beta}: {e}"))?.sample(&mut rng);
    mixup_with(a, b, lambda)
}

/// `λ·a + (1−λ)·b`; labels of `a` weighted by `λ`, of `b` by `1−λ`, dropping
/// zero-weight labels.
pub fn mixup_with(a: &Sample, b: &Sample, lambda: f64) -> Result<Sample> {
    check_same_size(&[a, b])?;
    let (la, lb) = (lambda as f32, (1.0 - lambda) as f32);
    let image = a.image.zip_map(&b.image, |x, y| la * x + lb * y)?;
    let weighted = |s: &Sample, w: f64| {
        s.labels.iter().map(move |l| GroundTruthBox { weight: l.weight * w, ..*l }).filter(|l| l.weight > 0.0).collect::<Vec<_>>()
    };
    let mut labels = weighted(a, lambda);
    labels.extend(weighted(b, 1.0 - lambda));
    Ok(Sample { image, labels })
}
