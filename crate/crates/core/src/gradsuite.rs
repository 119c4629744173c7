//! The gradient-check suite: every primitive and every block, checked in f64.

use crate::attention::AttentionConfig;
use crate::autograd::{Graph, OpKind, Var};
use crate::blocks::{AttnBlockSpec, AttnBlock, Builder, Conv2d, ConvUnit, MultiKernelConv, MultiKernelConvSpec, ParamStore, RElan, RElanSpec, SepConvPos};
use crate::boxes::GroundTruthBox;
use crate::error::Result;
use crate::gradcheck::gradcheck_report;
use crate::loss::{detection_loss, LossWeights};
use crate::targets::assign_targets;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradRow {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

type Forward = Box<dyn for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: Vec<Tensor<f64>>,
    forward: Forward,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element matters.
fn project<'g>(g: &mut Graph<'g, f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv)?;
    g.sum(p)
}

fn primitive(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    shapes: &[&[usize]],
    out: &[usize],
    f: impl for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let params = shapes.iter().map(|s| rand_t(rng, s)).collect();
    let r = rand_t(rng, out);
    Case {
        name,
        params,
        forward: Box::new(move |g, v| {
            let y = f(g, v)?;
            project(g, y, &r)
        }),
    }
}

/// Block parameters followed by the block input.
fn block<B: 'static>(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    build: impl FnOnce(&mut Builder<'_, f64>) -> Result<B>,
    input: &[usize],
    out: &[usize],
    fwd: impl for<'g> Fn(&B, &mut Graph<'g, f64>, &[Var], Var) -> Result<Var> + 'static,
) -> Result<Case> {
    let mut store = ParamStore::new();
    let b = build(&mut Builder::new(&mut store, rand::Rng::gen(rng)))?;
    // perturb zero-initialized biases and affines so no path is degenerate
    let mut params: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.zip_map(&rand_t(rng, t.shape()), |a, n| a + 0.1 * n).expect("same shape")).collect();
    let k = params.len();
    params.push(rand_t(rng, input));
    let r = rand_t(rng, out);
    Ok(Case {
        name,
        params,
        forward: Box::new(move |g, v| {
            let y = fwd(&b, g, &v[..k], v[k])?;
            project(g, y, &r)
        }),
    })
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let m23: &[usize] = &[2, 3];
    let mut c = vec![
        primitive("add", rng, &[m23, m23], m23, |g, v| g.add(v[0], v[1])),
        primitive("sub", rng, &[m23, m23], m23, |g, v| g.sub(v[0], v[1])),
        primitive("mul", rng, &[m23, m23], m23, |g, v| g.mul(v[0], v[1])),
        primitive("scale", rng, &[m23], m23, |g, v| g.scale(v[0], -1.7)),
        primitive("add_scalar", rng, &[m23], m23, |g, v| g.add_scalar(v[0], 0.3)),
        primitive("square", rng, &[m23], m23, |g, v| g.square(v[0])),
        primitive("exp", rng, &[m23], m23, |g, v| g.exp(v[0])),
        primitive("sigmoid", rng, &[m23], m23, |g, v| g.sigmoid(v[0])),
        primitive("silu", rng, &[m23], m23, |g, v| g.silu(v[0])),
        primitive("softplus", rng, &[m23], m23, |g, v| g.softplus(v[0])),
        primitive("sum", rng, &[m23], &[1], |g, v| g.sum(v[0])),
        primitive("conv2d", rng, &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], &[2, 3, 3, 3], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 1, 1)
        }),
        primitive("conv2d_grouped", rng, &[&[1, 4, 4, 4], &[4, 2, 3, 3]], &[1, 4, 4, 4], |g, v| g.conv2d(v[0], v[1], None, 1, 1, 2)),
        primitive("matmul", rng, &[&[2, 3, 4], &[2, 4, 2]], &[2, 3, 2], |g, v| g.matmul(v[0], v[1])),
        primitive("transpose", rng, &[&[2, 3, 4]], &[2, 4, 3], |g, v| g.transpose(v[0])),
        primitive("softmax", rng, &[&[2, 5]], &[2, 5], |g, v| g.softmax(v[0], 1)),
        primitive("upsample_nearest2x", rng, &[&[1, 2, 2, 3]], &[1, 2, 4, 6], |g, v| g.upsample2x(v[0])),
        primitive("concat", rng, &[&[1, 2, 3, 3], &[1, 1, 3, 3]], &[1, 3, 3, 3], |g, v| g.concat(&[v[0], v[1]], 1)),
        primitive("narrow", rng, &[&[1, 4, 3, 3]], &[1, 2, 3, 3], |g, v| g.narrow(v[0], 1, 1, 2)),
        primitive("reshape", rng, &[&[2, 6]], &[3, 4], |g, v| g.reshape(v[0], &[3, 4])),
        primitive("channel_affine", rng, &[&[2, 3, 2, 2], &[3], &[3]], &[2, 3, 2, 2], |g, v| g.channel_affine(v[0], v[1], v[2])),
        primitive("area_attention", rng, &[&[1, 4, 2, 4], &[1, 4, 2, 4], &[1, 4, 2, 4]], &[1, 4, 2, 4], |g, v| {
            let cfg = AttentionConfig { num_heads: 2, head_dim: 2, num_areas: 2, ..Default::default() };
            g.area_attention(v[0], v[1], v[2], &cfg)
        }),
    ];

    c.push(block("conv_unit", rng, |b| ConvUnit::new(b, "u", 3, 4, 3, 2, true), &[1, 3, 5, 5], &[1, 4, 3, 3], |m, g, p, x| m.forward(g, p, x))?);
    c.push(block(
        "multi_kernel_conv",
        rng,
        |b| MultiKernelConv::new(b, "m", MultiKernelConvSpec { c_in: 2, c_out: 3, kernels: vec![(3, 3), (1, 1), (5, 5)], stride: 1 }),
        &[1, 2, 5, 5],
        &[1, 3, 5, 5],
        |m, g, p, x| m.forward(g, p, x),
    )?);
    c.push(block("sep_conv7x7", rng, |b| SepConvPos::new(b, "pe", 3), &[1, 3, 4, 4], &[1, 3, 4, 4], |m, g, p, x| m.forward(g, p, x))?);
    c.push(block(
        "r_elan",
        rng,
        |b| RElan::new(b, "r", RElanSpec { residual_scale: 0.5, ..RElanSpec::new(3, 4, 2) }),
        &[1, 3, 4, 4],
        &[1, 4, 4, 4],
        |m, g, p, x| m.forward(g, p, x),
    )?);
    c.push(block(
        "attn_block",
        rng,
        |b| AttnBlock::new(b, "a", AttnBlockSpec::new(4, 2, 2, 1.5)),
        &[1, 4, 2, 4],
        &[1, 4, 2, 4],
        |m, g, p, x| m.forward(g, p, x),
    )?);
    c.push(head_loss_case(rng)?);
    Ok(c)
}

/// A detection head shared over three scales, through the full loss.
fn head_loss_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    const NC: usize = 2;
    let mut store = ParamStore::new();
    let (stem, pred) = {
        let b = &mut Builder::new(&mut store, rand::Rng::gen(rng));
        (ConvUnit::new(b, "stem", 3, 3, 3, 1, true)?, Conv2d::new(b, "pred", 3, 5 + NC, (1, 1), 1, 0, 1, true, 1.0)?)
    };
    let mut params: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.zip_map(&rand_t(rng, t.shape()), |a, n| a + 0.1 * n).expect("same shape")).collect();
    let k = params.len();
    for g in [8, 4, 2] {
        params.push(rand_t(rng, &[1, 3, g, g]));
    }
    let gts = vec![vec![
        GroundTruthBox::new(0, 0.3, 0.4, 0.06, 0.08),
        GroundTruthBox::new(1, 0.6, 0.6, 0.2, 0.25),
        GroundTruthBox { weight: 0.6, ..GroundTruthBox::new(1, 0.5, 0.5, 0.7, 0.6) },
    ]];
    let targets = assign_targets::<f64>(&gts, NC, 64);
    Ok(Case {
        name: "head_loss",
        params,
        forward: Box::new(move |g, v| {
            let mut preds = Vec::new();
            for i in 0..3 {
                let y = stem.forward(g, &v[..k], v[k + i])?;
                preds.push(pred.forward(g, &v[..k], y)?);
            }
            Ok(detection_loss(g, &preds, &targets, &LossWeights::default(), 64)?.total)
        }),
    })
}

/// Names of every case, in run order.
pub fn case_names() -> Vec<&'static str> {
    cases(0).map(|c| c.into_iter().map(|c| c.name).collect()).unwrap_or_default()
}

/// Runs the suite, optionally with the backward of `fault` corrupted.
pub fn run_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradRow>> {
    cases(seed)?
        .into_iter()
        .map(|c| {
            let r = gradcheck_report(&*c.forward, &c.params, EPS, fault)?;
            Ok(GradRow { name: c.name.to_string(), max_rel_error: r.max_rel_error, coordinates: r.coordinates, passed: r.max_rel_error <= TOLERANCE })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_is_covered() {
        let names = case_names();
        for op in OpKind::PRIMITIVES {
            assert!(names.iter().any(|n| n.starts_with(op.name())), "{} missing", op.name());
        }
    }

    #[test]
    fn stock_suite_passes_deterministically() {
        let rows = run_suite(3, None).unwrap();
        for r in &rows {
            assert!(r.passed, "{}: {}", r.name, r.max_rel_error);
        }
        assert_eq!(rows, run_suite(3, None).unwrap());
    }

    #[test]
    fn fault_is_caught_and_named() {
        let rows = run_suite(1, Some(OpKind::Softplus)).unwrap();
        let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert!(failed.contains(&"softplus") && failed.contains(&"head_loss"), "{failed:?}");
        assert!(!failed.contains(&"add"));
    }
}
