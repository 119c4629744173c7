//! Backbone, neck and head assembled from [`crate::blocks`], scaled across the
//! n/s/m/x family.
//!
//! ```text
//! stem  : conv3×3/2 ─ multi-kernel{3×3,1×1}/2                     stride 4
//! stage1: R-ELAN                                                   stride 4
//! stage2: conv3×3/2 ─ R-ELAN  ──────────── C3                      stride 8
//! stage3: conv3×3/2 ─ R-ELAN  ──────────── C4                      stride 16
//! stage4: conv3×3/2 ─ R-ELAN  ─ attn ───── P5                      stride 32
//! td16  : up(P5) ‖ C4 ─ R-ELAN ─ attn ──── T4
//! td8   : up(T4) ‖ C3 ─ R-ELAN ─────────── out8
//! bu16  : down(out8) ‖ T4 ─ R-ELAN ─────── out16
//! bu32  : down(out16) ‖ P5 ─ R-ELAN ────── out32
//! head  : per scale conv3×3 ─ conv1×1 → 5 + num_classes
//! ```

use crate::attention::Kernel;
use crate::autograd::{Graph, Var};
use crate::blocks::{AttnBlock, AttnBlockSpec, Builder, Conv2d, ConvUnit, MultiKernelConv, MultiKernelConvSpec, ParamStore, RElan, RElanSpec};
use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;
use serde::Serialize;
use std::collections::BTreeMap;

/// Output strides of the three prediction scales.
pub const STRIDES: [usize; 3] = [8, 16, 32];

const STEM_WIDTHS: [usize; 2] = [64, 128];
const STAGE_WIDTHS: [usize; 4] = [128, 256, 512, 1024];
const STAGE_DEPTHS: [usize; 4] = [2, 4, 4, 2];
const NECK_DEPTH: usize = 2;
const HEAD_DIM: usize = 32;
/// Initial objectness bias, `logit(0.01)`.
const OBJ_PRIOR: f64 = -4.595;

#[derive(Debug, Clone)]
struct Stage {
    down: Option<ConvUnit>,
    block: RElan,
}

#[derive(Debug, Clone)]
struct Head {
    stem: ConvUnit,
    pred: Conv2d,
}

#[derive(Debug, Clone)]
struct Arch {
    stem0: ConvUnit,
    stem1: MultiKernelConv,
    stages: Vec<Stage>,
    attn32: AttnBlock,
    td16: RElan,
    attn16: AttnBlock,
    td8: RElan,
    down8: ConvUnit,
    bu16: RElan,
    down16: ConvUnit,
    bu32: RElan,
    heads: Vec<Head>,
}

/// A built detector: configuration, architecture and parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    cfg: ModelConfig,
    arch: Arch,
    params: ParamStore<T>,
}

/// Per-module counts plus their total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Accounting {
    pub rows: Vec<(String, u64)>,
    pub total: u64,
}

impl Accounting {
    fn from_rows(rows: Vec<(String, u64)>) -> Self {
        let total = rows.iter().map(|r| r.1).sum();
        Self { rows, total }
    }

    pub fn get(&self, module: &str) -> Option<u64> {
        self.rows.iter().find(|r| r.0 == module).map(|r| r.1)
    }
}

impl<T: Real> Model<T> {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        Self::build_seeded(cfg, cfg.seed)
    }

    pub fn build_seeded(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let v = cfg.variant;
        let mut params = ParamStore::new();
        let b = &mut Builder::new(&mut params, seed);
        let [s0, s1] = STEM_WIDTHS.map(|c| v.width(c));
        let widths = STAGE_WIDTHS.map(|c| v.width(c));
        let depths = STAGE_DEPTHS.map(|d| v.depth(d));
        let neck_depth = v.depth(NECK_DEPTH);

        b.push("backbone");
        let (stem0, stem1) = b.scoped("stem", |b| -> Result<_> {
            let c0 = ConvUnit::new(b, "conv0", 3, s0, 3, 2, true)?;
            let spec = MultiKernelConvSpec { c_in: s0, c_out: s1, kernels: vec![(3, 3), (1, 1)], stride: 2 };
            Ok((c0, MultiKernelConv::new(b, "conv1", spec)?))
        })?;
        let mut stages = Vec::new();
        let mut c_prev = s1;
        for (i, (&c, &d)) in widths.iter().zip(&depths).enumerate() {
            let stage = b.scoped(format!("stage{}", i + 1), |b| -> Result<_> {
                let down = (i > 0).then(|| ConvUnit::new(b, "down", c_prev, c, 3, 2, true)).transpose()?;
                let c_in = if i > 0 { c } else { c_prev };
                Ok(Stage { down, block: RElan::new(b, "relan", RElanSpec::new(c_in, c, d))? })
            })?;
            stages.push(stage);
            c_prev = c;
        }
        b.pop();

        let [_, c3, c4, c5] = widths;
        let attn = |c: usize| AttnBlockSpec::new(c, HEAD_DIM, cfg.area_count, cfg.mlp_ratio);
        b.push("neck");
        let attn32 = b.scoped("attn32", |b| AttnBlock::new(b, "block", attn(c5)))?;
        let td16 = b.scoped("td16", |b| RElan::new(b, "relan", RElanSpec::new(c5 + c4, c4, neck_depth)))?;
        let attn16 = b.scoped("attn16", |b| AttnBlock::new(b, "block", attn(c4)))?;
        let td8 = b.scoped("td8", |b| RElan::new(b, "relan", RElanSpec::new(c4 + c3, c3, neck_depth)))?;
        let (down8, bu16) = b.scoped("bu16", |b| -> Result<_> {
            Ok((ConvUnit::new(b, "down", c3, c3, 3, 2, true)?, RElan::new(b, "relan", RElanSpec::new(c3 + c4, c4, neck_depth))?))
        })?;
        let (down16, bu32) = b.scoped("bu32", |b| -> Result<_> {
            Ok((ConvUnit::new(b, "down", c4, c4, 3, 2, true)?, RElan::new(b, "relan", RElanSpec::new(c4 + c5, c5, neck_depth))?))
        })?;
        b.pop();

        let outputs = 5 + cfg.num_classes;
        b.push("head");
        let heads = [c3, c4, c5]
            .iter()
            .zip(STRIDES)
            .map(|(&c, s)| {
                b.scoped(format!("s{s}"), |b| -> Result<_> {
                    let stem = ConvUnit::new(b, "conv", c, c, 3, 1, true)?;
                    let pred = Conv2d::new(b, "pred", c, outputs, (1, 1), 1, 0, 1, true, 0.1)?;
                    Ok(Head { stem, pred })
                })
            })
            .collect::<Result<Vec<_>>>()?;
        b.pop();
        for h in &heads {
            let bias = params.get_mut(h.pred.bias.expect("head bias"));
            bias.data_mut()[4] = T::of(OBJ_PRIOR);
        }

        let arch = Arch { stem0, stem1, stages, attn32, td16, attn16, td8, down8, bu16, down16, bu32, heads };
        Ok(Self { cfg: *cfg, arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Records the forward pass on `g`; `p` is `self.params().bind(g, ..)`.
    /// Returns raw predictions at strides 8, 16 and 32.
    pub fn forward<'a>(&self, g: &mut Graph<'a, T>, p: &[Var], images: Var) -> Result<[Var; 3]> {
        let shape = g.shape(images).to_vec();
        let s = self.cfg.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(dim_err!("model expects images of shape [N, 3, {s}, {s}], got {shape:?}"));
        }
        let a = &self.arch;
        g.set_scope("backbone.stem");
        let x = a.stem0.forward(g, p, images)?;
        let mut x = a.stem1.forward(g, p, x)?;
        let mut feats = Vec::new();
        for (i, st) in a.stages.iter().enumerate() {
            g.set_scope(format!("backbone.stage{}", i + 1));
            if let Some(down) = &st.down {
                x = down.forward(g, p, x)?;
            }
            x = st.block.forward(g, p, x)?;
            feats.push(x);
        }
        let (c3, c4, c5) = (feats[1], feats[2], feats[3]);

        g.set_scope("neck.attn32");
        let p5 = a.attn32.forward(g, p, c5)?;
        g.set_scope("neck.td16");
        let up = g.upsample2x(p5)?;
        let cat = g.concat(&[up, c4], 1)?;
        let t4 = a.td16.forward(g, p, cat)?;
        g.set_scope("neck.attn16");
        let t4 = a.attn16.forward(g, p, t4)?;
        g.set_scope("neck.td8");
        let up = g.upsample2x(t4)?;
        let cat = g.concat(&[up, c3], 1)?;
        let out8 = a.td8.forward(g, p, cat)?;
        g.set_scope("neck.bu16");
        let d = a.down8.forward(g, p, out8)?;
        let cat = g.concat(&[d, t4], 1)?;
        let out16 = a.bu16.forward(g, p, cat)?;
        g.set_scope("neck.bu32");
        let d = a.down16.forward(g, p, out16)?;
        let cat = g.concat(&[d, p5], 1)?;
        let out32 = a.bu32.forward(g, p, cat)?;

        let mut outs = [out8, out16, out32];
        for ((o, h), s) in outs.iter_mut().zip(&a.heads).zip(STRIDES) {
            g.set_scope(format!("head.s{s}"));
            let y = h.stem.forward(g, p, *o)?;
            *o = h.pred.forward(g, p, y)?;
        }
        g.set_scope("");
        Ok(outs)
    }

    /// Inference with the tiled attention kernel.
    pub fn predict(&self, images: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
        let mut g = Graph::new().with_attention_kernel(Kernel::Tiled);
        let p = self.params.bind(&mut g, false);
        let x = g.constant_ref(images);
        let outs = self.forward(&mut g, &p, x)?;
        Ok(outs.map(|o| g.value(o).clone()))
    }

    /// Registered parameter elements grouped by their two leading name parts.
    pub fn count_params(&self) -> Accounting {
        let mut rows: Vec<(String, u64)> = Vec::new();
        for (name, t) in self.params.iter() {
            let module = name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".");
            match rows.last_mut() {
                Some(last) if last.0 == module => last.1 += t.numel() as u64,
                _ => rows.push((module, t.numel() as u64)),
            }
        }
        Accounting::from_rows(rows)
    }

    /// Static convolution and attention FLOPs for one image of `input_size`.
    pub fn count_flops(&self, input_size: usize) -> Result<Accounting> {
        if input_size == 0 || input_size % 32 != 0 {
            return Err(dim_err!("input size {input_size} is not a positive multiple of 32"));
        }
        let a = &self.arch;
        let grid = |stride: usize| (input_size / stride, input_size / stride);
        let mut rows = Vec::new();
        let (f0, hw) = a.stem0.flops((input_size, input_size))?;
        let (f1, mut hw) = a.stem1.flops(hw)?;
        rows.push(("backbone.stem".to_string(), f0 + f1));
        for (i, st) in a.stages.iter().enumerate() {
            let mut f = 0;
            if let Some(down) = &st.down {
                let (fd, o) = down.flops(hw)?;
                f += fd;
                hw = o;
            }
            rows.push((format!("backbone.stage{}", i + 1), f + st.block.flops(hw)?));
        }
        let attn = |b: &AttnBlock, hw| -> Result<u64> {
            let (c, at) = b.flops(hw)?;
            Ok(c + at)
        };
        rows.push(("neck.attn32".into(), attn(&a.attn32, grid(32))?));
        rows.push(("neck.td16".into(), a.td16.flops(grid(16))?));
        rows.push(("neck.attn16".into(), attn(&a.attn16, grid(16))?));
        rows.push(("neck.td8".into(), a.td8.flops(grid(8))?));
        rows.push(("neck.bu16".into(), a.down8.flops(grid(8))?.0 + a.bu16.flops(grid(16))?));
        rows.push(("neck.bu32".into(), a.down16.flops(grid(16))?.0 + a.bu32.flops(grid(32))?));
        for (h, s) in a.heads.iter().zip(STRIDES) {
            rows.push((format!("head.s{s}"), h.stem.flops(grid(s))?.0 + h.pred.flops(grid(s))?.0));
        }
        Ok(Accounting::from_rows(rows))
    }

    /// Attention-only FLOPs per attention block for one image.
    pub fn attention_flops(&self, input_size: usize) -> Result<BTreeMap<String, u64>> {
        let a = &self.arch;
        let mut m = BTreeMap::new();
        for (name, b, s) in [("neck.attn32", &a.attn32, 32), ("neck.attn16", &a.attn16, 16)] {
            m.insert(name.to_string(), b.flops((input_size / s, input_size / s))?.1);
        }
        Ok(m)
    }

    /// Attention specs of the two attention blocks, stride-32 first.
    pub fn attention_specs(&self) -> [AttnBlockSpec; 2] {
        [self.arch.attn32.spec, self.arch.attn16.spec]
    }
}
