//! Detector building blocks and the parameter store they register into.
//!
//! Blocks own only [`ParamId`]s; their tensors live in a [`ParamStore`]. A
//! forward pass binds the store onto a [`Graph`] once and hands each block the
//! resulting slice of [`Var`]s.

use crate::attention::{attention_cost, AttentionConfig};
use crate::autograd::{Graph, Var};
use crate::conv::ConvGeom;
use crate::error::{cfg_err, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: String, t: Tensor<T>) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Registers every parameter on `g`, as differentiable leaves when `trainable`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| if trainable { g.leaf_ref(t) } else { g.constant_ref(t) }).collect()
    }
}

/// Seeded parameter initializer with a hierarchical name prefix.
pub struct Builder<'s, T: Real> {
    store: &'s mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'s, T: Real> Builder<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: Vec::new() }
    }

    pub fn push(&mut self, part: impl Into<String>) {
        self.prefix.push(part.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` with `part` appended to the name prefix.
    pub fn scoped<R>(&mut self, part: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push(part);
        let r = f(self);
        self.pop();
        r
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    /// Centered uniform `U(-b, b)` with `b = gain·√(3 / fan_in)`.
    pub fn uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize, gain: f64) -> ParamId {
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        self.store.push(self.full_name(leaf), t)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.push(self.full_name(leaf), Tensor::full(shape, T::of(value)))
    }
}

/// Gain for layers followed by SiLU.
const ACT_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(cfg_err!("{name}: groups={groups} must divide c_in={c_in} and c_out={c_out}"));
        }
        b.push(name);
        let fan_in = c_in / groups * kernel.0 * kernel.1;
        let weight = b.uniform("weight", &[c_out, c_in / groups, kernel.0, kernel.1], fan_in, gain);
        let bias = bias.then(|| b.constant("bias", &[c_out], 0.0));
        b.pop();
        Ok(Self { weight, bias, c_in, c_out, kernel, stride, padding, groups })
    }

    pub fn forward<'a, T: Real>(&self, g: &mut Graph<'a, T>, p: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight.0], self.bias.map(|b| p[b.0]), self.stride, self.padding, self.groups)
    }

    pub fn param_count(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.c_in / self.groups * self.c_out + self.bias.map_or(0, |_| self.c_out)
    }

    /// FLOPs for one image of `hw` and the output spatial size.
    pub fn flops(&self, hw: (usize, usize)) -> Result<(u64, (usize, usize))> {
        let geom = ConvGeom::new(
            &[1, self.c_in, hw.0, hw.1],
            &[self.c_out, self.c_in / self.groups, self.kernel.0, self.kernel.1],
            self.stride,
            self.padding,
            self.groups,
        )?;
        Ok((geom.flops_per_image(), (geom.ho, geom.wo)))
    }
}

/// Bias-free convolution, per-channel affine (scale + bias, no running
/// statistics), optional SiLU.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub scale: ParamId,
    pub shift: ParamId,
    pub act: bool,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        act: bool,
    ) -> Result<Self> {
        b.push(name);
        let gain = if act { ACT_GAIN } else { 1.0 };
        let conv = Conv2d::new(b, "conv", c_in, c_out, (k, k), stride, k / 2, 1, false, gain)?;
        let scale = b.constant("scale", &[c_out], 1.0);
        let shift = b.constant("shift", &[c_out], 0.0);
        b.pop();
        Ok(Self { conv, scale, shift, act })
    }

    pub fn forward<'a, T: Real>(&self, g: &mut Graph<'a, T>, p: &[Var], x: Var) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = g.channel_affine(y, p[self.scale.0], p[self.shift.0])?;
        if self.act {
            g.silu(y)
        } else {
            Ok(y)
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + 2 * self.conv.c_out
    }

    pub fn flops(&self, hw: (usize, usize)) -> Result<(u64, (usize, usize))> {
        self.conv.flops(hw)
    }
}

/// Branch layout of a multi-kernel convolution block.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiKernelConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernels: Vec<(usize, usize)>,
    pub stride: usize,
}

impl MultiKernelConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(cfg_err!("multi-kernel conv needs at least one branch"));
        }
        if self.stride == 0 {
            return Err(cfg_err!("multi-kernel conv stride must be positive"));
        }
        if let Some(k) = self.kernels.iter().find(|k| k.0 % 2 == 0 || k.1 % 2 == 0) {
            return Err(cfg_err!(
                "multi-kernel conv branch {k:?}: even kernels cannot be padded to the shared output shape"
            ));
        }
        Ok(())
    }
}

/// Sum of parallel convolutions `Σ W_i * x + b_i`, followed by SiLU. Every
/// branch is padded by `(k-1)/2` so all branches produce the same grid.
#[derive(Debug, Clone)]
pub struct MultiKernelConv {
    pub spec: MultiKernelConvSpec,
    pub branches: Vec<Conv2d>,
}

impl MultiKernelConv {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, spec: MultiKernelConvSpec) -> Result<Self> {
        spec.validate()?;
        b.push(name);
        let gain = ACT_GAIN / (spec.kernels.len() as f64).sqrt();
        let branches = spec
            .kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                if k.0 != k.1 {
                    return Err(cfg_err!("multi-kernel conv branch {i}: kernel {k:?} must be square"));
                }
                Conv2d::new(b, &format!("branch{i}"), spec.c_in, spec.c_out, k, spec.stride, k.0 / 2, 1, true, gain)
            })
            .collect::<Result<Vec<_>>>()?;
        b.pop();
        Ok(Self { spec, branches })
    }

    /// Branch sum before the activation.
    pub fn pre_activation<'a, T: Real>(&self, g: &mut Graph<'a, T>, p: &[Var], x: Var) -> Result<Var> {
        let mut acc = self.branches[0].forward(g, p, x)?;
        for br in &self.branches[1..] {
            let y = br.forward(g, p, x)?;
            acc = g.add(acc, y)?;
        }
        Ok(acc)
    }

    pub fn forward<'a, T: Real>(&self, g: &mut Graph<'a, T>, p: &[Var], x: Var) -> Result<Var> {
        let y = self.pre_activation(g, p, x)?;
        g.silu(y)
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(Conv2d::param_count).sum()
    }

    pub fn flops(&self, hw: (usize, usize)) -> Result<(u64, (usize, usize))> {
        let mut total = 0;
        let mut out = hw;
        for br in &self.branches {
            let (f, o) = br.flops(hw)?;
            total += f;
            out = o;
        }
        Ok((total, out))
    }
}

/// Depthwise 7×7 convolution followed by a pointwise 1×1, both with biases.
/// Used as the positional term of the attention block.
#[derive(Debug, Clone)]
pub struct SepConvPos {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
    pub channels: usize,
}

impl SepConvPos {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        b.push(name);
        let depthwise = Conv2d::new(b, "depthwise", channels, channels, (7, 7), 1, 3, channels, true, 1.0)?;
        let pointwise = Conv2d::new(b, "pointwise", channels, channels, (1, 1), 1, 0, 1, true, 1.0)?;
        b.pop();
        Ok(Self { depthwise, pointwise, channels })
    }

    pub fn forward<'a, T: Real>(&self, g: &mut Graph<'a, T>, p: &[Var], x: Var) -> Result<Var> {
        let y = self.depthwise.forward(g, p, x)?;
        self.pointwise.forward(g, p, y)
    }

    /// `49·C + C² + 2·C`.
    pub fn analytic_params(channels: usize) -> usize {
        49 * channels + channels * channels + 2 * channels
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count()
    }

    pub fn flops(&self, hw: (usize, usize)) -> Result<u64> {
        Ok(self.depthwise.flops(hw)?.0 + self.pointwise.flops(hw)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RElanSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub n_branches: usize,
    pub expansion: f64,
    pub residual_scale: f64,
}

impl RElanSpec {
    pub fn new(c_in: usize, c_out: usize, n_branches: usize) -> Self {
        Self { c_in, c_out, n_branches, expansion: 0.5, residual_scale: 1.0 }
    }

    pub fn hidden(&self) -> usize {
        (self.c_out as f64 * self.expansion).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.n_branches == 0 {
            return Err(cfg_err!("R-ELAN needs c_in, c_out, n_branches ≥ 1 ({self:?})"));
        }
        if !(self.expansion > 0.0 && self.expansion <= 1.0) {
            return Err(cfg_err!("R-ELAN expansion {} outside (0, 1]", self.expansion));
        }
        if self.hidden() == 0 {
            return Err(cfg_err!("R-ELAN hidden width round({}·{}) is zero", self.c_out, self.expansion));
        }
        Ok(())
    }
}

/// Residual layer-aggregation block.
///
/// ```text
/// x ─ entry(1×1) ─ h0 ─ [3×3,3×3] ─ h1 ─ … ─ hn
///                  └──────── concat(h0..hn) ─ exit(1×1) ─ (+) ─ out
/// x ─────────────────────── γ · proj(x) ─────────────────┘
/// ```
#[derive(Debug, Clone)]
pub struct RElan {
    pub spec: RElanSpec,
    pub entry: ConvUnit,
    pub bottlenecks: Vec<(ConvUnit, ConvUnit)>,
    pub exit: ConvUnit,
    pub proj: Option<Conv2d>,
}

impl RElan {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, spec: RElanSpec) -> Result<Self> {
        spec.validate()?;
        let hidden = spec.hidden();
        b.push(name);
        let entry = ConvUnit::new(b, "entry", spec.c_in, hidden, 1, 1, true)?;
        let bottlenecks = (0..spec.n_branches)
            .map(|i| {
                b.scoped(format!("bottleneck{i}"), |b| {
                    Ok((ConvUnit::new(b, "conv1", hidden, hidden, 3, 1, true)?, ConvUnit::new(b, "conv2", hidden, hidden, 3, 1, true)?))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let exit = ConvUnit::new(b, "exit", hidden * (spec.n_branches + 1), spec.c_out, 1, 1, false)?;
        let proj = (spec.c_in != spec.c_out)
            .then(|| Conv2d::new(b, "proj", spec.c_in, spec.c_out, (1, 1), 1, 0, 1, true, 1.0))
            .transpose()?;
        b.pop();
        Ok(Self { spec, entry, bottlenecks, exit, proj })
    }

    pub fn forward<'a, T: Real>(&self, g: &mut Graph<'a, T>, p: &[Var], x: Var) -> Result<Var> {
        let mut h = self.entry.forward(g, p, x)?;
        let mut kept = vec![h];
        for (c1, c2) in &self.bottlenecks {
            let t = c1.forward(g, p, h)?;
            h = c2.forward(g, p, t)?;
            kept.push(h);
        }
        let cat = g.concat(&kept, 1)?;
        let out = self.exit.forward(g, p, cat)?;
        let skip = match &self.proj {
            Some(proj) => proj.forward(g, p, x)?,
            None => x,
        };
        let skip = if self.spec.residual_scale == 1.0 { skip } else { g.scale(skip, self.spec.residual_scale)? };
        g.add(out, skip)
    }

    /// Closed-form count from the block shape alone.
    pub fn analytic_params(spec: &RElanSpec) -> usize {
        let h = spec.hidden();
        let entry = spec.c_in * h + 2 * h;
        let bottleneck = 2 * (9 * h * h + 2 * h);
        let exit = (spec.n_branches + 1) * h * spec.c_out + 2 * spec.c_out;
        let proj = if spec.c_in != spec.c_out { spec.c_in * spec.c_out + spec.c_out } else { 0 };
        entry + spec.n_branches * bottleneck + exit + proj
    }

    pub fn param_count(&self) -> usize {
        self.entry.param_count()
            + self.bottlenecks.iter().map(|(a, b)| a.param_count() + b.param_count()).sum::<usize>()
            + self.exit.param_count()
            + self.proj.as_ref().map_or(0, Conv2d::param_count)
    }

    pub fn flops(&self, hw: (usize, usize)) -> Result<u64> {
        let mut total = self.entry.flops(hw)?.0 + self.exit.flops(hw)?.0;
        for (a, b) in &self.bottlenecks {
            total += a.flops(hw)?.0 + b.flops(hw)?.0;
        }
        if let Some(proj) = &self.proj {
            total += proj.flops(hw)?.0;
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnBlockSpec {
    pub channels: usize,
    pub attention: AttentionConfig,
    pub mlp_ratio: f64,
}

impl AttnBlockSpec {
    /// `channels` split into heads of up to `head_dim` channels.
    pub fn new(channels: usize, head_dim: usize, num_areas: usize, mlp_ratio: f64) -> Self {
        let max_heads = (channels / head_dim.max(1)).max(1);
        let heads = (1..=max_heads).rev().find(|h| channels % h == 0).unwrap_or(1);
        Self {
            channels,
            attention: AttentionConfig { num_heads: heads, head_dim: channels / heads, num_areas, ..Default::default() },
            mlp_ratio,
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.channels as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.attention.num_heads * self.attention.head_dim != self.channels {
            return Err(cfg_err!(
                "attention block: {} channels not divisible into {} heads",
                self.channels,
                self.attention.num_heads
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(cfg_err!("attention block: mlp_ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn check_tokens(&self, h: usize, w: usize) -> Result<()> {
        if (h * w) % self.attention.num_areas != 0 {
            return Err(cfg_err!(
                "attention block: {h}×{w} = {} tokens not divisible by {} areas",
                h * w,
                self.attention.num_areas
            ));
        }
        Ok(())
    }
}

/// Area attention with a separable positional term, followed by an MLP; both
/// sub-blocks are wrapped in skip connections.
///
/// `y = x + proj(attn(q, k, v) + pe(v))`, `out = y + mlp(y)`.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub spec: AttnBlockSpec,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub pe: SepConvPos,
    pub proj: Conv2d,
    pub mlp_in: Conv2d,
    pub mlp_out: Conv2d,
}

impl AttnBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, spec: AttnBlockSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        let hidden = spec.mlp_hidden();
        b.push(name);
        let pw = |b: &mut Builder<'_, T>, n: &str, ci: usize, co: usize, gain: f64| {
            Conv2d::new(b, n, ci, co, (1, 1), 1, 0, 1, true, gain)
        };
        let q = pw(b, "q", c, c, 1.0)?;
        let k = pw(b, "k", c, c, 1.0)?;
        let v = pw(b, "v", c, c, 1.0)?;
        let pe = SepConvPos::new(b, "pe", c)?;
        let proj = pw(b, "proj", c, c, 0.5)?;
        let mlp_in = pw(b, "mlp_in", c, hidden, ACT_GAIN)?;
        let mlp_out = pw(b, "mlp_out", hidden, c, 0.5)?;
        b.pop();
        Ok(Self { spec, q, k, v, pe, proj, mlp_in, mlp_out })
    }

    pub fn forward<'a, T: Real>(&self, g: &mut Graph<'a, T>, p: &[Var], x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        self.spec.check_tokens(shape[2], shape[3])?;
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let attn = g.area_attention(q, k, v, &self.spec.attention)?;
        let pos = self.pe.forward(g, p, v)?;
        let mixed = g.add(attn, pos)?;
        let projected = self.proj.forward(g, p, mixed)?;
        let y = g.add(x, projected)?;
        let h = self.mlp_in.forward(g, p, y)?;
        let h = g.silu(h)?;
        let h = self.mlp_out.forward(g, p, h)?;
        g.add(y, h)
    }

    pub fn param_count(&self) -> usize {
        [&self.q, &self.k, &self.v, &self.proj, &self.mlp_in, &self.mlp_out].iter().map(|c| c.param_count()).sum::<usize>()
            + self.pe.param_count()
    }

    pub fn analytic_params(spec: &AttnBlockSpec) -> usize {
        let c = spec.channels;
        let h = spec.mlp_hidden();
        4 * (c * c + c) + SepConvPos::analytic_params(c) + (c * h + h) + (h * c + c)
    }

    /// Conv FLOPs and attention FLOPs for one image.
    pub fn flops(&self, hw: (usize, usize)) -> Result<(u64, u64)> {
        let mut conv = self.pe.flops(hw)?;
        for c in [&self.q, &self.k, &self.v, &self.proj, &self.mlp_in, &self.mlp_out] {
            conv += c.flops(hw)?.0;
        }
        let a = &self.spec.attention;
        let attn = a.num_heads as u64 * attention_cost(hw.0 * hw.1, a.head_dim, a.num_areas)?.flops;
        Ok((conv, attn))
    }
}
