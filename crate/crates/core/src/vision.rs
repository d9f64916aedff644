//! Mini-ResNet with batch normalization and text-conditioned batch normalization.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::{CbnInference, ResNetConfig, ResNetVariant};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Padding, Var};
use crate::math;
use crate::param::{glorot, he_kernel, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated afterwards.
    Train,
    /// Running statistics.
    Infer,
}

/// Running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Number of batches folded in (used by the cumulative average).
    pub updates: u64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self { running_mean: vec![0.0; channels], running_var: vec![1.0; channels], updates: 0 }
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update(&mut self, mean: &[f64], var: &[f64], decay: f64, rule: CbnInference) {
        let w = match rule {
            CbnInference::ExponentialMovingAverage => 1.0 - decay,
            CbnInference::MovingAverage => 1.0 / (self.updates + 1) as f64,
        };
        for (r, m) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - w) * *r + w * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - w) * *r + w * v;
        }
        self.updates += 1;
    }
}

/// One-hidden-layer MLP predicting `(Δγ, Δβ)` for a normalization layer
/// from the conditioning vector. The output layer starts at exactly zero.
#[derive(Debug, Clone)]
pub struct CbnPredictor {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub channels: usize,
}

impl CbnPredictor {
    fn register(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, q_dim: usize, hidden: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            w1: store.add(format!("{prefix}.W1"), glorot(rng, q_dim, hidden))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?,
            w2: store.add(format!("{prefix}.W2"), Tensor::zeros(&[hidden, 2 * channels]))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[2 * channels]))?,
            channels,
        })
    }

    /// `(Δγ, Δβ)`, each `[B, C]`.
    pub fn deltas(&self, g: &mut Graph<'_>, q: Var) -> Result<(Var, Var)> {
        let [w1, b1, w2, b2] = [self.w1, self.b1, self.w2, self.b2].map(|p| g.param(p));
        let h = g.matmul(q, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h)?;
        let o = g.matmul(h, w2)?;
        let o = g.add(o, b2)?;
        let dg = g.slice_cols(o, 0, self.channels)?;
        let db = g.slice_cols(o, self.channels, self.channels)?;
        Ok((dg, db))
    }
}

/// A batch-normalization layer, conditional when it owns a predictor.
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub predictor: Option<CbnPredictor>,
    /// Index into the model's running-statistics table.
    pub state: usize,
}

/// Per-forward settings of the normalization layers.
pub struct NormCtx<'a> {
    pub mode: Mode,
    pub eps: f64,
    pub states: &'a [BnState],
    pub q: Option<Var>,
    /// Train-mode normalization nodes, for the running-statistics update.
    pub recorded: Vec<(usize, Var)>,
}

impl NormLayer {
    fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: String,
        channels: usize,
        conditional: Option<(usize, usize)>,
        states: &mut Vec<(String, usize)>,
    ) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        let predictor = match conditional {
            Some((q_dim, hidden)) => {
                let prefix = format!("cbn.{}", name.trim_start_matches("resnet."));
                Some(CbnPredictor::register(store, rng, &prefix, q_dim, hidden, channels)?)
            }
            None => None,
        };
        states.push((name.clone(), channels));
        Ok(Self { name, gamma, beta, channels, predictor, state: states.len() - 1 })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, ctx: &mut NormCtx<'_>) -> Result<Var> {
        let xhat = normalize(g, x, ctx.mode, ctx.eps, &ctx.states[self.state])?;
        if ctx.mode == Mode::Train {
            ctx.recorded.push((self.state, xhat));
        }
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        match &self.predictor {
            None => g.channel_affine(xhat, gamma, beta),
            Some(pred) => {
                let q = ctx.q.ok_or(Error::MissingConditioning)?;
                conditional_affine(g, xhat, gamma, beta, q, pred)
            }
        }
    }
}

fn normalize(g: &mut Graph<'_>, x: Var, mode: Mode, eps: f64, state: &BnState) -> Result<Var> {
    match mode {
        Mode::Train => g.batch_norm_train(x, eps),
        Mode::Infer => {
            let scale: Vec<f64> = state.running_var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
            let shift: Vec<f64> = state.running_mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
            g.channel_scale_shift(x, scale, &shift)
        }
    }
}

fn conditional_affine(g: &mut Graph<'_>, xhat: Var, gamma: Var, beta: Var, q: Var, pred: &CbnPredictor) -> Result<Var> {
    let batch = g.shape(xhat)[0];
    if g.shape(q)[0] != batch {
        return Err(Error::Pairing(format!(
            "{} conditioning vectors for a batch of {batch} images",
            g.shape(q)[0]
        )));
    }
    let (dg, db) = pred.deltas(g, q)?;
    let gamma_hat = g.add(dg, gamma)?;
    let beta_hat = g.add(db, beta)?;
    g.channel_affine(xhat, gamma_hat, beta_hat)
}

/// Plain batch normalization `γ · x̂ + β` with a standalone state.
pub fn batch_norm(g: &mut Graph<'_>, x: Var, gamma: Var, beta: Var, state: &BnState, mode: Mode, eps: f64) -> Result<(Var, Var)> {
    let xhat = normalize(g, x, mode, eps, state)?;
    Ok((g.channel_affine(xhat, gamma, beta)?, xhat))
}

/// Batch normalization whose scale and shift receive per-example deltas
/// predicted from `q` (one row of `q` per image).
pub fn conditional_batch_norm(
    g: &mut Graph<'_>,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &BnState,
    mode: Mode,
    eps: f64,
    q: Var,
    pred: &CbnPredictor,
) -> Result<(Var, Var)> {
    let xhat = normalize(g, x, mode, eps, state)?;
    Ok((conditional_affine(g, xhat, gamma, beta, q, pred)?, xhat))
}

#[derive(Debug, Clone)]
pub struct Block {
    pub stage: usize,
    pub stride: usize,
    pub conv1: ParamId,
    pub norm1: NormLayer,
    pub conv2: ParamId,
    pub norm2: NormLayer,
    pub proj: Option<ParamId>,
}

impl Block {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, variant: ResNetVariant, ctx: &mut NormCtx<'_>) -> Result<Var> {
        let (k1, k2) = (g.param(self.conv1), g.param(self.conv2));
        match variant {
            ResNetVariant::V1 => {
                let a = g.conv2d(x, k1, self.stride, Padding::Same)?;
                let a = self.norm1.forward(g, a, ctx)?;
                let a = g.relu(a)?;
                let b = g.conv2d(a, k2, 1, Padding::Same)?;
                let b = self.norm2.forward(g, b, ctx)?;
                let short = self.shortcut(g, x)?;
                let y = g.add(b, short)?;
                g.relu(y)
            }
            ResNetVariant::V2 => {
                let a = self.norm1.forward(g, x, ctx)?;
                let a = g.relu(a)?;
                let b = g.conv2d(a, k1, self.stride, Padding::Same)?;
                let b = self.norm2.forward(g, b, ctx)?;
                let b = g.relu(b)?;
                let c = g.conv2d(b, k2, 1, Padding::Same)?;
                let short = if self.proj.is_some() { self.shortcut(g, a)? } else { x };
                g.add(c, short)
            }
        }
    }

    fn shortcut(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self.proj {
            Some(p) => {
                let k = g.param(p);
                g.conv2d(x, k, self.stride, Padding::Same)
            }
            None => {
                if g.shape(x)[3] != self.norm2.channels || self.stride != 1 {
                    return Err(dim_err("identity shortcut needs matching channels and stride 1"));
                }
                Ok(x)
            }
        }
    }
}

/// Global pooled vector or a grid of spatial annotations.
#[derive(Debug, Clone, Copy)]
pub enum FeatureStack {
    /// `[B, d_pool]`
    Pool5(Var),
    /// `[B·L, d_loc]`, row `b·L + l` is location `l` of image `b`.
    Conv { grid: Var, locations: usize, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Pool5,
    Conv,
}

#[derive(Debug, Clone)]
pub struct ResNet {
    pub config: ResNetConfig,
    pub stem: ParamId,
    pub stem_norm: Option<NormLayer>,
    pub stages: Vec<Vec<Block>>,
    pub final_norm: Option<NormLayer>,
}

impl ResNet {
    /// Registers every ResNet parameter and CBN predictor. `states` collects
    /// `(name, channels)` for each normalization layer in creation order.
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &ResNetConfig,
        q_dim: usize,
        states: &mut Vec<(String, usize)>,
    ) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.stage_channels[0];
        let stem = store.add("resnet.stem.conv", he_kernel(rng, cfg.stem_kernel, cfg.stem_kernel, cfg.input_size.2, c0))?;
        let stem_norm = match cfg.variant {
            ResNetVariant::V1 => Some(NormLayer::register(store, rng, "resnet.stem.bn".into(), c0, None, states)?),
            ResNetVariant::V2 => None,
        };
        let cond = |stage: usize| cfg.stage_uses_cbn(stage).then_some((q_dim, cfg.cbn_hidden));
        let mut stages = Vec::new();
        let mut cin = c0;
        for (si, &cout) in cfg.stage_channels.iter().enumerate() {
            let stage = si + 1;
            let mut blocks = Vec::new();
            for bi in 0..cfg.blocks_per_stage[si] {
                let stride = if bi == 0 { cfg.stage_strides[si] } else { 1 };
                let prefix = format!("resnet.stage{stage}.block{bi}");
                let conv1 = store.add(format!("{prefix}.conv1"), he_kernel(rng, 3, 3, cin, cout))?;
                let n1 = match cfg.variant {
                    ResNetVariant::V1 => cout,
                    ResNetVariant::V2 => cin,
                };
                let norm1 = NormLayer::register(store, rng, format!("{prefix}.bn1"), n1, cond(stage), states)?;
                let conv2 = store.add(format!("{prefix}.conv2"), he_kernel(rng, 3, 3, cout, cout))?;
                let norm2 = NormLayer::register(store, rng, format!("{prefix}.bn2"), cout, cond(stage), states)?;
                let proj = if cin != cout || stride != 1 {
                    Some(store.add(format!("{prefix}.proj"), he_kernel(rng, 1, 1, cin, cout))?)
                } else {
                    None
                };
                blocks.push(Block { stage, stride, conv1, norm1, conv2, norm2, proj });
                cin = cout;
            }
            stages.push(blocks);
        }
        let last = cfg.num_stages();
        let final_norm = match cfg.variant {
            ResNetVariant::V1 => None,
            ResNetVariant::V2 => Some(NormLayer::register(store, rng, "resnet.final.bn".into(), cin, cond(last), states)?),
        };
        Ok(Self { config: cfg.clone(), stem, stem_norm, stages, final_norm })
    }

    /// Runs the network on `[B,H,W,C]` images.
    pub fn forward_features(&self, g: &mut Graph<'_>, images: Var, kind: FeatureKind, ctx: &mut NormCtx<'_>) -> Result<FeatureStack> {
        let cfg = &self.config;
        let (h, w, c) = cfg.input_size;
        let s = g.shape(images);
        if s.len() != 4 || s[1] != h || s[2] != w || s[3] != c {
            return Err(Error::Size(format!("images {s:?} do not match input size {h}x{w}x{c}")));
        }
        if cfg.cbn_enabled && !cfg.cbn_stages.is_empty() && ctx.q.is_none() {
            return Err(Error::MissingConditioning);
        }
        let k = g.param(self.stem);
        let mut x = g.conv2d(images, k, cfg.stem_stride, Padding::Same)?;
        if let Some(n) = &self.stem_norm {
            x = n.forward(g, x, ctx)?;
            x = g.relu(x)?;
        }
        if cfg.stem_pool {
            x = g.max_pool(x, 3, 2, Padding::Same)?;
        }
        let last_stage = match kind {
            FeatureKind::Pool5 => cfg.num_stages(),
            FeatureKind::Conv => cfg.conv_extraction_stage,
        };
        for blocks in &self.stages[..last_stage] {
            for b in blocks {
                x = b.forward(g, x, cfg.variant, ctx)?;
            }
        }
        match kind {
            FeatureKind::Pool5 => {
                if let Some(n) = &self.final_norm {
                    x = n.forward(g, x, ctx)?;
                    x = g.relu(x)?;
                }
                Ok(FeatureStack::Pool5(g.global_max_pool(x)?))
            }
            FeatureKind::Conv => {
                let s = g.shape(x).to_vec();
                let (locations, dim) = (s[1] * s[2], s[3]);
                let grid = g.reshape(x, &[s[0] * locations, dim])?;
                Ok(FeatureStack::Conv { grid, locations, dim })
            }
        }
    }

    /// Every normalization layer in registration order.
    pub fn norm_layers(&self) -> Vec<&NormLayer> {
        let mut out: Vec<&NormLayer> = self.stem_norm.iter().collect();
        for blocks in &self.stages {
            for b in blocks {
                out.push(&b.norm1);
                out.push(&b.norm2);
            }
        }
        out.extend(self.final_norm.iter());
        out
    }
}

/// Freezes every ResNet parameter; with `finetune_last_stage` the last
/// stage's convolution and projection kernels train again. CBN predictors
/// are always trainable.
pub fn set_trainability(store: &mut ParamStore, cfg: &ResNetConfig) {
    store.set_trainable_where(|n| n.starts_with("resnet."), false);
    store.set_trainable_where(|n| n.starts_with("cbn."), true);
    if cfg.finetune_last_stage {
        let prefix = format!("resnet.stage{}.", cfg.num_stages());
        store.set_trainable_where(
            |n| n.starts_with(&prefix) && (n.ends_with(".conv1") || n.ends_with(".conv2") || n.ends_with(".proj")),
            true,
        );
    }
}
