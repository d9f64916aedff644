//! Additive attention and the ways visual features enter the text path.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::Annotations;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Normalizer, Var};
use crate::param::{glorot, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vision::FeatureStack;

/// `â_i = v_aᵀ tanh(W_key k_i + W_query q)`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_key: ParamId,
    pub w_query: ParamId,
    pub v_a: ParamId,
    pub key_dim: usize,
    pub query_dim: usize,
}

/// Keys with their projection, computed once and reused across queries.
#[derive(Debug, Clone, Copy)]
pub struct PreparedKeys {
    /// `[B·N, d_key]`
    pub keys: Var,
    /// `[B·N, d_att]`
    pub projected: Var,
    pub n: usize,
}

impl AttentionParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        key_dim: usize,
        query_dim: usize,
        att_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            w_key: store.add(format!("{prefix}.W_key"), glorot(rng, key_dim, att_dim))?,
            w_query: store.add(format!("{prefix}.W_query"), glorot(rng, query_dim, att_dim))?,
            v_a: store.add(format!("{prefix}.v_a"), glorot(rng, att_dim, 1))?,
            key_dim,
            query_dim,
        })
    }

    /// `keys` is `[B·N, d_key]` with row `b·N + i` the `i`-th key of row `b`.
    pub fn prepare(&self, g: &mut Graph<'_>, keys: Var, n: usize) -> Result<PreparedKeys> {
        let s = g.shape(keys);
        if s.len() != 2 || s[1] != self.key_dim || n == 0 || !s[0].is_multiple_of(n) {
            return Err(dim_err(format!("attention keys {s:?} for {n} positions of width {}", self.key_dim)));
        }
        let w = g.param(self.w_key);
        let projected = g.matmul(keys, w)?;
        Ok(PreparedKeys { keys, projected, n })
    }

    /// Context `[B, d_key]` and weights `[B, N]` for queries `[B, d_query]`.
    /// `mask` is row-major `[B, N]`.
    pub fn attend(
        &self,
        g: &mut Graph<'_>,
        keys: &PreparedKeys,
        mask: &[f64],
        query: Var,
        normalizer: Normalizer,
    ) -> Result<(Var, Var)> {
        let s = g.shape(query);
        let batch = g.shape(keys.keys)[0] / keys.n;
        if s.len() != 2 || s[0] != batch || s[1] != self.query_dim {
            return Err(dim_err(format!("attention query {s:?} for batch {batch}, width {}", self.query_dim)));
        }
        let wq = g.param(self.w_query);
        let va = g.param(self.v_a);
        let qp = g.matmul(query, wq)?;
        let qp = g.repeat_rows(qp, keys.n)?;
        let pre = g.add(keys.projected, qp)?;
        let act = g.tanh(pre)?;
        let scores = g.matmul(act, va)?;
        let scores = g.reshape(scores, &[batch, keys.n])?;
        let weights = g.softmax_masked(scores, mask, normalizer)?;
        let context = g.weighted_sum(weights, keys.keys)?;
        Ok((context, weights))
    }
}

fn grid_of(features: &FeatureStack) -> Result<(Var, usize)> {
    match *features {
        FeatureStack::Conv { grid, locations, .. } => Ok((grid, locations)),
        FeatureStack::Pool5(_) => Err(Error::Kind { expected: "conv" }),
    }
}

/// Prepares a conv grid as attention keys.
pub fn prepare_grid(g: &mut Graph<'_>, params: &AttentionParams, features: &FeatureStack) -> Result<PreparedKeys> {
    let (grid, locations) = grid_of(features)?;
    params.prepare(g, grid, locations)
}

/// Decoder-side visual attention: the proposal state `s_t` queries every
/// spatial location. Returns `V_t`, `[B, d_loc]`.
pub fn visual_attend_decoder(
    g: &mut Graph<'_>,
    params: &AttentionParams,
    grid: &PreparedKeys,
    s_t: Var,
    normalizer: Normalizer,
) -> Result<Var> {
    let batch = g.shape(s_t)[0];
    let mask = vec![1.0; batch * grid.n];
    g.counters.decoder_attends += 1;
    Ok(params.attend(g, grid, &mask, s_t, normalizer)?.0)
}

/// `h_i ← h_i ⊙ tanh(V · W_pool)` for every position; padded positions stay zero.
pub fn modulate_annotations(g: &mut Graph<'_>, ann: &Annotations, v: Var, w_pool: ParamId) -> Result<Annotations> {
    let w = g.param(w_pool);
    let gate = g.matmul(v, w)?;
    let gate = g.tanh(gate)?;
    if g.shape(gate) != [ann.batch, ann.dim] {
        return Err(dim_err(format!("modulation gate {:?} for annotations of width {}", g.shape(gate), ann.dim)));
    }
    let steps = ann.steps.iter().map(|&h| g.mul(h, gate)).collect::<Result<Vec<_>>>()?;
    Ok(Annotations { steps, ..ann.clone() })
}

/// Encoder-side visual attention: each annotation `h_i` queries the grid,
/// giving one visual vector per source position.
pub fn visual_attend_encoder(
    g: &mut Graph<'_>,
    params: &AttentionParams,
    grid: &PreparedKeys,
    ann: &Annotations,
    normalizer: Normalizer,
) -> Result<Vec<Var>> {
    let mask = vec![1.0; ann.batch * grid.n];
    let mut out = Vec::with_capacity(ann.len());
    for &h in &ann.steps {
        g.counters.encoder_attends += 1;
        out.push(params.attend(g, grid, &mask, h, normalizer)?.0);
    }
    Ok(out)
}

/// Parameters for combining `h_i` with `V_i`.
#[derive(Debug, Clone)]
pub enum FusionParams {
    /// `h_i ⊙ tanh(V_i · W_pool)`
    Gate { w_pool: ParamId },
    /// `tanh([h_i ; V_i] · W_fuse + b_fuse)`, zeroed on padding.
    Concat { w_fuse: ParamId, b_fuse: ParamId },
}

impl FusionParams {
    pub fn register_gate(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, v_dim: usize, ann_dim: usize) -> Result<Self> {
        Ok(FusionParams::Gate { w_pool: store.add(format!("{prefix}.W_pool"), glorot(rng, v_dim, ann_dim))? })
    }

    pub fn register_concat(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, v_dim: usize, ann_dim: usize) -> Result<Self> {
        Ok(FusionParams::Concat {
            w_fuse: store.add(format!("{prefix}.W_fuse"), glorot(rng, ann_dim + v_dim, ann_dim))?,
            b_fuse: store.add(format!("{prefix}.b_fuse"), Tensor::zeros(&[ann_dim]))?,
        })
    }
}

/// Per-position fusion of encoder-side visual vectors into the annotations.
pub fn fuse_encoder_visual(g: &mut Graph<'_>, ann: &Annotations, visual: &[Var], fusion: &FusionParams) -> Result<Annotations> {
    if visual.len() != ann.len() {
        return Err(Error::Pairing(format!("{} visual vectors for {} annotations", visual.len(), ann.len())));
    }
    let mut steps = Vec::with_capacity(ann.len());
    for (t, (&h, &v)) in ann.steps.iter().zip(visual).enumerate() {
        let fused = match *fusion {
            FusionParams::Gate { w_pool } => {
                let w = g.param(w_pool);
                let gate = g.matmul(v, w)?;
                let gate = g.tanh(gate)?;
                g.mul(h, gate)?
            }
            FusionParams::Concat { w_fuse, b_fuse } => {
                let (w, b) = (g.param(w_fuse), g.param(b_fuse));
                let hv = g.concat_cols(&[h, v])?;
                let pre = g.matmul(hv, w)?;
                let pre = g.add(pre, b)?;
                let out = g.tanh(pre)?;
                g.scale_rows(out, ann.mask_at(t))?
            }
        };
        if g.shape(fused) != [ann.batch, ann.dim] {
            return Err(dim_err("fused annotation width differs from the annotations"));
        }
        steps.push(fused);
    }
    Ok(Annotations { steps, ..ann.clone() })
}
