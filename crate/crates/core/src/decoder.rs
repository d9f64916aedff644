//! Conditional-GRU decoder, output layer, and search.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::attention::{modulate_annotations, prepare_grid, visual_attend_decoder, AttentionParams, PreparedKeys};
use crate::config::ModelConfig;
use crate::encoder::{Annotations, GruParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Normalizer, Var};
use crate::math;
use crate::model::Dropout;
use crate::param::{glorot, uniform, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vision::FeatureStack;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

/// Decoder-side visual attention over the conv grid.
#[derive(Debug, Clone)]
pub struct VisualAttention {
    pub params: AttentionParams,
    /// `W_v`: projection of `V_t` into the output layer.
    pub w_v: ParamId,
    /// `W_pool` for per-step re-modulation of the annotations.
    pub w_pool: ParamId,
    pub remodulate: bool,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub embedding: ParamId,
    pub rec1: GruParams,
    pub attention: AttentionParams,
    pub rec2: GruParams,
    pub w_init: ParamId,
    pub w_s: ParamId,
    pub w_c: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub visual: Option<VisualAttention>,
    pub vocab: usize,
    pub gru_dim: usize,
    pub normalizer: Normalizer,
}

/// Everything the decoder reads from the encoder side for one batch.
#[derive(Debug, Clone)]
pub struct DecodeContext {
    pub ann: Annotations,
    pub text_keys: PreparedKeys,
    pub mask: Vec<f64>,
    pub grid: Option<PreparedKeys>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// `ŝ_t`, the state after REC2.
    pub state: Var,
    /// `s_t`, REC1's proposal.
    pub proposal: Var,
    pub context: Var,
    pub visual: Option<Var>,
    pub logits: Var,
}

impl Decoder {
    /// `grid_dim` is the width of the conv grid when decoder-side visual
    /// attention is used.
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig, grid_dim: Option<usize>) -> Result<Self> {
        let (e, d, a) = (cfg.emb_dim, cfg.gru_dim, cfg.annotation_dim());
        let bound = 1.0 / math::sqrt(e as f64);
        let embedding = store.add("decoder.embedding", uniform(rng, &[cfg.tgt_vocab, e], bound))?;
        let rec1 = GruParams::register(store, rng, "decoder.rec1", e, d, crate::config::LnPlacement::None, cfg.ln_eps)?;
        let attention = AttentionParams::register(store, rng, "decoder.text_att", a, d, cfg.att_dim)?;
        let rec2 = GruParams::register(store, rng, "decoder.rec2", a, d, crate::config::LnPlacement::None, cfg.ln_eps)?;
        let w_init = store.add("decoder.W_init", glorot(rng, a, d))?;
        let w_s = store.add("decoder.W_s", glorot(rng, d, e))?;
        let w_c = store.add("decoder.W_c", glorot(rng, a, e))?;
        let w_o = store.add("decoder.W_o", glorot(rng, e, cfg.tgt_vocab))?;
        let b_o = store.add("decoder.b_o", Tensor::zeros(&[cfg.tgt_vocab]))?;
        let visual = match grid_dim {
            Some(l) => Some(VisualAttention {
                params: AttentionParams::register(store, rng, "decoder.vis_att", l, d, cfg.att_dim)?,
                w_v: store.add("decoder.W_v", glorot(rng, l, e))?,
                w_pool: store.add("decoder.W_pool", glorot(rng, l, a))?,
                remodulate: cfg.conv_remodulate,
            }),
            None => None,
        };
        Ok(Self {
            embedding,
            rec1,
            attention,
            rec2,
            w_init,
            w_s,
            w_c,
            w_o,
            b_o,
            visual,
            vocab: cfg.tgt_vocab,
            gru_dim: d,
            normalizer: cfg.attention_normalizer,
        })
    }

    pub fn prepare(&self, g: &mut Graph<'_>, ann: Annotations, grid: Option<&FeatureStack>) -> Result<DecodeContext> {
        let keys = ann.keys(g)?;
        let text_keys = self.attention.prepare(g, keys, ann.len())?;
        let grid = match (&self.visual, grid) {
            (Some(vis), Some(fs)) => Some(prepare_grid(g, &vis.params, fs)?),
            (Some(_), None) => return Err(Error::Kind { expected: "conv" }),
            (None, _) => None,
        };
        Ok(DecodeContext { mask: ann.mask.clone(), ann, text_keys, grid })
    }

    /// `tanh(W_init · mean of unmasked h_i)`, `[B, d_gru]`.
    pub fn init_state(&self, g: &mut Graph<'_>, ann: &Annotations) -> Result<Var> {
        let mean = ann.masked_mean(g)?;
        let w = g.param(self.w_init);
        let pre = g.matmul(mean, w)?;
        g.tanh(pre)
    }

    /// REC1, attention, REC2, then the output layer. `y_prev` holds one
    /// token id per batch row.
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        ctx: &DecodeContext,
        s_prev: Var,
        y_prev: &[usize],
        dropout: &mut Dropout,
    ) -> Result<StepOutput> {
        g.counters.decoder_steps += 1;
        let table = g.param(self.embedding);
        let y = g.gather(table, y_prev)?;
        let y_in = dropout.apply(g, y, dropout.config().cgru_in)?;
        let proposal = self.rec1.step(g, y_in, s_prev)?;

        let mut visual = None;
        let mut text_keys = ctx.text_keys;
        if let (Some(vis), Some(grid)) = (&self.visual, &ctx.grid) {
            let v = visual_attend_decoder(g, &vis.params, grid, proposal, self.normalizer)?;
            if vis.remodulate {
                let ann = modulate_annotations(g, &ctx.ann, v, vis.w_pool)?;
                let keys = ann.keys(g)?;
                text_keys = self.attention.prepare(g, keys, ann.len())?;
            } else {
                visual = Some(v);
            }
        }
        g.counters.decoder_attends += 1;
        let (context, _) = self.attention.attend(g, &text_keys, &ctx.mask, proposal, self.normalizer)?;
        let state = self.rec2.step(g, context, proposal)?;
        let s_out = dropout.apply(g, state, dropout.config().cgru_out)?;
        let logits = self.output_logits(g, y, s_out, context, visual, dropout)?;
        Ok(StepOutput { state, proposal, context, visual, logits })
    }

    /// `W_o · tanh(y_{t−1} + W_s ŝ_t + W_c c_t [+ W_v V_t]) + b_o`.
    pub fn output_logits(
        &self,
        g: &mut Graph<'_>,
        y_prev: Var,
        s_hat: Var,
        context: Var,
        visual: Option<Var>,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let (ws, wc) = (g.param(self.w_s), g.param(self.w_c));
        let a = g.matmul(s_hat, ws)?;
        let b = g.matmul(context, wc)?;
        let mut pre = g.add(y_prev, a)?;
        pre = g.add(pre, b)?;
        if let (Some(v), Some(vis)) = (visual, &self.visual) {
            let wv = g.param(vis.w_v);
            let c = g.matmul(v, wv)?;
            pre = g.add(pre, c)?;
        }
        let o = g.tanh(pre)?;
        let o = dropout.apply(g, o, dropout.config().softmax_out)?;
        let (wo, bo) = (g.param(self.w_o), g.param(self.b_o));
        let logits = g.matmul(o, wo)?;
        g.add(logits, bo)
    }

    /// Teacher-forced negative log-likelihood summed over unmasked target
    /// tokens. `tgt` is `[B, K]` starting with the start token; position `t`
    /// predicts position `t + 1`. Returns the summed loss and the token count.
    pub fn teacher_forced_nll(
        &self,
        g: &mut Graph<'_>,
        ctx: &DecodeContext,
        tgt: &[usize],
        tgt_mask: &[f64],
        batch: usize,
        dropout: &mut Dropout,
    ) -> Result<(Var, f64)> {
        if batch == 0 || tgt.len() != tgt_mask.len() || !tgt.len().is_multiple_of(batch) {
            return Err(crate::error::dim_err("targets and mask must both be [B, K]"));
        }
        let k = tgt.len() / batch;
        let count: f64 = (0..batch).flat_map(|b| (1..k).map(move |t| (b, t))).map(|(b, t)| tgt_mask[b * k + t]).sum();
        if count == 0.0 {
            return Err(Error::EmptySupport("no target tokens"));
        }
        let mut state = self.init_state(g, &ctx.ann)?;
        let mut total: Option<Var> = None;
        for t in 0..k - 1 {
            let weights: Vec<f64> = (0..batch).map(|b| tgt_mask[b * k + t + 1]).collect();
            if weights.iter().all(|&w| w == 0.0) {
                break;
            }
            let prev: Vec<usize> = (0..batch).map(|b| tgt[b * k + t]).collect();
            let targets: Vec<usize> = (0..batch).map(|b| tgt[b * k + t + 1]).collect();
            let out = self.step(g, ctx, state, &prev, dropout)?;
            let nll = g.cross_entropy(out.logits, &targets, &weights)?;
            total = Some(match total {
                Some(acc) => g.add(acc, nll)?,
                None => nll,
            });
            state = out.state;
        }
        Ok((total.expect("at least one step"), count))
    }
}

/// Log-softmax of one row of logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| math::exp(x - max)).sum();
    let lz = max + math::ln(z);
    logits.iter().map(|&x| x - lz).collect()
}

/// A model that can be advanced one token at a time.
pub trait StepModel {
    type State: Clone;

    fn initial(&mut self) -> Result<Self::State>;

    /// Feeds `prev` and returns the next state and log-probabilities over the
    /// vocabulary.
    fn step(&mut self, state: &Self::State, prev: usize) -> Result<(Self::State, Vec<f64>)>;
}

#[derive(Debug, Clone)]
pub struct Hypothesis<S> {
    /// Generated tokens, without the start token; ends with the end token
    /// when `finished`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: S,
    pub finished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchParams {
    pub beam: usize,
    /// Maximum number of generated tokens, end token included.
    pub max_len: usize,
    pub start: usize,
    pub end: usize,
    /// Scores are `log_prob / len^length_penalty`; 0 disables normalization.
    pub length_penalty: f64,
}

impl SearchParams {
    pub fn new(beam: usize, max_len: usize) -> Self {
        Self { beam, max_len, start: START, end: END, length_penalty: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Parameter("max_len must be positive".into()));
        }
        if self.beam == 0 {
            return Err(Error::Parameter("beam must be at least 1".into()));
        }
        Ok(())
    }

    fn score(&self, log_prob: f64, len: usize) -> f64 {
        if self.length_penalty == 0.0 {
            log_prob
        } else {
            log_prob / math::powf(len.max(1) as f64, self.length_penalty)
        }
    }
}

/// Higher score first, then lexicographically smaller tokens.
fn rank(p: &SearchParams, a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    let (sa, sb) = (p.score(a.0, a.1.len()), p.score(b.0, b.1.len()));
    sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Picks the highest-scoring token at every step.
pub fn greedy<M: StepModel>(model: &mut M, p: SearchParams) -> Result<Hypothesis<M::State>> {
    p.validate()?;
    let mut hyp = Hypothesis { tokens: Vec::new(), log_prob: 0.0, state: model.initial()?, finished: false };
    while hyp.tokens.len() < p.max_len {
        let prev = hyp.tokens.last().copied().unwrap_or(p.start);
        let (state, lp) = model.step(&hyp.state, prev)?;
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        hyp.tokens.push(best);
        hyp.log_prob += lp[best];
        hyp.state = state;
        if best == p.end {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Length-bounded beam search. At each step every live hypothesis is
/// extended by every token and the best `beam` candidates survive; those
/// ending in the end token retire. Search stops once `beam` hypotheses have
/// retired or nothing is live. Ties go to the smaller token sequence, then
/// to the earlier finish.
pub fn beam_search<M: StepModel>(model: &mut M, p: SearchParams) -> Result<Hypothesis<M::State>> {
    p.validate()?;
    let mut live = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, state: model.initial()?, finished: false }];
    let mut done: Vec<Hypothesis<M::State>> = Vec::new();
    for _ in 0..p.max_len {
        let mut next_states = Vec::with_capacity(live.len());
        let mut cands: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(p.start);
            let (state, lp) = model.step(&h.state, prev)?;
            next_states.push(state);
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                cands.push((h.log_prob + l, tokens, i));
            }
        }
        cands.sort_by(|a, b| rank(&p, (a.0, &a.1), (b.0, &b.1)));
        cands.truncate(p.beam);
        let mut new_live = Vec::new();
        for (log_prob, tokens, i) in cands {
            let finished = tokens.last() == Some(&p.end);
            let hyp = Hypothesis { tokens, log_prob, state: next_states[i].clone(), finished };
            if finished {
                done.push(hyp);
            } else {
                new_live.push(hyp);
            }
        }
        live = new_live;
        if live.is_empty() || done.len() >= p.beam {
            break;
        }
    }
    done.extend(live);
    let mut best = 0;
    for i in 1..done.len() {
        if rank(&p, (done[i].log_prob, &done[i].tokens), (done[best].log_prob, &done[best].tokens)) == Ordering::Less {
            best = i;
        }
    }
    Ok(done.swap_remove(best))
}
