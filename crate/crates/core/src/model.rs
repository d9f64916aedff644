//! The full translation model: encoder, optional image network and decoder.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{fuse_encoder_visual, modulate_annotations, prepare_grid, visual_attend_encoder, AttentionParams, FusionParams};
use crate::config::{DropoutConfig, Fusion, ModelConfig, VisualMode};
use crate::data::Batch;
use crate::decoder::{beam_search, greedy, log_softmax, DecodeContext, Decoder, Hypothesis, SearchParams, StepModel};
use crate::encoder::{Annotations, TextEncoder};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
use crate::graph::{Counters, Graph, Var};
use crate::param::{glorot, ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vision::{self, BnState, FeatureKind, FeatureStack, Mode, NormCtx, ResNet};

/// Inverted dropout with keep probabilities. Without an RNG it is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    config: DropoutConfig,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self { config: DropoutConfig::none(), rng: None }
    }

    pub fn new(config: DropoutConfig, seed: u64) -> Self {
        if config.is_disabled() {
            return Self::disabled();
        }
        Self { config, rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn config(&self) -> DropoutConfig {
        self.config
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }

    /// Zeroes each value with probability `1 − keep` and scales survivors by
    /// `1 / keep`.
    pub fn apply(&mut self, g: &mut Graph<'_>, x: Var, keep: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        if keep >= 1.0 {
            return Ok(x);
        }
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = g.input(Tensor::new(&shape, mask)?);
        g.mul(x, m)
    }
}

/// Image-side parameters.
#[derive(Debug, Clone)]
pub struct VisionPath {
    pub resnet: ResNet,
    pub kind: FeatureKind,
    /// `W_pool` gating the annotations with the pooled vector.
    pub pool_gate: Option<ParamId>,
    /// Encoder-side attention and its fusion.
    pub encoder_attention: Option<(AttentionParams, FusionParams)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: TextEncoder,
    pub vision: Option<VisionPath>,
    pub decoder: Decoder,
    /// Running statistics, one per normalization layer.
    pub bn_states: Vec<BnState>,
    pub bn_names: Vec<String>,
    /// Operation whose backward pass is sign-flipped in
    /// [`Model::loss_and_grads`]; only for exercising the gradient checker.
    pub injected_fault: Option<&'static str>,
}

/// One forward pass over a batch.
pub struct Forward {
    /// Mean negative log-likelihood per target token.
    pub loss: Var,
    pub tokens: f64,
    /// Normalized activations of each train-mode normalization layer.
    pub recorded: Vec<(usize, Var)>,
}

/// Loss, gradients and batch statistics of one training step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: f64,
    pub tokens: f64,
    pub grads: ParamGrads,
    pub bn_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
    pub counters: Counters,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = TextEncoder::register(&mut params, &mut rng, &config)?;
        let mut states = Vec::new();
        let mut grid_dim = None;
        let vision = if config.uses_images() {
            let rc = &config.resnet;
            let resnet = ResNet::register(&mut params, &mut rng, rc, config.q_dim, &mut states)?;
            let ann = config.annotation_dim();
            let (kind, pool_gate, encoder_attention) = match config.visual {
                VisualMode::Pool5 => (FeatureKind::Pool5, Some(params.add("visual.W_pool", glorot(&mut rng, rc.pool5_dim(), ann))?), None),
                VisualMode::Conv => {
                    grid_dim = Some(rc.grid_shape()?.1);
                    (FeatureKind::Conv, None, None)
                }
                VisualMode::EncoderAttention => {
                    let d_loc = rc.grid_shape()?.1;
                    let att = AttentionParams::register(&mut params, &mut rng, "enc_att", d_loc, ann, config.att_dim)?;
                    let fusion = match config.fusion {
                        Fusion::Gate => FusionParams::register_gate(&mut params, &mut rng, "enc_att", d_loc, ann)?,
                        Fusion::Concat => FusionParams::register_concat(&mut params, &mut rng, "enc_att", d_loc, ann)?,
                    };
                    (FeatureKind::Conv, None, Some((att, fusion)))
                }
                VisualMode::TextOnly => unreachable!("uses_images"),
            };
            Some(VisionPath { resnet, kind, pool_gate, encoder_attention })
        } else {
            None
        };
        let decoder = Decoder::register(&mut params, &mut rng, &config, grid_dim)?;
        if config.uses_images() {
            vision::set_trainability(&mut params, &config.resnet);
        }
        let bn_states = states.iter().map(|(_, c)| BnState::new(*c)).collect();
        let bn_names = states.into_iter().map(|(n, _)| n).collect();
        Ok(Self { config, params, encoder, vision, decoder, bn_states, bn_names, injected_fault: None })
    }

    /// Re-applies the freezing rules after parameters were replaced.
    pub fn reset_trainability(&mut self) {
        if self.vision.is_some() {
            vision::set_trainability(&mut self.params, &self.config.resnet);
        }
    }

    /// Encoder, image network and visual fusion: everything the decoder reads.
    pub fn encode_context<'p>(
        &self,
        g: &mut Graph<'p>,
        src: &[usize],
        src_mask: &[f64],
        batch: usize,
        images: Option<&Tensor>,
        mode: Mode,
        dropout: &mut Dropout,
        recorded: &mut Vec<(usize, Var)>,
    ) -> Result<DecodeContext> {
        let ann = self.encoder.encode(g, src, src_mask, batch, dropout)?;
        let (ann, grid) = match &self.vision {
            None => (ann, None),
            Some(vp) => {
                let images = images.ok_or(Error::Pairing("this variant needs one image per sentence".into()))?;
                if images.shape().first() != Some(&batch) {
                    return Err(Error::Pairing(alloc::format!("{:?} images for {batch} sentences", images.shape())));
                }
                let q = if vp.resnet.config.cbn_enabled && !vp.resnet.config.cbn_stages.is_empty() {
                    let q = self.encoder.pool_conditioning(g, &ann)?;
                    Some(if self.config.stop_gradient_q { g.detach(q) } else { q })
                } else {
                    None
                };
                let img = g.input(images.clone());
                let mut ctx = NormCtx { mode, eps: vp.resnet.config.bn_eps, states: &self.bn_states, q, recorded: vec![] };
                let feats = vp.resnet.forward_features(g, img, vp.kind, &mut ctx)?;
                recorded.extend(ctx.recorded);
                self.fuse(g, vp, ann, feats)?
            }
        };
        self.decoder.prepare(g, ann, grid.as_ref())
    }

    fn fuse(&self, g: &mut Graph<'_>, vp: &VisionPath, ann: Annotations, feats: FeatureStack) -> Result<(Annotations, Option<FeatureStack>)> {
        match (feats, vp.pool_gate, &vp.encoder_attention) {
            (FeatureStack::Pool5(v), Some(w_pool), _) => Ok((modulate_annotations(g, &ann, v, w_pool)?, None)),
            (fs @ FeatureStack::Conv { .. }, _, Some((att, fusion))) => {
                let grid = prepare_grid(g, att, &fs)?;
                let vs = visual_attend_encoder(g, att, &grid, &ann, self.config.attention_normalizer)?;
                Ok((fuse_encoder_visual(g, &ann, &vs, fusion)?, None))
            }
            (fs @ FeatureStack::Conv { .. }, _, None) => Ok((ann, Some(fs))),
            (FeatureStack::Pool5(_), None, _) => Err(Error::Kind { expected: "conv" }),
        }
    }

    /// Teacher-forced forward pass; the loss is the mean NLL per target token.
    pub fn forward<'p>(&self, g: &mut Graph<'p>, batch: &Batch, mode: Mode, dropout: &mut Dropout) -> Result<Forward> {
        let mut recorded = Vec::new();
        let ctx = self.encode_context(
            g,
            &batch.src,
            &batch.src_mask,
            batch.size,
            batch.images.as_ref(),
            mode,
            dropout,
            &mut recorded,
        )?;
        let (sum, tokens) = self.decoder.teacher_forced_nll(g, &ctx, &batch.tgt, &batch.tgt_mask, batch.size, dropout)?;
        let loss = g.scale(sum, 1.0 / tokens)?;
        Ok(Forward { loss, tokens, recorded })
    }

    /// Loss and gradients of one batch, plus the batch statistics of each
    /// train-mode normalization layer.
    pub fn loss_and_grads(&self, batch: &Batch, mode: Mode, dropout: &mut Dropout) -> Result<StepResult> {
        let mut g = Graph::new(&self.params);
        if let Some(op) = self.injected_fault {
            g.inject_sign_flip(op);
        }
        let f = self.forward(&mut g, batch, mode, dropout)?;
        let loss = g.value(f.loss).data()[0];
        let grads = g.backward(f.loss)?.params;
        let bn_stats = f
            .recorded
            .iter()
            .filter_map(|&(i, v)| g.batch_stats(v).map(|(m, s)| (i, m.to_vec(), s.to_vec())))
            .collect();
        Ok(StepResult { loss, tokens: f.tokens, grads, bn_stats, counters: g.counters })
    }

    /// Finite-difference check of every trainable parameter on one batch,
    /// with dropout off.
    pub fn gradcheck(&self, batch: &Batch, mode: Mode, opts: GradCheckOptions) -> Result<GradCheckReport> {
        let mut store = self.params.clone();
        finite_difference_check(&mut store, opts, |s, need| {
            let mut g = Graph::new(s);
            if let Some(op) = self.injected_fault {
                g.inject_sign_flip(op);
            }
            let f = self.forward(&mut g, batch, mode, &mut Dropout::disabled())?;
            let loss = g.value(f.loss).data()[0];
            let grads = if need { Some(g.backward(f.loss)?.params) } else { None };
            Ok((loss, grads))
        })
    }

    /// Fills every all-zero trainable parameter (biases, zero-initialized
    /// CBN output layers) with small random values, so that gradient checks
    /// exercise the paths they gate.
    pub fn jitter_zero_params(&mut self, seed: u64, bound: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.iter_mut() {
            if p.trainable && p.value.data().iter().all(|&v| v == 0.0) {
                for v in p.value.data_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
            }
        }
    }

    /// Mean NLL of a batch without gradients.
    pub fn loss(&self, batch: &Batch, mode: Mode) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, batch, mode, &mut Dropout::disabled())?;
        Ok(g.value(f.loss).data()[0])
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, Vec<f64>, Vec<f64>)]) {
        let rc = &self.config.resnet;
        for (i, mean, var) in stats {
            self.bn_states[*i].update(mean, var, rc.bn_decay, rc.cbn_inference);
        }
    }

    /// Translates one sentence (ids without start/end) with inference-mode
    /// normalization. `beam == 1` decodes greedily.
    pub fn translate(&self, src: &[usize], image: Option<&Tensor>, search: SearchParams) -> Result<Hypothesis<()>> {
        if src.is_empty() {
            return Err(Error::EmptyInput("empty source"));
        }
        let mut session = Session::new(self, src, image)?;
        let hyp = if search.beam == 1 { greedy(&mut session, search)? } else { beam_search(&mut session, search)? };
        Ok(Hypothesis { tokens: hyp.tokens, log_prob: hyp.log_prob, state: (), finished: hyp.finished })
    }

    /// Search settings from the config for a source of `src_len` tokens.
    pub fn search_params(&self, src_len: usize, beam: usize) -> SearchParams {
        let mut p = SearchParams::new(beam, (self.config.max_len_factor * src_len).max(1));
        p.length_penalty = self.config.length_penalty;
        p
    }
}

/// Incremental decoding of one sentence on a growing tape.
pub struct Session<'m> {
    model: &'m Model,
    graph: Graph<'m>,
    ctx: DecodeContext,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, src: &[usize], image: Option<&Tensor>) -> Result<Self> {
        let mut graph = Graph::new(&model.params);
        let image = match image {
            Some(t) => {
                let mut shape = vec![1];
                shape.extend_from_slice(t.shape());
                Some(t.clone().reshape(&shape)?)
            }
            None => None,
        };
        let mask = vec![1.0; src.len()];
        let ctx = model.encode_context(
            &mut graph,
            src,
            &mask,
            1,
            image.as_ref(),
            Mode::Infer,
            &mut Dropout::disabled(),
            &mut Vec::new(),
        )?;
        Ok(Self { model, graph, ctx })
    }

    pub fn counters(&self) -> Counters {
        self.graph.counters
    }
}

impl StepModel for Session<'_> {
    type State = Var;

    fn initial(&mut self) -> Result<Var> {
        self.model.decoder.init_state(&mut self.graph, &self.ctx.ann)
    }

    fn step(&mut self, state: &Var, prev: usize) -> Result<(Var, Vec<f64>)> {
        let out = self.model.decoder.step(&mut self.graph, &self.ctx, *state, &[prev], &mut Dropout::disabled())?;
        Ok((out.state, log_softmax(self.graph.value(out.logits).data())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CbnStages, RunVariant};
    use crate::data::EncodedPair;
    use crate::param::uniform;

    fn config(variant: RunVariant) -> ModelConfig {
        let mut cfg = ModelConfig::tiny(9, 8);
        variant.configure(&mut cfg, CbnStages::All);
        cfg
    }

    fn batch(with_images: bool) -> Batch {
        let pairs = [EncodedPair { src: vec![4, 5, 6], tgt: vec![4, 5] }, EncodedPair { src: vec![7, 8], tgt: vec![6, 7, 4] }];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, &[8, 8, 3], 1.0)).collect();
        Batch::from_examples(&pairs, with_images.then_some(imgs.as_slice()), &[0, 1], 10).unwrap()
    }

    #[test]
    fn every_variant_builds_and_runs() {
        for v in RunVariant::ALL {
            let cfg = config(v);
            let model = Model::new(cfg.clone(), 1).unwrap();
            let b = batch(cfg.uses_images());
            let r = model.loss_and_grads(&b, Mode::Train, &mut Dropout::disabled()).unwrap();
            assert!(r.loss.is_finite() && r.loss > 0.0, "{}", v.name());
            let used = match cfg.visual {
                VisualMode::TextOnly => 0,
                VisualMode::Pool5 => model.bn_states.len(),
                // Convolutional features stop before the last stage.
                _ => model.bn_names.iter().filter(|n| !n.starts_with("resnet.stage4")).count(),
            };
            assert_eq!(r.bn_stats.len(), used, "{}", v.name());
            let expected_attends = match v {
                RunVariant::CbnConv => 2 * r.counters.decoder_steps,
                _ => r.counters.decoder_steps,
            };
            assert_eq!(r.counters.decoder_attends, expected_attends, "{}", v.name());
            let img = b.images.as_ref().map(|t| Tensor::new(&[8, 8, 3], t.data()[..192].to_vec()).unwrap());
            let hyp = model.translate(&[4, 5, 6], img.as_ref(), model.search_params(3, 2)).unwrap();
            assert!(hyp.tokens.len() <= 9);
        }
    }

    #[test]
    fn full_model_gradients() {
        for v in [RunVariant::CbnPool5, RunVariant::CbnEncAtt] {
            let mut model = Model::new(config(v), 6).unwrap();
            model.jitter_zero_params(1, 0.1);
            let b = batch(true);
            let opts = GradCheckOptions { max_per_param: Some(6), ..Default::default() };
            let report = model.gradcheck(&b, Mode::Train, opts).unwrap();
            assert!(report.passes(1e-4), "{}: {} at {:?}", v.name(), report.max_rel_err, report.worst_param);
            model.injected_fault = Some("tanh");
            let report = model.gradcheck(&b, Mode::Train, opts).unwrap();
            assert!(!report.passes(1e-4), "{}", v.name());
        }
    }

    #[test]
    fn resnet_is_frozen_except_cbn() {
        let model = Model::new(config(RunVariant::CbnPool5), 2).unwrap();
        for (_, p) in model.params.iter() {
            if p.name.starts_with("resnet.") {
                assert!(!p.trainable, "{}", p.name);
            } else {
                assert!(p.trainable, "{}", p.name);
            }
        }
    }

    #[test]
    fn images_are_required_when_used() {
        let model = Model::new(config(RunVariant::CbnPool5), 2).unwrap();
        let b = batch(false);
        assert!(matches!(model.loss(&b, Mode::Train), Err(Error::Pairing(_))));
    }

    #[test]
    fn dropout_is_seeded() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full(&[4, 50], 1.0));
        let mut a = Dropout::new(DropoutConfig::standard(), 5);
        let mut b = Dropout::new(DropoutConfig::standard(), 5);
        let ya = a.apply(&mut g, x, 0.5).unwrap();
        let yb = b.apply(&mut g, x, 0.5).unwrap();
        assert_eq!(g.value(ya), g.value(yb));
        assert!(g.value(ya).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(g.value(ya).data().contains(&0.0));
        let y = Dropout::disabled().apply(&mut g, x, 0.5).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_sentence_loss_is_independent_of_batch_mates_in_inference_mode() {
        for v in [RunVariant::TextOnly, RunVariant::CbnPool5, RunVariant::CbnEncAtt, RunVariant::CbnConv] {
            let cfg = config(v);
            let model = Model::new(cfg.clone(), 4).unwrap();
            let pairs = [EncodedPair { src: vec![4, 5, 6], tgt: vec![4, 5] }, EncodedPair { src: vec![7, 8], tgt: vec![6, 7, 4] }];
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let imgs: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, &[8, 8, 3], 1.0)).collect();
            let imgs = cfg.uses_images().then_some(imgs.as_slice());
            let both = Batch::from_examples(&pairs, imgs, &[0, 1], 10).unwrap();
            let swapped = Batch::from_examples(&pairs, imgs, &[1, 0], 10).unwrap();
            let alone = [0, 1].map(|i| Batch::from_examples(&pairs, imgs, &[i], 10).unwrap());
            let mut g = Graph::new(&model.params);
            let per_sentence: Vec<(f64, f64)> = alone
                .iter()
                .map(|b| {
                    let f = model.forward(&mut g, b, Mode::Infer, &mut Dropout::disabled()).unwrap();
                    (g.value(f.loss).data()[0] * f.tokens, f.tokens)
                })
                .collect();
            let total = (per_sentence[0].0 + per_sentence[1].0) / (per_sentence[0].1 + per_sentence[1].1);
            let a = model.loss(&both, Mode::Infer).unwrap();
            let b = model.loss(&swapped, Mode::Infer).unwrap();
            assert!((a - total).abs() < 1e-12, "{}", v.name());
            assert!((a - b).abs() < 1e-12, "{}", v.name());
        }
    }
}
