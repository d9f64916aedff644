//! Bidirectional GRU text encoder and the pooled conditioning vector.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::LnPlacement;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::Dropout;
use crate::param::{glorot, ParamId, ParamStore};
use crate::tensor::Tensor;

/// How the three GRU pre-activations are shifted (and optionally normalized).
#[derive(Debug, Clone)]
pub enum GateNorm {
    Bias { z: ParamId, r: ParamId, h: ParamId },
    LayerNorm { z: (ParamId, ParamId), r: (ParamId, ParamId), h: (ParamId, ParamId), eps: f64 },
}

/// One GRU cell. Weight matrices are stored `[in, out]` and applied as `x · W`.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub norm: GateNorm,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        ln: LnPlacement,
        ln_eps: f64,
    ) -> Result<Self> {
        let mut mat = |store: &mut ParamStore, n: &str, fi, fo| store.add(format!("{prefix}.{n}"), glorot(rng, fi, fo));
        let w_z = mat(store, "W_z", input_dim, hidden_dim)?;
        let u_z = mat(store, "U_z", hidden_dim, hidden_dim)?;
        let w_r = mat(store, "W_r", input_dim, hidden_dim)?;
        let u_r = mat(store, "U_r", hidden_dim, hidden_dim)?;
        let w_h = mat(store, "W", input_dim, hidden_dim)?;
        let u_h = mat(store, "U", hidden_dim, hidden_dim)?;
        let norm = match ln {
            LnPlacement::None => GateNorm::Bias {
                z: store.add(format!("{prefix}.b_z"), Tensor::zeros(&[hidden_dim]))?,
                r: store.add(format!("{prefix}.b_r"), Tensor::zeros(&[hidden_dim]))?,
                h: store.add(format!("{prefix}.b"), Tensor::zeros(&[hidden_dim]))?,
            },
            LnPlacement::Gates => {
                let mut ln_pair = |n: &str| -> Result<(ParamId, ParamId)> {
                    Ok((
                        store.add(format!("{prefix}.ln_{n}.gain"), Tensor::full(&[hidden_dim], 1.0))?,
                        store.add(format!("{prefix}.ln_{n}.bias"), Tensor::zeros(&[hidden_dim]))?,
                    ))
                };
                GateNorm::LayerNorm { z: ln_pair("z")?, r: ln_pair("r")?, h: ln_pair("h")?, eps: ln_eps }
            }
        };
        Ok(Self { w_z, u_z, w_r, u_r, w_h, u_h, norm, input_dim, hidden_dim })
    }

    fn shift(&self, g: &mut Graph<'_>, pre: Var, which: usize) -> Result<Var> {
        match &self.norm {
            GateNorm::Bias { z, r, h } => {
                let b = g.param([*z, *r, *h][which]);
                g.add(pre, b)
            }
            GateNorm::LayerNorm { z, r, h, eps } => {
                let (gain, bias) = [*z, *r, *h][which];
                let (gain, bias) = (g.param(gain), g.param(bias));
                g.layer_norm(pre, gain, bias, *eps)
            }
        }
    }

    /// One step on a batch: `x` is `[B, in]`, `s_prev` is `[B, hidden]`.
    ///
    /// `z = σ(W_z x + U_z s)`, `r = σ(W_r x + U_r s)`,
    /// `s̲ = tanh(W x + r ⊙ (U s))`, `s' = (1 − z) ⊙ s̲ + z ⊙ s`.
    pub fn step(&self, g: &mut Graph<'_>, x: Var, s_prev: Var) -> Result<Var> {
        let (sx, ss) = (g.shape(x).to_vec(), g.shape(s_prev).to_vec());
        if sx.len() != 2 || ss.len() != 2 || sx[1] != self.input_dim || ss[1] != self.hidden_dim || sx[0] != ss[0] {
            return Err(dim_err(format!(
                "gru_step: input {sx:?}, state {ss:?}, cell {}→{}",
                self.input_dim, self.hidden_dim
            )));
        }
        let [w_z, u_z, w_r, u_r, w_h, u_h] =
            [self.w_z, self.u_z, self.w_r, self.u_r, self.w_h, self.u_h].map(|p| g.param(p));

        let xz = g.matmul(x, w_z)?;
        let sz = g.matmul(s_prev, u_z)?;
        let z = g.add(xz, sz)?;
        let z = self.shift(g, z, 0)?;
        let z = g.sigmoid(z)?;

        let xr = g.matmul(x, w_r)?;
        let sr = g.matmul(s_prev, u_r)?;
        let r = g.add(xr, sr)?;
        let r = self.shift(g, r, 1)?;
        let r = g.sigmoid(r)?;

        let xh = g.matmul(x, w_h)?;
        let sh = g.matmul(s_prev, u_h)?;
        let rsh = g.mul(r, sh)?;
        let cand = g.add(xh, rsh)?;
        let cand = self.shift(g, cand, 2)?;
        let cand = g.tanh(cand)?;

        g.lerp(z, cand, s_prev)
    }
}

/// Per-position annotations of a batch of source sentences.
#[derive(Debug, Clone)]
pub struct Annotations {
    /// `[B, 2·d_gru]` per source position.
    pub steps: Vec<Var>,
    /// `mask[b·M + t]` is 1 for real tokens.
    pub mask: Vec<f64>,
    pub batch: usize,
    pub dim: usize,
}

impl Annotations {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mask column for position `t`, one entry per batch row.
    pub fn mask_at(&self, t: usize) -> Vec<f64> {
        let m = self.len();
        (0..self.batch).map(|b| self.mask[b * m + t]).collect()
    }

    /// Real-token count per batch row.
    pub fn counts(&self) -> Vec<f64> {
        let m = self.len();
        (0..self.batch).map(|b| self.mask[b * m..(b + 1) * m].iter().sum()).collect()
    }

    /// Mean over unmasked positions, `[B, 2·d_gru]`.
    pub fn masked_mean(&self, g: &mut Graph<'_>) -> Result<Var> {
        let counts = self.counts();
        if self.is_empty() || counts.contains(&0.0) {
            return Err(Error::EmptySupport("no unmasked annotation"));
        }
        let mut acc = self.steps[0];
        for &h in &self.steps[1..] {
            acc = g.add(acc, h)?;
        }
        g.scale_rows(acc, counts.iter().map(|c| 1.0 / c).collect())
    }

    /// All positions as one `[B·M, 2·d_gru]` key matrix.
    pub fn keys(&self, g: &mut Graph<'_>) -> Result<Var> {
        g.interleave(&self.steps)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub forward: GruParams,
    pub backward: GruParams,
    pub w_q: ParamId,
    pub emb_dim: usize,
    pub gru_dim: usize,
}

impl TextEncoder {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, cfg: &crate::config::ModelConfig) -> Result<Self> {
        let bound = 1.0 / crate::math::sqrt(cfg.emb_dim as f64);
        let embedding = store.add("encoder.embedding", crate::param::uniform(rng, &[cfg.src_vocab, cfg.emb_dim], bound))?;
        let forward =
            GruParams::register(store, rng, "encoder.fwd", cfg.emb_dim, cfg.gru_dim, cfg.layer_norm, cfg.ln_eps)?;
        let backward =
            GruParams::register(store, rng, "encoder.bwd", cfg.emb_dim, cfg.gru_dim, cfg.layer_norm, cfg.ln_eps)?;
        let w_q = store.add("encoder.W_q", glorot(rng, 2 * cfg.gru_dim, cfg.q_dim))?;
        Ok(Self { embedding, forward, backward, w_q, emb_dim: cfg.emb_dim, gru_dim: cfg.gru_dim })
    }

    /// Embedding rows for `ids`, `[len, d_emb]`.
    pub fn embed(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        let e = g.param(self.embedding);
        g.gather(e, ids)
    }

    /// Encodes a padded batch. `ids` and `mask` are row-major `[B, M]`.
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        ids: &[usize],
        mask: &[f64],
        batch: usize,
        dropout: &mut Dropout,
    ) -> Result<Annotations> {
        if batch == 0 || ids.is_empty() {
            return Err(Error::EmptyInput("empty source"));
        }
        if ids.len() != mask.len() || !ids.len().is_multiple_of(batch) {
            return Err(dim_err("source ids and mask must both be [B, M]"));
        }
        let m = ids.len() / batch;
        for b in 0..batch {
            if !mask[b * m..(b + 1) * m].iter().any(|&v| v != 0.0) {
                return Err(Error::EmptyInput("source sentence without tokens"));
            }
        }
        let column = |t: usize| -> (Vec<usize>, Vec<f64>) {
            ((0..batch).map(|b| ids[b * m + t]).collect(), (0..batch).map(|b| mask[b * m + t]).collect())
        };
        let mut inputs = Vec::with_capacity(m);
        let mut masks = Vec::with_capacity(m);
        for t in 0..m {
            let (col, mk) = column(t);
            let x = self.embed(g, &col)?;
            inputs.push(dropout.apply(g, x, dropout.config().gru_in)?);
            masks.push(mk);
        }
        let zero = g.input(Tensor::zeros(&[batch, self.gru_dim]));
        let run = |g: &mut Graph<'_>, cell: &GruParams, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Option<Var>>> {
            let mut states = vec![None; m];
            let mut s = zero;
            for t in order {
                let s_new = cell.step(g, inputs[t], s)?;
                s = if masks[t].iter().all(|&v| v != 0.0) {
                    s_new
                } else {
                    let keep: Vec<f64> =
                        masks[t].iter().flat_map(|&v| core::iter::repeat_n(1.0 - v, self.gru_dim)).collect();
                    let keep = g.input(Tensor::new(&[batch, self.gru_dim], keep)?);
                    g.lerp(keep, s_new, s)?
                };
                states[t] = Some(s);
            }
            Ok(states)
        };
        let fwd = run(g, &self.forward, &mut (0..m))?;
        let bwd = run(g, &self.backward, &mut (0..m).rev())?;
        let mut steps = Vec::with_capacity(m);
        for t in 0..m {
            let h = g.concat_cols(&[fwd[t].expect("visited"), bwd[t].expect("visited")])?;
            let h = g.scale_rows(h, masks[t].clone())?;
            steps.push(dropout.apply(g, h, dropout.config().gru_out)?);
        }
        Ok(Annotations { steps, mask: mask.to_vec(), batch, dim: 2 * self.gru_dim })
    }

    /// `q = tanh(W_q · mean of unmasked h_i)`, `[B, d_q]`.
    pub fn pool_conditioning(&self, g: &mut Graph<'_>, ann: &Annotations) -> Result<Var> {
        let mean = ann.masked_mean(g)?;
        let w = g.param(self.w_q);
        let pre = g.matmul(mean, w)?;
        g.tanh(pre)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::gradcheck::{finite_difference_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with_gru(ln: LnPlacement, seed: u64) -> (ParamStore, GruParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gru = GruParams::register(&mut store, &mut rng, "g", 3, 4, ln, 1e-5).unwrap();
        (store, gru)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        crate::param::uniform(rng, shape, 1.0)
    }

    #[test]
    fn saturated_update_gate_copies_state() {
        let (mut store, gru) = store_with_gru(LnPlacement::None, 1);
        if let GateNorm::Bias { z, .. } = gru.norm {
            store.get_mut(z).value = Tensor::full(&[4], 1000.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new(&store);
        let x = g.input(rand_tensor(&mut rng, &[2, 3]));
        let s = g.input(rand_tensor(&mut rng, &[2, 4]));
        let out = gru.step(&mut g, x, s).unwrap();
        assert_eq!(g.value(out), g.value(s));
    }

    #[test]
    fn open_gates_reduce_to_tanh() {
        let (mut store, gru) = store_with_gru(LnPlacement::None, 3);
        if let GateNorm::Bias { z, r, .. } = gru.norm {
            store.get_mut(z).value = Tensor::full(&[4], -1000.0);
            store.get_mut(r).value = Tensor::full(&[4], 1000.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xt = rand_tensor(&mut rng, &[1, 3]);
        let st = rand_tensor(&mut rng, &[1, 4]);
        let mut g = Graph::new(&store);
        let x = g.input(xt.clone());
        let s = g.input(st.clone());
        let out = gru.step(&mut g, x, s).unwrap();
        let wx = xt.matmul(store.value(gru.w_h)).unwrap();
        let us = st.matmul(store.value(gru.u_h)).unwrap();
        for j in 0..4 {
            let expect = crate::math::tanh(wx.data()[j] + us.data()[j]);
            assert!((g.value(out).data()[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn gru_step_gradients_match_finite_differences() {
        for ln in [LnPlacement::None, LnPlacement::Gates] {
            for seed in 0..10 {
                let (mut store, gru) = store_with_gru(ln, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                store.add("x", rand_tensor(&mut rng, &[2, 3])).unwrap();
                store.add("s", rand_tensor(&mut rng, &[2, 4])).unwrap();
                store.add("proj", rand_tensor(&mut rng, &[2, 4])).unwrap();
                let report = finite_difference_check(&mut store, GradCheckOptions::default(), |p, want| {
                    let mut g = Graph::new(p);
                    let x = g.param_named("x")?;
                    let s = g.param_named("s")?;
                    let out = gru.step(&mut g, x, s)?;
                    let proj = g.param_named("proj")?;
                    let y = g.mul(out, proj)?;
                    let y = g.sum(y)?;
                    Ok((g.value(y).data()[0], if want { Some(g.backward(y)?.params) } else { None }))
                })
                .unwrap();
                assert!(report.passes(1e-4), "{ln:?} seed {seed}: {report:?}");
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut store = ParamStore::new();
        store.add("gain", Tensor::full(&[2], 1.0)).unwrap();
        store.add("bias", Tensor::zeros(&[2])).unwrap();
        let mut g = Graph::new(&store);
        let gain = g.param_named("gain").unwrap();
        let bias = g.param_named("bias").unwrap();
        let c = g.input(Tensor::matrix(1, 2, vec![3.0, 3.0]).unwrap());
        let y = g.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        let x = g.input(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-5 && (v[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_gradients() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            store.add("x", rand_tensor(&mut rng, &[3, 5])).unwrap();
            store.add("gain", rand_tensor(&mut rng, &[5])).unwrap();
            store.add("bias", rand_tensor(&mut rng, &[5])).unwrap();
            store.add("w", rand_tensor(&mut rng, &[3, 5])).unwrap();
            let report = finite_difference_check(&mut store, GradCheckOptions::default(), |p, want| {
                let mut g = Graph::new(p);
                let [x, gain, bias, w] = ["x", "gain", "bias", "w"].map(|n| g.param_named(n).unwrap());
                let y = g.layer_norm(x, gain, bias, 1e-5)?;
                let y = g.mul(y, w)?;
                let y = g.sum(y)?;
                Ok((g.value(y).data()[0], if want { Some(g.backward(y)?.params) } else { None }))
            })
            .unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }

    fn encoder(seed: u64) -> (ParamStore, TextEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = ModelConfig::tiny(12, 12);
        let enc = TextEncoder::register(&mut store, &mut rng, &cfg).unwrap();
        (store, enc)
    }

    fn run_encode(store: &ParamStore, enc: &TextEncoder, ids: &[usize], mask: &[f64], batch: usize) -> Vec<Tensor> {
        let mut g = Graph::new(store);
        let ann = enc.encode(&mut g, ids, mask, batch, &mut Dropout::disabled()).unwrap();
        ann.steps.iter().map(|&v| g.value(v).clone()).collect()
    }

    #[test]
    fn embedding_cases() {
        let (store, enc) = encoder(0);
        let mut g = Graph::new(&store);
        let e = enc.embed(&mut g, &[]).unwrap();
        assert_eq!(g.shape(e), &[0, 4]);
        let e = enc.embed(&mut g, &[5, 5]).unwrap();
        assert_eq!(g.value(e).row(0), g.value(e).row(1));
        assert!(matches!(enc.embed(&mut g, &[12]), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn output_width_is_twice_hidden() {
        let (store, enc) = encoder(1);
        for len in 1..5 {
            let ids: Vec<usize> = (0..len).map(|i| 4 + i).collect();
            let out = run_encode(&store, &enc, &ids, &vec![1.0; len], 1);
            assert!(out.iter().all(|t| t.shape() == [1, 6]));
        }
    }

    #[test]
    fn padding_leaves_real_positions_unchanged() {
        let (store, enc) = encoder(2);
        let plain = run_encode(&store, &enc, &[5, 6, 7], &[1.0; 3], 1);
        let padded = run_encode(&store, &enc, &[5, 6, 7, 0, 0], &[1.0, 1.0, 1.0, 0.0, 0.0], 1);
        for t in 0..3 {
            assert_eq!(plain[t], padded[t]);
        }
        assert!(padded[3].data().iter().all(|&v| v == 0.0));
        assert!(padded[4].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_rows_are_independent() {
        let (store, enc) = encoder(3);
        let alone = run_encode(&store, &enc, &[5, 6], &[1.0; 2], 1);
        let batched = run_encode(&store, &enc, &[5, 6, 0, 9, 8, 7], &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0], 2);
        for t in 0..2 {
            assert_eq!(alone[t].row(0), batched[t].row(0));
        }
    }

    #[test]
    fn reversal_swaps_directions_with_shared_weights() {
        let (mut store, enc) = encoder(4);
        let pairs = [
            (enc.forward.w_z, enc.backward.w_z),
            (enc.forward.u_z, enc.backward.u_z),
            (enc.forward.w_r, enc.backward.w_r),
            (enc.forward.u_r, enc.backward.u_r),
            (enc.forward.w_h, enc.backward.w_h),
            (enc.forward.u_h, enc.backward.u_h),
        ];
        for (f, b) in pairs {
            store.get_mut(b).value = store.value(f).clone();
        }
        if let (GateNorm::LayerNorm { z: fz, r: fr, h: fh, .. }, GateNorm::LayerNorm { z: bz, r: br, h: bh, .. }) =
            (&enc.forward.norm, &enc.backward.norm)
        {
            for (f, b) in [(fz, bz), (fr, br), (fh, bh)] {
                store.get_mut(b.0).value = store.value(f.0).clone();
                store.get_mut(b.1).value = store.value(f.1).clone();
            }
        }
        let x = [4, 7, 9, 5];
        let rev: Vec<usize> = x.iter().rev().copied().collect();
        let a = run_encode(&store, &enc, &x, &[1.0; 4], 1);
        let b = run_encode(&store, &enc, &rev, &[1.0; 4], 1);
        let d = 3;
        for i in 0..4 {
            let hb = b[i].data();
            let ha = a[3 - i].data();
            assert_eq!(&hb[..d], &ha[d..]);
            assert_eq!(&hb[d..], &ha[..d]);
        }
    }

    #[test]
    fn single_token_sentence() {
        let (store, enc) = encoder(5);
        let out = run_encode(&store, &enc, &[6], &[1.0], 1);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].shape(), &[1, 6]);
    }

    #[test]
    fn empty_source_is_rejected() {
        let (store, enc) = encoder(6);
        let mut g = Graph::new(&store);
        assert!(matches!(enc.encode(&mut g, &[], &[], 1, &mut Dropout::disabled()), Err(Error::EmptyInput(_))));
        assert!(matches!(
            enc.encode(&mut g, &[0, 0], &[0.0, 0.0], 1, &mut Dropout::disabled()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn encoding_is_deterministic() {
        let (store, enc) = encoder(7);
        let a = run_encode(&store, &enc, &[5, 6, 7], &[1.0; 3], 1);
        let b = run_encode(&store, &enc, &[5, 6, 7], &[1.0; 3], 1);
        assert_eq!(a, b);
    }

    fn conditioning(store: &ParamStore, enc: &TextEncoder, ids: &[usize], mask: &[f64], batch: usize) -> Tensor {
        let mut g = Graph::new(store);
        let ann = enc.encode(&mut g, ids, mask, batch, &mut Dropout::disabled()).unwrap();
        let q = enc.pool_conditioning(&mut g, &ann).unwrap();
        g.value(q).clone()
    }

    #[test]
    fn conditioning_vector_cases() {
        let (store, enc) = encoder(8);
        let q = conditioning(&store, &enc, &[5, 6, 7], &[1.0; 3], 1);
        assert!(q.data().iter().all(|v| v.abs() < 1.0));
        // padding does not change the mean: divisor is the real token count
        let qp = conditioning(&store, &enc, &[5, 6, 7, 0], &[1.0, 1.0, 1.0, 0.0], 1);
        assert_eq!(q, qp);

        let mut g = Graph::new(&store);
        let h = g.input(Tensor::matrix(1, 6, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap());
        let one = Annotations { steps: vec![h], mask: vec![1.0], batch: 1, dim: 6 };
        let two = Annotations { steps: vec![h, h], mask: vec![1.0, 1.0], batch: 1, dim: 6 };
        let q1 = enc.pool_conditioning(&mut g, &one).unwrap();
        let q2 = enc.pool_conditioning(&mut g, &two).unwrap();
        assert_eq!(g.value(q1), g.value(q2));
        let w = store.value(enc.w_q);
        let direct = Tensor::matrix(1, 6, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap().matmul(w).unwrap();
        for (a, b) in g.value(q1).data().iter().zip(direct.data()) {
            assert!((a - crate::math::tanh(*b)).abs() < 1e-15);
        }
        let empty = Annotations { steps: vec![h], mask: vec![0.0], batch: 1, dim: 6 };
        assert!(matches!(enc.pool_conditioning(&mut g, &empty), Err(Error::EmptySupport(_))));
    }

    #[test]
    fn conditioning_is_permutation_invariant() {
        let (store, enc) = encoder(9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[1, 6])).collect();
        let eval = |order: &[usize]| {
            let mut g = Graph::new(&store);
            let steps = order.iter().map(|&i| g.input(rows[i].clone())).collect();
            let ann = Annotations { steps, mask: vec![1.0; 4], batch: 1, dim: 6 };
            let q = enc.pool_conditioning(&mut g, &ann).unwrap();
            g.value(q).clone()
        };
        let a = eval(&[0, 1, 2, 3]);
        let b = eval(&[3, 1, 0, 2]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn conditioning_gradients_reach_encoder() {
        let (mut store, enc) = encoder(10);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        store.add("proj", rand_tensor(&mut rng, &[2, 3])).unwrap();
        let opts = GradCheckOptions { max_per_param: Some(6), ..Default::default() };
        let report = finite_difference_check(&mut store, opts, |p, want| {
            let mut g = Graph::new(p);
            let ann = enc.encode(&mut g, &[5, 6, 7, 8, 9, 0], &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0], 2, &mut Dropout::disabled())?;
            let q = enc.pool_conditioning(&mut g, &ann)?;
            let proj = g.param_named("proj")?;
            let y = g.mul(q, proj)?;
            let y = g.sum(y)?;
            Ok((g.value(y).data()[0], if want { Some(g.backward(y)?.params) } else { None }))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        let nonzero = report
            .entries
            .iter()
            .filter(|e| e.param.starts_with("encoder.fwd") || e.param.starts_with("encoder.bwd"))
            .any(|e| e.analytic.abs() > 1e-8);
        assert!(nonzero);
    }

    #[test]
    fn embedding_gradient_accumulates_per_occurrence() {
        let (mut store, enc) = encoder(11);
        let opts = GradCheckOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        store.add("w", rand_tensor(&mut rng, &[3, 4])).unwrap();
        let report = finite_difference_check(&mut store, opts, |p, want| {
            let mut g = Graph::new(p);
            let e = enc.embed(&mut g, &[5, 7, 5])?;
            let w = g.param_named("w")?;
            let y = g.mul(e, w)?;
            let y = g.sum(y)?;
            Ok((g.value(y).data()[0], if want { Some(g.backward(y)?.params) } else { None }))
        })
        .unwrap();
        assert!(report.passes(1e-4));
        let row5: Vec<f64> = report
            .entries
            .iter()
            .filter(|e| e.param == "encoder.embedding" && e.index / 4 == 5)
            .map(|e| e.analytic)
            .collect();
        let w = store.by_name("w").unwrap().value.clone();
        for j in 0..4 {
            assert!((row5[j] - (w.data()[j] + w.data()[8 + j])).abs() < 1e-12);
        }
    }
}
