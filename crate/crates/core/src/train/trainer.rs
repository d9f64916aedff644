use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{bpe, make_batches, tokenize, Batch, EncodedPair, SynthExample, Vocabulary};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{Dropout, Model};
use crate::tensor::Tensor;
use crate::vision::{BnState, Mode};
use crate::ParamStore;

use super::adam::{adam_step, AdamConfig};
use super::bleu::bleu;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Dev evaluation period in steps.
    pub eval_every: usize,
    /// Steps without a dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Beam used for dev translations (1 is greedy).
    pub eval_beam: usize,
    /// Stop as soon as the mean train loss since the last evaluation falls
    /// below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 32,
            max_steps: 5000,
            eval_every: 100,
            patience: 500,
            seed: 1,
            eval_beam: 1,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_beam == 0 {
            return Err(Error::Parameter("batch_size, eval_every and eval_beam must be positive".into()));
        }
        Ok(())
    }
}

/// Encoded sentence pairs with optional images, word-level references and
/// the ambiguous slot of each target (word index and expected word).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<EncodedPair>,
    pub images: Option<Vec<Tensor>>,
    pub references: Vec<Vec<String>>,
    pub ambiguous: Vec<Option<(usize, String)>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        let n = self.pairs.len();
        if self.references.len() != n || self.ambiguous.len() != n {
            return Err(Error::Pairing(alloc::format!("references or slots do not match {n} pairs")));
        }
        if let Some(imgs) = &self.images {
            if imgs.len() != n {
                return Err(Error::Pairing(alloc::format!("{} images for {n} pairs", imgs.len())));
            }
        }
        Ok(())
    }

    /// Encodes synthetic examples, keeping images only when `with_images`.
    pub fn from_synth(examples: &[SynthExample], src_vocab: &Vocabulary, tgt_vocab: &Vocabulary, with_images: bool) -> Self {
        let mut data = Self::default();
        for ex in examples {
            let src = tokenize(&ex.src);
            let tgt = tokenize(&ex.tgt);
            data.pairs.push(EncodedPair { src: src_vocab.encode(&src), tgt: tgt_vocab.encode(&tgt) });
            data.ambiguous.push(Some((ex.ambiguous_slot, ex.shape.target_word().into())));
            data.references.push(tgt);
        }
        if with_images {
            data.images = Some(examples.iter().map(|ex| ex.image.clone()).collect());
        }
        data
    }

    pub fn image(&self, i: usize) -> Option<&Tensor> {
        self.images.as_ref().map(|v| &v[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Token-weighted mean NLL with inference statistics.
    pub loss: f64,
    pub bleu: f64,
    /// Fraction of ambiguous slots translated correctly, if any exist.
    pub ambiguous_accuracy: Option<f64>,
    pub hypotheses: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_bleu: f64,
    pub dev_ambiguous: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub best_step: usize,
    pub best: Evaluation,
    pub stopped_early: bool,
}

/// Snapshot of the model at its best dev evaluation.
#[derive(Debug, Clone)]
pub struct BestState {
    pub step: usize,
    pub bleu: f64,
    pub loss: f64,
    pub params: ParamStore,
    pub bn_states: Vec<BnState>,
    pub evaluation: Evaluation,
}

/// Model-independent progress needed to resume a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub step: usize,
    pub since_best: usize,
    pub loss_sum: f64,
    pub loss_count: usize,
}

/// Word-level tokens of a subword id sequence.
pub fn detokenize(vocab: &Vocabulary, ids: &[usize]) -> Result<Vec<String>> {
    Ok(bpe::join_sentence(&vocab.decode(ids)?))
}

/// Mean and sample standard deviation (exactly zero when all values agree).
pub fn mean_sd(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput("no values to aggregate"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.iter().all(|&v| v == values[0]) {
        return Ok((values[0], 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((mean, math::sqrt(ss / (n - 1.0).max(1.0))))
}

/// Deterministic training loop with periodic dev evaluation and early
/// stopping on dev BLEU (dev loss breaks ties).
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub tgt_vocab: Vocabulary,
    pub progress: Progress,
    pub best: Option<BestState>,
    epoch_cache: Option<(usize, Vec<Batch>)>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, tgt_vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if tgt_vocab.len() != model.config.tgt_vocab {
            return Err(Error::Pairing(alloc::format!(
                "target vocabulary has {} entries but the model expects {}",
                tgt_vocab.len(),
                model.config.tgt_vocab
            )));
        }
        let progress = Progress { step: 0, since_best: 0, loss_sum: 0.0, loss_count: 0 };
        Ok(Self { model, config, tgt_vocab, progress, best: None, epoch_cache: None })
    }

    /// The batch used at `step` (1-based): each epoch is a fresh shuffle
    /// seeded by the run seed and the epoch number.
    pub fn batch_for_step(&mut self, train: &Dataset, step: usize) -> Result<Batch> {
        let per_epoch = train.len().div_ceil(self.config.batch_size);
        let epoch = (step - 1) / per_epoch;
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let batches = make_batches(
                &train.pairs,
                train.images.as_deref(),
                self.config.batch_size,
                Some(mix(self.config.seed, epoch as u64 + 1)),
                self.model.config.max_sentence_len,
            )?;
            self.epoch_cache = Some((epoch, batches));
        }
        let (_, batches) = self.epoch_cache.as_ref().expect("filled above");
        Ok(batches[(step - 1) % per_epoch].clone())
    }

    /// One optimizer step; returns the batch loss.
    pub fn train_step(&mut self, train: &Dataset) -> Result<f64> {
        let step = self.progress.step + 1;
        let batch = self.batch_for_step(train, step)?;
        let mut dropout = Dropout::new(self.model.config.dropout, mix(self.config.seed ^ 0xD5, step as u64));
        let r = match self.model.loss_and_grads(&batch, Mode::Train, &mut dropout) {
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
            r => r?,
        };
        if !r.loss.is_finite() || r.grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { step, loss: r.loss });
        }
        adam_step(&mut self.model.params, &r.grads, &self.config.adam, step as u64)?;
        self.model.update_running_stats(&r.bn_stats);
        self.progress.step = step;
        self.progress.loss_sum += r.loss;
        self.progress.loss_count += 1;
        Ok(r.loss)
    }

    /// Dev loss, translations, BLEU and ambiguous-slot accuracy.
    pub fn evaluate(&self, dev: &Dataset) -> Result<Evaluation> {
        evaluate(&self.model, &self.tgt_vocab, dev, self.config.batch_size, self.config.eval_beam)
    }

    /// Evaluates on `dev`, records a metrics row and updates the best state.
    /// Returns the row and whether patience ran out.
    pub fn checkpoint_eval(&mut self, dev: &Dataset) -> Result<(MetricsRow, bool)> {
        let ev = self.evaluate(dev)?;
        let p = &mut self.progress;
        let train_loss = if p.loss_count == 0 { f64::NAN } else { p.loss_sum / p.loss_count as f64 };
        p.loss_sum = 0.0;
        p.loss_count = 0;
        let row = MetricsRow {
            step: p.step,
            train_loss,
            dev_loss: ev.loss,
            dev_bleu: ev.bleu,
            dev_ambiguous: ev.ambiguous_accuracy,
        };
        let improved = match &self.best {
            None => true,
            Some(b) => ev.bleu > b.bleu || (ev.bleu == b.bleu && ev.loss < b.loss),
        };
        if improved {
            p.since_best = 0;
            self.best = Some(BestState {
                step: p.step,
                bleu: ev.bleu,
                loss: ev.loss,
                params: self.model.params.clone(),
                bn_states: self.model.bn_states.clone(),
                evaluation: ev,
            });
        } else {
            p.since_best += self.config.eval_every;
        }
        Ok((row, p.since_best >= self.config.patience))
    }

    /// Trains until `max_steps`, early stopping or the target loss, calling
    /// `on_row` after every evaluation. The model is left at its best state.
    pub fn run<E: From<Error>>(
        &mut self,
        train: &Dataset,
        dev: &Dataset,
        mut on_row: impl FnMut(&MetricsRow, &Trainer) -> core::result::Result<(), E>,
    ) -> core::result::Result<TrainOutcome, E> {
        train.validate()?;
        dev.validate()?;
        let mut stopped_early = false;
        while self.progress.step < self.config.max_steps {
            self.train_step(train)?;
            let at_end = self.progress.step == self.config.max_steps;
            if self.progress.step.is_multiple_of(self.config.eval_every) || at_end {
                let (row, exhausted) = self.checkpoint_eval(dev)?;
                on_row(&row, self)?;
                let reached = self.config.target_loss.is_some_and(|t| row.train_loss < t);
                if exhausted || reached {
                    stopped_early = !at_end;
                    break;
                }
            }
        }
        if self.best.is_none() {
            let (row, _) = self.checkpoint_eval(dev)?;
            on_row(&row, self)?;
        }
        let best = self.best.as_ref().expect("at least one evaluation");
        self.model.params = best.params.clone();
        self.model.bn_states = best.bn_states.clone();
        Ok(TrainOutcome { steps: self.progress.step, best_step: best.step, best: best.evaluation.clone(), stopped_early })
    }
}

/// Evaluation of `model` on `data` without touching its state.
pub fn evaluate(model: &Model, vocab: &Vocabulary, data: &Dataset, batch_size: usize, beam: usize) -> Result<Evaluation> {
    data.validate()?;
    let batches = make_batches(&data.pairs, data.images.as_deref(), batch_size, None, model.config.max_sentence_len)?;
    let (mut nll, mut tokens) = (0.0, 0.0);
    for b in &batches {
        let n: f64 = b.tgt_mask.iter().sum::<f64>() - b.size as f64;
        nll += model.loss(b, Mode::Infer)? * n;
        tokens += n;
    }
    let mut hypotheses = Vec::with_capacity(data.len());
    for (i, p) in data.pairs.iter().enumerate() {
        let hyp = model.translate(&p.src, data.image(i), model.search_params(p.src.len(), beam))?;
        hypotheses.push(detokenize(vocab, &hyp.tokens)?);
    }
    score(nll / tokens, hypotheses, data)
}

/// BLEU and ambiguous-slot accuracy of word-level hypotheses.
pub fn score(loss: f64, hypotheses: Vec<Vec<String>>, data: &Dataset) -> Result<Evaluation> {
    let bleu = bleu(&hypotheses, &data.references, 4)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (h, slot) in hypotheses.iter().zip(&data.ambiguous) {
        if let Some((i, word)) = slot {
            total += 1;
            hit += usize::from(h.get(*i) == Some(word));
        }
    }
    let ambiguous_accuracy = (total > 0).then(|| hit as f64 / total as f64);
    Ok(Evaluation { loss, bleu, ambiguous_accuracy, hypotheses })
}
