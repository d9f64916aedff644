//! The command implementations behind the `mmt` binary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use mmt_core::data::{synth_corpus, Batch};
use mmt_core::gradcheck::{GradCheckOptions, GradCheckReport};
use mmt_core::train::{bleu, BestState, Evaluation, Progress, TrainOutcome, Trainer};
use mmt_core::vision::Mode;
use mmt_core::{Model, ModelConfig, RunVariant};

use crate::checkpoint::{self, TrainState};
use crate::config::ExperimentConfig;
use crate::error::{Error, IoContext, Result};
use crate::formats;
use crate::manifest::{unix_now, RunManifest};
use crate::metrics::MetricsLog;
use crate::pipeline::{Corpus, TextPipeline};

/// Writes `n` synthetic examples as split `name` of `out`.
pub fn synth(n: usize, seed: u64, out: &Path, name: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    Corpus::from_synth(&synth_corpus(n, seed)?).save(out, name)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub variant: Option<String>,
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: bool,
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub variant: RunVariant,
}

#[derive(Serialize)]
struct DivergenceDump {
    step: usize,
    loss: f64,
    batch: Vec<usize>,
    param_norms: Vec<(String, f64)>,
}

fn resolve_config(variant: Option<&str>, config: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = variant {
        cfg.variant = RunVariant::parse(v).map_err(|e| Error::Usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn state_of(t: &Trainer) -> TrainState {
    let b = t.best.as_ref();
    TrainState {
        step: t.progress.step,
        since_best: t.progress.since_best,
        loss_sum: t.progress.loss_sum,
        loss_count: t.progress.loss_count,
        best_step: b.map_or(0, |b| b.step),
        best_bleu: b.map_or(f64::NEG_INFINITY, |b| b.bleu),
        best_loss: b.map_or(f64::INFINITY, |b| b.loss),
        best_ambiguous: b.and_then(|b| b.evaluation.ambiguous_accuracy),
    }
}

/// Trains one variant on `data/train.*`, evaluating on `data/dev.*`.
///
/// `out` receives `run.json` (written before training), `metrics.csv`,
/// `best/` (best dev checkpoint), `last/` (latest state, for `--resume`)
/// and `run.done.json` at the end.
pub fn train(o: &TrainOptions) -> Result<TrainSummary> {
    let mut cfg = resolve_config(o.variant.as_deref(), o.config.as_deref())?;
    if let Some(s) = o.max_steps {
        cfg.train.max_steps = s;
    }
    let train_c = Corpus::load(&o.data, "train")?;
    let dev_c = Corpus::load(&o.data, "dev")?;
    let (last_dir, best_dir) = (o.out.join("last"), o.out.join("best"));
    let metrics_path = o.out.join("metrics.csv");

    let (text, mut trainer, mut log) = if o.resume {
        let last = checkpoint::load(&last_dir)?;
        let mut stored = last.config.clone();
        stored.train.max_steps = cfg.train.max_steps;
        if stored != cfg {
            return Err(Error::Compat("the configuration differs from the one the run was started with".into()));
        }
        let st = last.train.ok_or_else(|| Error::Compat("checkpoint carries no training state".into()))?;
        let best = checkpoint::load(&best_dir)?;
        let mut t = Trainer::new(last.model, cfg.train.clone(), last.text.tgt_vocab.clone())?;
        t.progress = Progress { step: st.step, since_best: st.since_best, loss_sum: st.loss_sum, loss_count: st.loss_count };
        t.best = Some(BestState {
            step: st.best_step,
            bleu: st.best_bleu,
            loss: st.best_loss,
            params: best.model.params,
            bn_states: best.model.bn_states,
            evaluation: Evaluation { loss: st.best_loss, bleu: st.best_bleu, ambiguous_accuracy: st.best_ambiguous, hypotheses: vec![] },
        });
        (last.text, t, MetricsLog::resume(&metrics_path, st.step)?)
    } else {
        let text = TextPipeline::learn(&train_c, cfg.bpe_merges)?;
        let model = Model::new(cfg.model_config(text.src_vocab.len(), text.tgt_vocab.len()), cfg.train.seed)?;
        fs::create_dir_all(&o.out).at(&o.out)?;
        let run_path = o.out.join("run.json");
        if run_path.exists() {
            return Err(Error::Usage(format!("{} already holds a run; pass --resume or use a fresh directory", o.out.display())));
        }
        RunManifest::start(&cfg).write_new(&run_path)?;
        let t = Trainer::new(model, cfg.train.clone(), text.tgt_vocab.clone())?;
        (text, t, MetricsLog::create(&metrics_path)?)
    };

    let images = trainer.model.config.uses_images();
    let train_d = text.dataset(&train_c, images)?;
    let dev_d = text.dataset(&dev_c, images)?;
    let result = trainer.run(&train_d, &dev_d, |row, t| {
        log.append(row)?;
        if t.best.as_ref().is_some_and(|b| b.step == row.step) {
            checkpoint::save(&best_dir, &cfg, &text, &t.model, None)?;
        }
        checkpoint::save(&last_dir, &cfg, &text, &t.model, Some(state_of(t)))
    });
    let outcome = match result {
        Err(Error::Core(mmt_core::Error::Diverged { step, loss })) => {
            let batch = trainer.batch_for_step(&train_d, step).map(|b| b.indices).unwrap_or_default();
            let param_norms = trainer
                .model
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
                .collect();
            let dump = DivergenceDump { step, loss, batch, param_norms };
            let path = o.out.join("divergence.json");
            fs::write(&path, serde_json::to_string_pretty(&dump).expect("dump serializes")).at(&path)?;
            return Err(Error::Core(mmt_core::Error::Diverged { step, loss }));
        }
        r => r?,
    };
    let run_path = o.out.join("run.json");
    if let Ok(mut m) = RunManifest::read(&run_path) {
        m.finished = Some(unix_now());
        let done = o.out.join("run.done.json");
        fs::write(&done, serde_json::to_string_pretty(&m).expect("manifest serializes")).at(&done)?;
    }
    Ok(TrainSummary { outcome, variant: cfg.variant })
}

/// Translates each line of `input`, one output line per input line.
pub fn translate(checkpoint_dir: &Path, beam: Option<usize>, input: &Path, images: Option<&Path>) -> Result<Vec<String>> {
    let loaded = checkpoint::load(checkpoint_dir)?;
    let lines = formats::read_lines(input)?;
    let model = &loaded.model;
    let beam = beam.unwrap_or(model.config.beam);
    if beam == 0 {
        return Err(Error::Usage("--beam must be at least 1".into()));
    }
    let imgs = match images {
        Some(p) => Some(formats::read_images(p)?),
        None => None,
    };
    if model.config.uses_images() {
        match &imgs {
            None if !lines.is_empty() => return Err(Error::Usage("this checkpoint needs --images".into())),
            Some(v) if v.len() != lines.len() => {
                return Err(Error::Usage(format!("{} images for {} input lines", v.len(), lines.len())));
            }
            _ => {}
        }
    }
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let ids = loaded.text.encode_source(line);
        if ids.is_empty() {
            out.push(String::new());
            continue;
        }
        let img = if model.config.uses_images() { imgs.as_ref().map(|v| &v[i]) } else { None };
        let hyp = model.translate(&ids, img, model.search_params(ids.len(), beam))?;
        out.push(loaded.text.decode_target(&hyp.tokens)?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub config: Option<PathBuf>,
    pub eps: f64,
    pub variants: Vec<RunVariant>,
    /// Scalars checked per parameter; all when `None`.
    pub per_param: Option<usize>,
    pub seed: u64,
    /// Operation whose backward pass gets a sign flip (test fixture).
    pub inject: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { config: None, eps: 1e-5, variants: RunVariant::ALL.to_vec(), per_param: None, seed: 1, inject: None }
    }
}

const INJECTABLE: [&str; 6] = ["tanh", "sigmoid", "matmul", "conv2d", "channel_affine", "layer_norm"];

/// Finite-difference check of the full model of each variant on a
/// two-sentence batch with 8×8 images. Without `--config` the model uses
/// very small dimensions so every scalar can be checked.
pub fn gradcheck(o: &GradcheckOptions) -> Result<Vec<(RunVariant, GradCheckReport)>> {
    if !(o.eps > 0.0) || !o.eps.is_finite() {
        return Err(Error::Usage(format!("--eps must be positive, got {}", o.eps)));
    }
    let inject = match &o.inject {
        Some(op) => Some(
            *INJECTABLE
                .iter()
                .find(|k| *k == op)
                .ok_or_else(|| Error::Usage(format!("cannot inject into '{op}'; choose one of {}", INJECTABLE.join(", "))))?,
        ),
        None => None,
    };
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => {
            let mut c = ExperimentConfig::default();
            c.model = ModelConfig::tiny(5, 5);
            c
        }
    };
    cfg.model.dropout = mmt_core::config::DropoutConfig::none();
    let corpus = Corpus::from_synth(&synth_corpus(2, o.seed)?);
    let text = TextPipeline::learn(&corpus, cfg.bpe_merges)?;
    let mut reports = Vec::new();
    for &v in &o.variants {
        cfg.variant = v;
        let mc = cfg.model_config(text.src_vocab.len(), text.tgt_vocab.len());
        let data = text.dataset(&corpus, mc.uses_images())?;
        let batch = Batch::from_examples(&data.pairs, data.images.as_deref(), &[0, 1], mc.max_sentence_len)?;
        let mut model = Model::new(mc, o.seed)?;
        model.jitter_zero_params(o.seed, 0.1);
        model.injected_fault = inject;
        let opts = GradCheckOptions { eps: o.eps, max_per_param: o.per_param, ..Default::default() };
        reports.push((v, model.gradcheck(&batch, Mode::Train, opts)?));
    }
    Ok(reports)
}

/// Corpus BLEU of whitespace-tokenized files.
pub fn score(candidates: &Path, references: &Path) -> Result<f64> {
    let split = |lines: Vec<String>| -> Vec<Vec<String>> { lines.iter().map(|l| l.split_whitespace().map(String::from).collect()).collect() };
    let c = split(formats::read_lines(candidates)?);
    let r = split(formats::read_lines(references)?);
    if c.len() != r.len() {
        return Err(Error::Usage(format!("{} candidate lines for {} reference lines", c.len(), r.len())));
    }
    if c.is_empty() {
        return Err(Error::Usage("cannot score an empty corpus".into()));
    }
    Ok(bleu(&c, &r, 4)?)
}
