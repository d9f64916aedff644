//! Flat `key = value` experiment configuration.
//!
//! Keys are the parameter names of the model tables (for example
//! `Learning rate = 0.0004` or `GRU input dropout = 0.7`), plus a few run
//! settings. Lines starting with `#` and blank lines are ignored.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use mmt_core::config::{CbnInference, CbnStages, DropoutConfig, LnPlacement, ResNetVariant};
use mmt_core::train::{AdamConfig, TrainConfig};
use mmt_core::{ModelConfig, RunVariant};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variant: RunVariant,
    pub cbn_stages: CbnStages,
    /// Model settings; vocabulary sizes are filled in from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub v1_inference: CbnInference,
    pub v2_inference: CbnInference,
    pub bpe_merges: i64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: RunVariant::CbnPool5,
            cbn_stages: CbnStages::All,
            model: ModelConfig::desk(5, 5),
            train: TrainConfig::default(),
            v1_inference: CbnInference::MovingAverage,
            v2_inference: CbnInference::ExponentialMovingAverage,
            bpe_merges: 10_000,
        }
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse '{v}' as a number"))
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|s| num(s.trim())).collect()
}

fn inference(v: &str) -> std::result::Result<CbnInference, String> {
    match v {
        "moving average" => Ok(CbnInference::MovingAverage),
        "exponential moving average" => Ok(CbnInference::ExponentialMovingAverage),
        _ => Err(format!("expected 'moving average' or 'exponential moving average', got '{v}'")),
    }
}

fn inference_name(i: CbnInference) -> &'static str {
    match i {
        CbnInference::MovingAverage => "moving average",
        CbnInference::ExponentialMovingAverage => "exponential moving average",
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "yes" | "true" | "on" => Ok(true),
        "no" | "false" | "off" => Ok(false),
        _ => Err(format!("expected yes or no, got '{v}'")),
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `text`, reporting errors as `origin:line`.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Config { path: origin.to_string(), line: Some(i + 1), message };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected 'key = value'".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(first) = seen.insert(key.to_string(), i + 1) {
                return Err(err(format!("duplicate key '{key}' (first set on line {first})")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.check().map_err(|message| Error::Config { path: origin.to_string(), line: None, message })?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "variant" => self.variant = RunVariant::parse(v).map_err(|e| e.to_string())?,
            "Blocks with CBN" => self.cbn_stages = CbnStages::parse(v).map_err(|e| e.to_string())?,
            "seed" => t.seed = num(v)?,
            "Source and target embeddings" => m.emb_dim = num(v)?,
            "GRU and CGRU Layer size" => m.gru_dim = num(v)?,
            "Attention size" => m.att_dim = num(v)?,
            "Conditioning size" => m.q_dim = num(v)?,
            "Layer normalization" => m.layer_norm = if flag(v)? { LnPlacement::Gates } else { LnPlacement::None },
            "Stop gradient into conditioning" => m.stop_gradient_q = flag(v)?,
            "GRU input dropout" => m.dropout.gru_in = num(v)?,
            "GRU output dropout" => m.dropout.gru_out = num(v)?,
            "CGRU input dropout" => m.dropout.cgru_in = num(v)?,
            "CGRU output dropout" => m.dropout.cgru_out = num(v)?,
            "Softmax output dropout" => m.dropout.softmax_out = num(v)?,
            "Optimizer" if v == "Adam" => {}
            "Optimizer" => return Err(format!("only Adam is supported, got '{v}'")),
            "Learning rate" => t.adam.lr = num(v)?,
            "Optimize epsilon" => t.adam.eps = num(v)?,
            "Adam beta1" => t.adam.beta1 = num(v)?,
            "Adam beta2" => t.adam.beta2 = num(v)?,
            "Batch-size" => t.batch_size = num(v)?,
            "Inference Beam-Size" => m.beam = num(v)?,
            "Dev beam size" => t.eval_beam = num(v)?,
            "Length penalty" => m.length_penalty = num(v)?,
            "Max decode length factor" => m.max_len_factor = num(v)?,
            "Max sentence length" => m.max_sentence_len = num(v)?,
            "ResNet input size" => {
                let dims: Vec<usize> = v.split('x').map(num).collect::<std::result::Result<_, _>>()?;
                let [h, w, c] = dims[..] else { return Err(format!("expected HxWxC, got '{v}'")) };
                m.resnet.input_size = (h, w, c);
            }
            "ResNet stage channels" => m.resnet.stage_channels = list(v)?,
            "ResNet blocks per stage" => m.resnet.blocks_per_stage = list(v)?,
            "ResNet stage strides" => m.resnet.stage_strides = list(v)?,
            "ResNet conv feature stage" => m.resnet.conv_extraction_stage = num(v)?,
            "ResNet v1 CBN inference" => self.v1_inference = inference(v)?,
            "ResNet v2 CBN inference" => self.v2_inference = inference(v)?,
            "CBN decay" => m.resnet.bn_decay = num(v)?,
            "CBN damping factor" => m.resnet.bn_eps = num(v)?,
            "CBN MLP hidden units" => m.resnet.cbn_hidden = num(v)?,
            "BPE merge operations" => self.bpe_merges = num(v)?,
            "Max steps" => t.max_steps = num(v)?,
            "Eval every" => t.eval_every = num(v)?,
            "Patience" => t.patience = num(v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    fn check(&self) -> std::result::Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        self.model_config(5, 5).validate().map_err(|e| e.to_string())?;
        if self.bpe_merges < 0 {
            return Err("BPE merge operations must be non-negative".into());
        }
        Ok(())
    }

    /// The model configuration for the given vocabulary sizes with the
    /// variant's wiring applied.
    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        let mut m = self.model.clone();
        m.src_vocab = src_vocab;
        m.tgt_vocab = tgt_vocab;
        self.variant.configure(&mut m, self.cbn_stages);
        m.resnet.cbn_inference = match m.resnet.variant {
            ResNetVariant::V1 => self.v1_inference,
            ResNetVariant::V2 => self.v2_inference,
        };
        m
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let DropoutConfig { gru_in, gru_out, cgru_in, cgru_out, softmax_out } = m.dropout;
        let AdamConfig { lr, eps, beta1, beta2 } = t.adam;
        let (h, w, c) = m.resnet.input_size;
        vec![
            ("variant", self.variant.name().to_string()),
            ("Blocks with CBN", self.cbn_stages.name().to_string()),
            ("seed", t.seed.to_string()),
            ("Source and target embeddings", m.emb_dim.to_string()),
            ("GRU and CGRU Layer size", m.gru_dim.to_string()),
            ("Attention size", m.att_dim.to_string()),
            ("Conditioning size", m.q_dim.to_string()),
            ("Layer normalization", yes_no(m.layer_norm == LnPlacement::Gates).into()),
            ("Stop gradient into conditioning", yes_no(m.stop_gradient_q).into()),
            ("GRU input dropout", gru_in.to_string()),
            ("GRU output dropout", gru_out.to_string()),
            ("CGRU input dropout", cgru_in.to_string()),
            ("CGRU output dropout", cgru_out.to_string()),
            ("Softmax output dropout", softmax_out.to_string()),
            ("Optimizer", "Adam".into()),
            ("Learning rate", lr.to_string()),
            ("Optimize epsilon", eps.to_string()),
            ("Adam beta1", beta1.to_string()),
            ("Adam beta2", beta2.to_string()),
            ("Batch-size", t.batch_size.to_string()),
            ("Inference Beam-Size", m.beam.to_string()),
            ("Dev beam size", t.eval_beam.to_string()),
            ("Length penalty", m.length_penalty.to_string()),
            ("Max decode length factor", m.max_len_factor.to_string()),
            ("Max sentence length", m.max_sentence_len.to_string()),
            ("ResNet input size", format!("{h}x{w}x{c}")),
            ("ResNet stage channels", join(&m.resnet.stage_channels)),
            ("ResNet blocks per stage", join(&m.resnet.blocks_per_stage)),
            ("ResNet stage strides", join(&m.resnet.stage_strides)),
            ("ResNet conv feature stage", m.resnet.conv_extraction_stage.to_string()),
            ("ResNet v1 CBN inference", inference_name(self.v1_inference).into()),
            ("ResNet v2 CBN inference", inference_name(self.v2_inference).into()),
            ("CBN decay", m.resnet.bn_decay.to_string()),
            ("CBN damping factor", m.resnet.bn_eps.to_string()),
            ("CBN MLP hidden units", m.resnet.cbn_hidden.to_string()),
            ("BPE merge operations", self.bpe_merges.to_string()),
            ("Max steps", t.max_steps.to_string()),
            ("Eval every", t.eval_every.to_string()),
            ("Patience", t.patience.to_string()),
        ]
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
