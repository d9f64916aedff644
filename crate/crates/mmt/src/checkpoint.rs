//! Checkpoint directories: `manifest.json` describes the run and every
//! parameter block, `params.bin` holds the numbers.
//!
//! `params.bin` starts with the magic `MMTP` followed by, for each
//! parameter in manifest order, its values, Adam first moments and Adam
//! second moments, then for each normalization layer its running means and
//! running variances. All numbers are little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mmt_core::data::{BpeModel, Vocabulary};
use mmt_core::vision::BnState;
use mmt_core::Model;

use crate::config::ExperimentConfig;
use crate::error::{Error, IoContext, Result};
use crate::pipeline::TextPipeline;

const FORMAT: &str = "mmt-checkpoint-1";
const MAGIC: &[u8; 4] = b"MMTP";

/// Trainer progress needed to continue a run exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub since_best: usize,
    pub loss_sum: f64,
    pub loss_count: usize,
    pub best_step: usize,
    pub best_bleu: f64,
    pub best_loss: f64,
    pub best_ambiguous: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct NormEntry {
    name: String,
    channels: usize,
    updates: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: Vec<(String, String)>,
    src_bpe: Vec<(String, String)>,
    tgt_bpe: Vec<(String, String)>,
    src_vocab: Vec<String>,
    tgt_vocab: Vec<String>,
    params: Vec<ParamEntry>,
    norms: Vec<NormEntry>,
    train: Option<TrainState>,
}

pub struct Loaded {
    pub config: ExperimentConfig,
    pub text: TextPipeline,
    pub model: Model,
    pub train: Option<TrainState>,
}

/// Writes a checkpoint into `dir` (created if needed). The files are
/// written next to their final names and renamed into place.
pub fn save(dir: &Path, config: &ExperimentConfig, text: &TextPipeline, model: &Model, train: Option<TrainState>) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        config: config.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        src_bpe: text.src_bpe.merges().to_vec(),
        tgt_bpe: text.tgt_bpe.merges().to_vec(),
        src_vocab: text.src_vocab.tokens().to_vec(),
        tgt_vocab: text.tgt_vocab.tokens().to_vec(),
        params: model
            .params
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), trainable: p.trainable })
            .collect(),
        norms: model
            .bn_names
            .iter()
            .zip(&model.bn_states)
            .map(|(n, s)| NormEntry { name: n.clone(), channels: s.running_mean.len(), updates: s.updates })
            .collect(),
        train,
    };
    let mut bin = Vec::new();
    bin.extend_from_slice(MAGIC);
    let mut put = |xs: &[f64]| xs.iter().for_each(|v| bin.extend_from_slice(&v.to_le_bytes()));
    for (_, p) in model.params.iter() {
        put(p.value.data());
        put(&p.adam_m);
        put(&p.adam_v);
    }
    for s in &model.bn_states {
        put(&s.running_mean);
        put(&s.running_var);
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    for (name, bytes) in [("params.bin", bin), ("manifest.json", json.into_bytes())] {
        let tmp = dir.join(format!("{name}.tmp"));
        fs::write(&tmp, bytes).at(&tmp)?;
        fs::rename(&tmp, dir.join(name)).at(dir.join(name))?;
    }
    Ok(())
}

/// Rebuilds the model from the stored configuration and overwrites every
/// parameter, optimizer moment and running statistic with the stored ones.
pub fn load(dir: &Path) -> Result<Loaded> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).at(&mpath)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.format != FORMAT {
        return Err(Error::Compat(format!("unsupported checkpoint format '{}'", m.format)));
    }
    let cfg_text: String = m.config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let config = ExperimentConfig::parse(&cfg_text, &mpath.display().to_string())?;
    let vocab = |tokens: Vec<String>| Vocabulary::from_list(tokens).map_err(|e| Error::Compat(e.to_string()));
    let pipeline = TextPipeline {
        src_bpe: BpeModel::from_merges(m.src_bpe),
        tgt_bpe: BpeModel::from_merges(m.tgt_bpe),
        src_vocab: vocab(m.src_vocab)?,
        tgt_vocab: vocab(m.tgt_vocab)?,
    };
    let mut model = Model::new(config.model_config(pipeline.src_vocab.len(), pipeline.tgt_vocab.len()), config.train.seed)?;

    if m.params.len() != model.params.len() || m.norms.len() != model.bn_states.len() {
        return Err(Error::Compat(format!(
            "checkpoint has {} parameters and {} norm layers, the configured model {} and {}",
            m.params.len(),
            m.norms.len(),
            model.params.len(),
            model.bn_states.len()
        )));
    }
    for (entry, (_, p)) in m.params.iter().zip(model.params.iter()) {
        if entry.name != p.name || entry.shape != p.value.shape() {
            return Err(Error::Compat(format!(
                "parameter {} {:?} does not match the model's {} {:?} (vocabulary or configuration mismatch)",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
    }
    let bpath = dir.join("params.bin");
    let bin = fs::read(&bpath).at(&bpath)?;
    let expected: usize = 4 + 8 * (model.params.iter().map(|(_, p)| 3 * p.value.len()).sum::<usize>()
        + m.norms.iter().map(|n| 2 * n.channels).sum::<usize>());
    if bin.len() != expected || &bin[..4] != MAGIC {
        return Err(Error::format(&bpath, format!("expected {expected} bytes with magic MMTP, found {}", bin.len())));
    }
    let mut pos = 4;
    let mut take = |dst: &mut [f64]| {
        for v in dst.iter_mut() {
            *v = f64::from_le_bytes(bin[pos..pos + 8].try_into().unwrap());
            pos += 8;
        }
    };
    for (p, entry) in model.params.iter_mut().zip(&m.params) {
        take(p.value.data_mut());
        take(&mut p.adam_m);
        take(&mut p.adam_v);
        p.trainable = entry.trainable;
    }
    let mut states = Vec::with_capacity(m.norms.len());
    for (n, name) in m.norms.iter().zip(&model.bn_names) {
        if &n.name != name {
            return Err(Error::Compat(format!("norm layer {} does not match the model's {name}", n.name)));
        }
        let mut s = BnState::new(n.channels);
        take(&mut s.running_mean);
        take(&mut s.running_var);
        s.updates = n.updates;
        states.push(s);
    }
    model.bn_states = states;
    Ok(Loaded { config, text: pipeline, model, train: m.train })
}
