//! Corpus splits on disk and the text pipeline (tokenize, BPE, vocabulary).
//!
//! A split named `train` in a data directory consists of `train.src` and
//! `train.tgt` (one sentence per line), optionally `train.images` (an index
//! of image files) and `train.slots` (ambiguous-slot annotations).

use std::path::Path;

use mmt_core::data::{bpe, tokenize, BpeModel, EncodedPair, SynthExample, Vocabulary};
use mmt_core::train::Dataset;
use mmt_core::Tensor;

use crate::error::{Error, IoContext, Result};
use crate::formats;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub images: Option<Vec<Tensor>>,
    pub slots: Vec<Option<(usize, String)>>,
}

impl Corpus {
    pub fn from_synth(examples: &[SynthExample]) -> Self {
        Self {
            src: examples.iter().map(|e| e.src.clone()).collect(),
            tgt: examples.iter().map(|e| e.tgt.clone()).collect(),
            images: Some(examples.iter().map(|e| e.image.clone()).collect()),
            slots: examples.iter().map(|e| Some((e.ambiguous_slot, e.shape.target_word().to_string()))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Reads split `name` from `dir`.
    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let src = formats::read_lines(&dir.join(format!("{name}.src")))?;
        let tgt = formats::read_lines(&dir.join(format!("{name}.tgt")))?;
        if src.len() != tgt.len() {
            return Err(Error::format(dir.join(format!("{name}.tgt")), format!("{} target lines for {} source lines", tgt.len(), src.len())));
        }
        let index = dir.join(format!("{name}.images"));
        let images = if index.exists() {
            let imgs = formats::read_images(&index)?;
            if imgs.len() != src.len() {
                return Err(Error::format(&index, format!("{} images for {} sentences", imgs.len(), src.len())));
            }
            Some(imgs)
        } else {
            None
        };
        let slot_path = dir.join(format!("{name}.slots"));
        let slots = if slot_path.exists() {
            let lines = formats::read_lines(&slot_path)?;
            if lines.len() != src.len() {
                return Err(Error::format(&slot_path, format!("{} slot lines for {} sentences", lines.len(), src.len())));
            }
            lines.iter().enumerate().map(|(i, l)| formats::parse_slot(&slot_path, i + 1, l)).collect::<Result<_>>()?
        } else {
            vec![None; src.len()]
        };
        Ok(Self { src, tgt, images, slots })
    }

    /// Writes split `name` into `dir`, with images under `dir/images/`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        formats::write_lines(&dir.join(format!("{name}.src")), &self.src)?;
        formats::write_lines(&dir.join(format!("{name}.tgt")), &self.tgt)?;
        let slots: Vec<String> = self.slots.iter().map(formats::format_slot).collect();
        formats::write_lines(&dir.join(format!("{name}.slots")), &slots)?;
        if let Some(imgs) = &self.images {
            let img_dir = dir.join("images");
            std::fs::create_dir_all(&img_dir).at(&img_dir)?;
            let mut index = Vec::with_capacity(imgs.len());
            for (i, img) in imgs.iter().enumerate() {
                let rel = format!("images/{name}_{i:05}.mmti");
                formats::write_image(&dir.join(&rel), img)?;
                index.push(rel);
            }
            formats::write_lines(&dir.join(format!("{name}.images")), &index)?;
        }
        Ok(())
    }
}

/// Learned subword models and vocabularies for both languages.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPipeline {
    pub src_bpe: BpeModel,
    pub tgt_bpe: BpeModel,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

fn subwords(bpe: &BpeModel, line: &str) -> Vec<String> {
    bpe.apply_all(&tokenize(line))
}

impl TextPipeline {
    /// Learns BPE merges and vocabularies from a training corpus.
    pub fn learn(train: &Corpus, merges: i64) -> Result<Self> {
        let learn_side = |lines: &[String]| -> Result<(BpeModel, Vocabulary)> {
            let tokens: Vec<String> = lines.iter().flat_map(|l| tokenize(l)).collect();
            let bpe = BpeModel::learn(tokens.iter().map(String::as_str), merges)?;
            let pieces: Vec<String> = lines.iter().flat_map(|l| subwords(&bpe, l)).collect();
            let vocab = Vocabulary::build(pieces.iter().map(String::as_str));
            Ok((bpe, vocab))
        };
        let (src_bpe, src_vocab) = learn_side(&train.src)?;
        let (tgt_bpe, tgt_vocab) = learn_side(&train.tgt)?;
        Ok(Self { src_bpe, tgt_bpe, src_vocab, tgt_vocab })
    }

    pub fn encode_source(&self, line: &str) -> Vec<usize> {
        self.src_vocab.encode(&subwords(&self.src_bpe, line))
    }

    pub fn encode_target(&self, line: &str) -> Vec<usize> {
        self.tgt_vocab.encode(&subwords(&self.tgt_bpe, line))
    }

    /// Target ids back to a space-joined word sequence.
    pub fn decode_target(&self, ids: &[usize]) -> Result<String> {
        Ok(bpe::join_sentence(&self.tgt_vocab.decode(ids)?).join(" "))
    }

    /// Encoded pairs with word-level references; images are kept only when
    /// the model reads them.
    pub fn dataset(&self, corpus: &Corpus, with_images: bool) -> Result<Dataset> {
        if with_images && corpus.images.is_none() {
            return Err(Error::Usage("this variant needs images but the corpus has no image index".into()));
        }
        Ok(Dataset {
            pairs: corpus
                .src
                .iter()
                .zip(&corpus.tgt)
                .map(|(s, t)| EncodedPair { src: self.encode_source(s), tgt: self.encode_target(t) })
                .collect(),
            images: if with_images { corpus.images.clone() } else { None },
            references: corpus.tgt.iter().map(|t| tokenize(t)).collect(),
            ambiguous: corpus.slots.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmt_core::data::synth_corpus;

    #[test]
    fn split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = Corpus::from_synth(&synth_corpus(5, 3).unwrap());
        c.save(dir.path(), "dev").unwrap();
        assert_eq!(Corpus::load(dir.path(), "dev").unwrap(), c);
    }

    #[test]
    fn text_only_split_loads_without_images() {
        let dir = tempfile::tempdir().unwrap();
        formats::write_lines(&dir.path().join("t.src"), &["a b"]).unwrap();
        formats::write_lines(&dir.path().join("t.tgt"), &["x"]).unwrap();
        let c = Corpus::load(dir.path(), "t").unwrap();
        assert!(c.images.is_none());
        assert_eq!(c.slots, [None]);
        formats::write_lines(&dir.path().join("t.tgt"), &["x", "y"]).unwrap();
        assert!(Corpus::load(dir.path(), "t").is_err());
    }

    #[test]
    fn pipeline_round_trips_targets() {
        let c = Corpus::from_synth(&synth_corpus(40, 1).unwrap());
        for merges in [0, 3, 10_000] {
            let p = TextPipeline::learn(&c, merges).unwrap();
            for t in &c.tgt {
                assert_eq!(&p.decode_target(&p.encode_target(t)).unwrap(), t);
            }
        }
        let p = TextPipeline::learn(&c, 10_000).unwrap();
        let d = p.dataset(&c, true).unwrap();
        d.validate().unwrap();
        assert_eq!(d.references[0].len(), c.tgt[0].split(' ').count());
    }
}
