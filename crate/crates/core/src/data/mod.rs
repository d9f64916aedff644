//! Tokenization, subword segmentation, vocabularies, batching, image
//! preprocessing and the synthetic ambiguous corpus.

pub mod batch;
pub mod bpe;
pub mod image;
pub mod synth;
pub mod tokenize;
pub mod vocab;

pub use batch::{make_batches, Batch, EncodedPair};
pub use bpe::BpeModel;
pub use image::{preprocess_image, PrepMode, Preprocessing};
pub use synth::{synth_corpus, Shape, SynthExample};
pub use tokenize::tokenize;
pub use vocab::Vocabulary;
