use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{END, PAD, START};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A source/target pair of token ids, without start or end tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Padded id matrices, masks and images for a group of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, M]`, row-major.
    pub src: Vec<usize>,
    pub src_mask: Vec<f64>,
    /// `[B, K]`: start token, target, end token, padding.
    pub tgt: Vec<usize>,
    pub tgt_mask: Vec<f64>,
    /// `[B, H, W, C]`
    pub images: Option<Tensor>,
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// Corpus positions of the rows.
    pub indices: Vec<usize>,
}

impl Batch {
    /// Pads the selected examples into one batch.
    pub fn from_examples(pairs: &[EncodedPair], images: Option<&[Tensor]>, indices: &[usize], cap: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("batch without examples"));
        }
        for &i in indices {
            let p = &pairs[i];
            if p.src.is_empty() {
                return Err(Error::EmptyInput("empty source sentence"));
            }
            for len in [p.src.len(), p.tgt.len()] {
                if len > cap {
                    return Err(Error::Length { len, cap });
                }
            }
        }
        let m = indices.iter().map(|&i| pairs[i].src.len()).max().unwrap_or(0);
        let k = indices.iter().map(|&i| pairs[i].tgt.len()).max().unwrap_or(0) + 2;
        let b = indices.len();
        let (mut src, mut src_mask) = (vec![PAD; b * m], vec![0.0; b * m]);
        let (mut tgt, mut tgt_mask) = (vec![PAD; b * k], vec![0.0; b * k]);
        for (r, &i) in indices.iter().enumerate() {
            let p = &pairs[i];
            src[r * m..r * m + p.src.len()].copy_from_slice(&p.src);
            src_mask[r * m..r * m + p.src.len()].fill(1.0);
            let row = &mut tgt[r * k..(r + 1) * k];
            row[0] = START;
            row[1..=p.tgt.len()].copy_from_slice(&p.tgt);
            row[p.tgt.len() + 1] = END;
            tgt_mask[r * k..r * k + p.tgt.len() + 2].fill(1.0);
        }
        let images = match images {
            Some(imgs) => {
                let shape = imgs[indices[0]].shape().to_vec();
                let mut data = Vec::with_capacity(b * imgs[indices[0]].len());
                for &i in indices {
                    if imgs[i].shape() != shape.as_slice() {
                        return Err(Error::Size("images in a batch must share one shape".into()));
                    }
                    data.extend_from_slice(imgs[i].data());
                }
                let mut full = vec![b];
                full.extend_from_slice(&shape);
                Some(Tensor::new(&full, data)?)
            }
            None => None,
        };
        Ok(Self { src, src_mask, tgt, tgt_mask, images, size: b, src_len: m, tgt_len: k, indices: indices.to_vec() })
    }
}

/// Splits the corpus into batches of at most `batch_size`, in a seeded
/// shuffled order (corpus order when `shuffle_seed` is `None`). Sentences
/// longer than `cap` tokens are rejected.
pub fn make_batches(
    pairs: &[EncodedPair],
    images: Option<&[Tensor]>,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    cap: usize,
) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    if let Some(imgs) = images {
        if imgs.len() != pairs.len() {
            return Err(Error::Pairing(alloc::format!("{} images for {} sentence pairs", imgs.len(), pairs.len())));
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(|idx| Batch::from_examples(pairs, images, idx, cap)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(src: &[usize], tgt: &[usize]) -> EncodedPair {
        EncodedPair { src: src.to_vec(), tgt: tgt.to_vec() }
    }

    #[test]
    fn single_sentence() {
        let b = make_batches(&[pair(&[5, 6], &[7])], None, 4, None, 10).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].size, 1);
        assert_eq!(b[0].src_mask, [1.0, 1.0]);
        assert_eq!(b[0].tgt, [START, 7, END]);
        assert_eq!(b[0].tgt_mask, [1.0; 3]);
    }

    #[test]
    fn padding_and_masks() {
        let pairs = [pair(&[5, 6, 7], &[8]), pair(&[5, 6, 7, 8, 9], &[8, 9])];
        let b = &make_batches(&pairs, None, 2, None, 10).unwrap()[0];
        assert_eq!(b.src_len, 5);
        assert_eq!(b.src_mask[..5], [1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.src[..5], [5, 6, 7, PAD, PAD]);
        assert_eq!(b.tgt, [START, 8, END, PAD, START, 8, 9, END]);
        assert_eq!(b.tgt_mask, [1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn seeded_order_is_reproducible() {
        let pairs: Vec<_> = (0..20).map(|i| pair(&[4 + i % 5], &[4])).collect();
        let a = make_batches(&pairs, None, 3, Some(7), 10).unwrap();
        let b = make_batches(&pairs, None, 3, Some(7), 10).unwrap();
        let c = make_batches(&pairs, None, 3, Some(8), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.iter().map(|x| x.indices.clone()).collect::<Vec<_>>(), c.iter().map(|x| x.indices.clone()).collect::<Vec<_>>());
        let mut seen: Vec<usize> = a.iter().flat_map(|x| x.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn errors() {
        assert!(matches!(make_batches(&[pair(&[4; 6], &[4])], None, 1, None, 5), Err(Error::Length { len: 6, cap: 5 })));
        assert!(make_batches(&[], None, 1, None, 5).is_err());
        let imgs = [Tensor::zeros(&[2, 2, 3])];
        assert!(matches!(make_batches(&[pair(&[4], &[4]), pair(&[4], &[4])], Some(&imgs), 1, None, 5), Err(Error::Pairing(_))));
    }

    #[test]
    fn images_are_stacked() {
        let imgs = [Tensor::full(&[2, 2, 3], 1.0), Tensor::full(&[2, 2, 3], 2.0)];
        let b = &make_batches(&[pair(&[4], &[4]), pair(&[5], &[5])], Some(&imgs), 2, None, 5).unwrap()[0];
        let t = b.images.as_ref().unwrap();
        assert_eq!(t.shape(), &[2, 2, 2, 3]);
        assert_eq!(t.data()[12], 2.0);
    }
}
