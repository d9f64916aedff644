//! On-disk formats: line-aligned text, BPE merge lists, vocabularies,
//! ambiguous-slot annotations and binary images.
//!
//! An image file (`.mmti`) is the magic `MMTI`, then height, width and
//! channels as little-endian `u32`, then `H·W·C` little-endian `f64`
//! values in row-major HWC order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mmt_core::data::{BpeModel, Vocabulary};
use mmt_core::Tensor;

use crate::error::{Error, IoContext, Result};

const IMAGE_MAGIC: &[u8; 4] = b"MMTI";

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).at(path)?;
    BufReader::new(file).lines().collect::<std::io::Result<_>>().at(path)
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let file = fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{}", l.as_ref()).at(path)?;
    }
    w.flush().at(path)
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let [h, w, c] = img.shape() else {
        return Err(Error::format(path, format!("image must be [H, W, C], got {:?}", img.shape())));
    };
    let mut bytes = Vec::with_capacity(16 + 8 * img.len());
    bytes.extend_from_slice(IMAGE_MAGIC);
    for d in [h, w, c] {
        let d = u32::try_from(*d).map_err(|_| Error::format(path, "image dimension exceeds u32"))?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for v in img.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).at(path)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).at(path)?;
    if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
        return Err(Error::format(path, "not an MMTI image"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    if bytes.len() != 16 + 8 * n {
        return Err(Error::format(path, format!("expected {} bytes of pixel data, found {}", 8 * n, bytes.len() - 16)));
    }
    let data = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(&shape, data)?)
}

/// Image paths listed one per line, relative to the index file's directory.
pub fn read_image_index(path: &Path) -> Result<Vec<PathBuf>> {
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(read_lines(path)?.into_iter().filter(|l| !l.trim().is_empty()).map(|l| base.join(l.trim())).collect())
}

pub fn read_images(index: &Path) -> Result<Vec<Tensor>> {
    read_image_index(index)?.iter().map(|p| read_image(p)).collect()
}

/// One merge per line: `left right`.
pub fn write_merges(path: &Path, bpe: &BpeModel) -> Result<()> {
    let lines: Vec<String> = bpe.merges().iter().map(|(a, b)| format!("{a} {b}")).collect();
    write_lines(path, &lines)
}

pub fn read_merges(path: &Path) -> Result<BpeModel> {
    let mut merges = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let parts: Vec<&str> = line.split(' ').collect();
        let [a, b] = parts[..] else {
            return Err(Error::format(path, format!("line {}: expected two symbols", i + 1)));
        };
        merges.push((a.to_string(), b.to_string()));
    }
    Ok(BpeModel::from_merges(merges))
}

/// One token per line, in id order.
pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    write_lines(path, vocab.tokens())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    Ok(Vocabulary::from_list(read_lines(path)?)?)
}

/// `index word` for a sentence with an ambiguous slot, `-` otherwise.
pub fn format_slot(slot: &Option<(usize, String)>) -> String {
    match slot {
        Some((i, w)) => format!("{i} {w}"),
        None => "-".into(),
    }
}

pub fn parse_slot(path: &Path, line_no: usize, line: &str) -> Result<Option<(usize, String)>> {
    if line.trim() == "-" {
        return Ok(None);
    }
    let bad = || Error::format(path, format!("line {line_no}: expected '<index> <word>' or '-'"));
    let (i, w) = line.trim().split_once(' ').ok_or_else(bad)?;
    Ok(Some((i.parse().map_err(|_| bad())?, w.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mmti");
        let img = Tensor::new(&[2, 3, 1], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 1.0 / 3.0]).unwrap();
        write_image(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(fs::metadata(&p).unwrap().len(), 16 + 6 * 8);
    }

    #[test]
    fn corrupt_images_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mmti");
        fs::write(&p, b"MMTI\x01\0\0\0\x01\0\0\0\x01\0\0\0").unwrap();
        assert!(matches!(read_image(&p), Err(Error::Format { .. })));
        fs::write(&p, b"PNG").unwrap();
        assert!(read_image(&p).is_err());
        assert!(matches!(read_image(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn merges_vocab_and_slots_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bpe = BpeModel::learn("low lower lowest newest".split(' '), 5).unwrap();
        let p = dir.path().join("m.bpe");
        write_merges(&p, &bpe).unwrap();
        assert_eq!(read_merges(&p).unwrap().merges(), bpe.merges());
        let v = Vocabulary::build("a b b c".split(' '));
        let p = dir.path().join("v.txt");
        write_vocab(&p, &v).unwrap();
        assert_eq!(read_vocab(&p).unwrap(), v);
        for s in [None, Some((4, "kreis".to_string()))] {
            assert_eq!(parse_slot(&p, 1, &format_slot(&s)).unwrap(), s);
        }
        assert!(parse_slot(&p, 1, "x kreis").is_err());
    }
}
