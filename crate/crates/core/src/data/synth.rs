//! Synthetic scenes whose descriptions contain a word that only the image
//! can translate.
//!
//! Each scene is one coloured shape on the left or right half of an 8×8
//! image. The source sentence names the colour and the side but calls the
//! shape a "mark"; the target names the shape ("kreis" or "quadrat").
//! Examples come in contrast pairs that share the sentence and differ only in
//! the shape, so without the image the shape word is a coin flip.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIZE: usize = 8;
const NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// 4×4 ring with the corners cut off.
    Circle,
    /// Filled 4×4 block.
    Square,
}

impl Shape {
    pub fn target_word(self) -> &'static str {
        match self {
            Shape::Circle => "kreis",
            Shape::Square => "quadrat",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthExample {
    pub src: String,
    pub tgt: String,
    /// `[8, 8, 3]`, values near `[0, 1]`.
    pub image: Tensor,
    /// Index of the shape word among the target's whitespace tokens.
    pub ambiguous_slot: usize,
    pub shape: Shape,
}

const COLORS: [(&str, &str, [f64; 3]); 4] = [
    ("red", "rot", [1.0, 0.0, 0.0]),
    ("green", "grün", [0.0, 1.0, 0.0]),
    ("blue", "blau", [0.0, 0.0, 1.0]),
    ("yellow", "gelb", [1.0, 1.0, 0.0]),
];
const SIDES: [(&str, &str); 2] = [("left", "links"), ("right", "rechts")];

fn sentences(template: usize, color: usize, side: usize, shape: Shape) -> (String, String, usize) {
    let (c_en, c_de, _) = COLORS[color];
    let (s_en, s_de) = SIDES[side];
    let w = shape.target_word();
    match template {
        0 => (format!("a {c_en} mark on the {s_en}"), format!("ein {c_de} {w} {s_de}"), 2),
        1 => (format!("the {c_en} mark is on the {s_en}"), format!("der {c_de} {w} ist {s_de}"), 2),
        _ => (format!("on the {s_en} there is a {c_en} mark"), format!("{s_de} ist ein {c_de} {w}"), 4),
    }
}

fn in_shape(shape: Shape, y: usize, x: usize) -> bool {
    let corner = (y == 0 || y == 3) && (x == 0 || x == 3);
    let centre = (1..=2).contains(&y) && (1..=2).contains(&x);
    match shape {
        Shape::Square => true,
        Shape::Circle => !corner && !centre,
    }
}

fn render(shape: Shape, color: [f64; 3], side: usize, row: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(SIZE * SIZE * 3);
    let left = side * SIZE / 2;
    for y in 0..SIZE {
        for x in 0..SIZE {
            let inside = (row..row + 4).contains(&y) && (left..left + 4).contains(&x) && in_shape(shape, y - row, x - left);
            for &c in &color {
                let base = if inside { c } else { 0.0 };
                data.push(base + rng.gen_range(-NOISE..NOISE));
            }
        }
    }
    Tensor::new(&[SIZE, SIZE, 3], data).expect("image shape")
}

/// `n` examples in contrast pairs (the last pair is cut short when `n` is odd).
pub fn synth_corpus(n: usize, seed: u64) -> Result<Vec<SynthExample>> {
    if n == 0 {
        return Err(Error::Parameter("corpus size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let template = rng.gen_range(0..3);
        let color = rng.gen_range(0..COLORS.len());
        let side = rng.gen_range(0..SIDES.len());
        let row = rng.gen_range(0..=SIZE - 4);
        for shape in [Shape::Circle, Shape::Square] {
            if out.len() == n {
                break;
            }
            let (src, tgt, slot) = sentences(template, color, side, shape);
            let image = render(shape, COLORS[color].2, side, row, &mut rng);
            out.push(SynthExample { src, tgt, image, ambiguous_slot: slot, shape });
        }
    }
    Ok(out)
}
