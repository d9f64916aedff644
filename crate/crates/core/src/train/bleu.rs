use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    out
}

/// Corpus BLEU with one reference per candidate: clipped n-gram precisions
/// up to `max_n`, geometric mean, brevity penalty. Precisions for `n ≥ 2`
/// use add-one smoothing, `(matches + 1) / (total + 1)`.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<T>], max_n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Parameter("BLEU needs a non-empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Pairing(alloc::format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Parameter("max_n must be at least 1".into()));
    }
    let mut matches = alloc::vec![0usize; max_n];
    let mut totals = alloc::vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        c += cand.len();
        r += reference.len();
        for n in 1..=max_n {
            let rc = ngrams(reference, n);
            for (g, k) in ngrams(cand, n) {
                matches[n - 1] += k.min(rc.get(&g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    if c == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = math::ln(matches[0] as f64 / totals[0] as f64);
    for n in 1..max_n {
        log_p += math::ln((matches[n] + 1) as f64 / (totals[n] + 1) as f64);
    }
    let bp = if c >= r { 0.0 } else { 1.0 - r as f64 / c as f64 };
    Ok(math::exp(log_p / max_n as f64 + bp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn s(x: &str) -> Vec<&str> {
        x.split_whitespace().collect()
    }

    #[test]
    fn identity_scores_one() {
        let c = vec![s("the cat sat on the mat"), s("a"), s("ein rot kreis links")];
        assert_eq!(bleu(&c, &c, 4).unwrap(), 1.0);
    }

    #[test]
    fn no_unigram_overlap_scores_zero() {
        assert_eq!(bleu(&[s("x y z")], &[s("a b c")], 4).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_brevity_example() {
        // p1 = 3/3, p2 = (2+1)/(2+1), p3 = (1+1)/(1+1), p4 = (0+1)/(0+1);
        // c = 3 < r = 4 so BP = exp(1 − 4/3).
        let v = bleu(&[s("the cat sat")], &[s("the cat sat down")], 4).unwrap();
        assert!((v - 0.7165313105737893).abs() < 1e-9);
        assert!((v - libm::exp(-1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn clipping_and_permutation() {
        let v = bleu(&[s("the the the")], &[s("the cat")], 1).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        let c = vec![s("a b c d"), s("b c a"), s("x a b")];
        let r = vec![s("a b c e"), s("b c"), s("a b x y")];
        let a = bleu(&c, &r, 4).unwrap();
        let b = bleu(&[c[2].clone(), c[0].clone(), c[1].clone()], &[r[2].clone(), r[0].clone(), r[1].clone()], 4).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn errors() {
        let empty: Vec<Vec<&str>> = vec![];
        assert!(bleu(&empty, &empty, 4).is_err());
        assert!(bleu(&[s("a")], &[s("a"), s("b")], 4).is_err());
    }
}
