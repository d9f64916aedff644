use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};

/// Mean over unmasked target positions of `−log softmax(logits_t)[y_t]`.
///
/// `logits[t]` is `[B, V]` and scores position `t` of the row-major `[B, K]`
/// targets, so `logits.len() == K`.
pub fn nll_loss(g: &mut Graph<'_>, logits: &[Var], tgt: &[usize], mask: &[f64], batch: usize) -> Result<Var> {
    if batch == 0 || tgt.len() != mask.len() || tgt.len() != batch * logits.len() {
        return Err(dim_err("nll_loss: targets and mask must be [B, K] with one logits matrix per position"));
    }
    let k = logits.len();
    let count: f64 = mask.iter().sum();
    if count == 0.0 {
        return Err(Error::EmptySupport("no target tokens"));
    }
    let mut total: Option<Var> = None;
    for (t, &l) in logits.iter().enumerate() {
        let ids: Vec<usize> = (0..batch).map(|b| tgt[b * k + t]).collect();
        let w: Vec<f64> = (0..batch).map(|b| mask[b * k + t]).collect();
        let nll = g.cross_entropy(l, &ids, &w)?;
        total = Some(match total {
            Some(acc) => g.add(acc, nll)?,
            None => nll,
        });
    }
    g.scale(total.expect("k > 0 since count > 0"), 1.0 / count)
}
