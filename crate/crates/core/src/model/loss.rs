//! Masked next-row cross-entropy.
//!
//! Logits at position `r` score delayed-grid row `r + 1`. Only cells whose
//! target is a real token count; padding targets are skipped entirely.

use super::ops::log_softmax;
use super::transformer::Logits;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::sequencer::DelayedGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    /// Mean over contributing cells, 0 when there are none.
    pub mean: f64,
    pub sum: f64,
    pub count: usize,
    /// Set when no cell contributed.
    pub empty: bool,
}

fn check_shapes<T: Real>(logits: &Logits<T>, target: &DelayedGrid) -> Result<()> {
    if logits.positions != target.len || logits.n_q != target.n_q || logits.vocab != target.k + 1 {
        return Err(Error::invalid(format!(
            "logits {}x{}x{} do not match target grid {}x{} with k={}",
            logits.positions, logits.n_q, logits.vocab, target.len, target.n_q, target.k
        )));
    }
    Ok(())
}

pub fn loss<T: Real>(logits: &Logits<T>, target: &DelayedGrid) -> Result<LossValue> {
    loss_and_grad(logits, target, None)
}

/// Computes the loss and, when `dlogits` is given, accumulates
/// `scale * d(sum of cell losses)/d logits` into it.
pub fn loss_and_grad<T: Real>(
    logits: &Logits<T>,
    target: &DelayedGrid,
    mut dlogits: Option<(&mut [T], T)>,
) -> Result<LossValue> {
    check_shapes(logits, target)?;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    let mut buf = vec![T::zero(); logits.vocab];
    for r in 0..logits.positions.saturating_sub(1) {
        for level in 0..target.n_q {
            if !target.is_token_slot(r + 1, level) {
                continue;
            }
            let t = target.get(r + 1, level) as usize;
            buf.copy_from_slice(logits.cell(r, level));
            log_softmax(&mut buf);
            sum -= buf[t].as_f64();
            count += 1;
            if let Some((d, scale)) = dlogits.as_mut() {
                let o = (r * logits.n_q + level) * logits.vocab;
                for (i, (g, &lp)) in d[o..o + logits.vocab].iter_mut().zip(&buf).enumerate() {
                    let p = lp.exp();
                    let y = if i == t { T::one() } else { T::zero() };
                    *g += *scale * (p - y);
                }
            }
        }
    }
    if count == 0 {
        log::warn!("no contributing cells in loss; reporting 0");
    }
    Ok(LossValue {
        mean: if count > 0 { sum / count as f64 } else { 0.0 },
        sum,
        count,
        empty: count == 0,
    })
}
