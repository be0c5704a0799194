//! Index bookkeeping between the two modalities: the delay layout of the
//! residual levels, the alignment of video frames to audio positions, and
//! the two conditioning layouts (channel fusion and time prepending).
//!
//! Positions and levels are 0-based in code. Level `l` is delayed by `l + 1`
//! rows, so row 0 is padding on every level and the visual row placed there
//! is seen one step before any audio token.

use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;

/// Delay-pattern layout: `len = t_a + n_q` rows, padding id `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayedGrid {
    pub cells: Vec<u16>,
    pub len: usize,
    pub n_q: usize,
    pub k: usize,
}

impl DelayedGrid {
    /// Every cell padding, the starting point for generation.
    pub fn all_pad(t_a: usize, n_q: usize, k: usize) -> Self {
        let len = t_a + n_q;
        DelayedGrid {
            cells: vec![k as u16; len * n_q],
            len,
            n_q,
            k,
        }
    }

    pub fn pad(&self) -> u16 {
        self.k as u16
    }

    pub fn t_a(&self) -> usize {
        self.len - self.n_q
    }

    #[inline]
    pub fn get(&self, row: usize, level: usize) -> u16 {
        self.cells[row * self.n_q + level]
    }

    #[inline]
    pub fn set(&mut self, row: usize, level: usize, v: u16) {
        self.cells[row * self.n_q + level] = v;
    }

    /// Whether the layout reserves `(row, level)` for a real token.
    #[inline]
    pub fn is_token_slot(&self, row: usize, level: usize) -> bool {
        is_token_slot(row, level, self.t_a())
    }

    /// Checks the padding structure and token ranges.
    pub fn validate(&self) -> Result<()> {
        if self.len < self.n_q || self.cells.len() != self.len * self.n_q {
            return Err(Error::MalformedGrid("cell count does not match layout".into()));
        }
        for row in 0..self.len {
            for level in 0..self.n_q {
                let v = self.get(row, level);
                if self.is_token_slot(row, level) {
                    if v as usize >= self.k {
                        return Err(Error::MalformedGrid(format!(
                            "padding or out-of-range id {v} in token cell ({row}, {level})"
                        )));
                    }
                } else if v != self.pad() {
                    return Err(Error::MalformedGrid(format!(
                        "token {v} in padding cell ({row}, {level})"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn is_token_slot(row: usize, level: usize, t_a: usize) -> bool {
    row > level && row - level - 1 < t_a
}

pub fn apply_delay(grid: &TokenGrid) -> DelayedGrid {
    let mut out = DelayedGrid::all_pad(grid.t_a, grid.n_q, grid.k);
    for j in 0..grid.t_a {
        for level in 0..grid.n_q {
            out.set(j + level + 1, level, grid.get(j, level));
        }
    }
    out
}

pub fn remove_delay(delayed: &DelayedGrid) -> Result<TokenGrid> {
    delayed.validate()?;
    let t_a = delayed.t_a();
    let mut tokens = Vec::with_capacity(t_a * delayed.n_q);
    for j in 0..t_a {
        for level in 0..delayed.n_q {
            tokens.push(delayed.get(j + level + 1, level));
        }
    }
    Ok(TokenGrid {
        tokens,
        t_a,
        n_q: delayed.n_q,
        k: delayed.k,
    })
}

/// Video frame feeding each fused position; `None` is the learned visual
/// padding slot used after the last audio step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMap {
    pub t_a: usize,
    pub t_v: usize,
    pub len: usize,
    pub frame_of: Vec<Option<usize>>,
}

impl AlignmentMap {
    /// Video time of the frame at `pos` never exceeds the audio time of
    /// `pos`, measured on the common clip duration.
    pub fn is_causal_at(&self, pos: usize) -> bool {
        match self.frame_of[pos] {
            None => true,
            Some(f) => f * self.t_a <= pos * self.t_v,
        }
    }

    pub fn is_causal(&self) -> bool {
        (0..self.len).all(|p| self.is_causal_at(p))
    }
}

pub fn build_alignment(t_v: usize, t_a: usize, n_q: usize) -> Result<AlignmentMap> {
    if t_v == 0 || t_a == 0 {
        return Err(Error::invalid("alignment needs t_v >= 1 and t_a >= 1"));
    }
    let len = t_a + n_q;
    let frame_of = (0..len)
        .map(|p| (p < t_a).then(|| ((p * t_v) / t_a).min(t_v - 1)))
        .collect();
    Ok(AlignmentMap {
        t_a,
        t_v,
        len,
        frame_of,
    })
}

/// Channel concatenation, audio channels first.
pub fn fuse<T: Real>(audio: &Matrix<T>, visual: &Matrix<T>) -> Result<Matrix<T>> {
    if audio.rows != visual.rows {
        return Err(Error::invalid(format!(
            "cannot fuse {} audio rows with {} visual rows",
            audio.rows, visual.rows
        )));
    }
    let cols = audio.cols + visual.cols;
    let mut out = Vec::with_capacity(audio.rows * cols);
    for r in 0..audio.rows {
        out.extend_from_slice(audio.row(r));
        out.extend_from_slice(visual.row(r));
    }
    Ok(Matrix::from_vec(out, audio.rows, cols))
}

/// Inverse of [`fuse`].
pub fn split<T: Real>(fused: &Matrix<T>, d_a: usize) -> (Matrix<T>, Matrix<T>) {
    let d_v = fused.cols - d_a;
    let mut a = Matrix::zeros(fused.rows, d_a);
    let mut v = Matrix::zeros(fused.rows, d_v);
    for r in 0..fused.rows {
        a.row_mut(r).copy_from_slice(&fused.row(r)[..d_a]);
        v.row_mut(r).copy_from_slice(&fused.row(r)[d_a..]);
    }
    (a, v)
}

/// Baseline layout: visual rows `[0; d_a] ++ v` followed by audio rows
/// `a ++ [0; d_v]`.
pub fn prepend_condition<T: Real>(audio: &Matrix<T>, visual: &Matrix<T>) -> Matrix<T> {
    let d = audio.cols + visual.cols;
    let mut out = Matrix::zeros(visual.rows + audio.rows, d);
    for r in 0..visual.rows {
        out.row_mut(r)[audio.cols..].copy_from_slice(visual.row(r));
    }
    for r in 0..audio.rows {
        out.row_mut(visual.rows + r)[..audio.cols].copy_from_slice(audio.row(r));
    }
    out
}

/// Rows of a prepended sequence that take part in the loss.
pub fn prepend_loss_mask(t_v: usize, len: usize) -> Vec<bool> {
    (0..t_v + len).map(|r| r >= t_v).collect()
}
