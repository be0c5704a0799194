//! Input side of the network: summed per-level token embeddings, the visual
//! projection MLP, and assembly of the conditioned input sequence.

use super::ops::{gelu, gelu_grad, linear_backward, linear_bias};
use super::params::{Conditioning, Params};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;
use crate::sequencer::{self, AlignmentMap, DelayedGrid};

/// Row `j` is the sum over levels of `E_level[cell(j, level)]`.
pub fn embed_audio<T: Real>(delayed: &DelayedGrid, params: &Params<T>) -> Result<Matrix<T>> {
    let cfg = &params.cfg;
    if delayed.n_q != cfg.n_q || delayed.k != cfg.k {
        return Err(Error::invalid(format!(
            "grid (n_q={}, k={}) does not match model (n_q={}, k={})",
            delayed.n_q, delayed.k, cfg.n_q, cfg.k
        )));
    }
    let mut out = Matrix::zeros(delayed.len, cfg.d_a);
    for j in 0..delayed.len {
        embed_audio_row(params, &delayed.cells[j * cfg.n_q..(j + 1) * cfg.n_q], out.row_mut(j))?;
    }
    Ok(out)
}

/// One delayed-grid row; `out` is overwritten.
pub fn embed_audio_row<T: Real>(params: &Params<T>, cells: &[u16], out: &mut [T]) -> Result<()> {
    let d_a = params.cfg.d_a;
    out.fill(T::zero());
    for (level, &cell) in cells.iter().enumerate() {
        let id = cell as usize;
        if id > params.cfg.k {
            return Err(Error::InvalidToken {
                token: id as u32,
                level,
                k: params.cfg.k,
            });
        }
        let table = params.get(params.layout.embed[level]);
        for (o, e) in out.iter_mut().zip(&table[id * d_a..(id + 1) * d_a]) {
            *o += *e;
        }
    }
    Ok(())
}

fn embed_audio_backward<T: Real>(delayed: &DelayedGrid, params: &Params<T>, d_audio: &Matrix<T>, grads: &mut [T]) {
    let d_a = params.cfg.d_a;
    for j in 0..delayed.len {
        for level in 0..params.cfg.n_q {
            let id = delayed.get(j, level) as usize;
            let span = params.layout.embed[level];
            let g = &mut grads[span.offset + id * d_a..span.offset + (id + 1) * d_a];
            for (gi, &di) in g.iter_mut().zip(d_audio.row(j)) {
                *gi += di;
            }
        }
    }
}

/// Hidden pre-activations kept for the backward pass.
pub struct VisualCache<T> {
    input: Matrix<T>,
    pre: Matrix<T>,
}

/// Two affine maps with a GELU between them, applied to every frame.
pub fn project_visual<T: Real>(features: &Matrix<T>, params: &Params<T>) -> Result<(Matrix<T>, VisualCache<T>)> {
    let cfg = &params.cfg;
    let lay = &params.layout;
    if features.cols != cfg.d_raw {
        return Err(Error::invalid(format!(
            "video has {} channels, model expects {}",
            features.cols, cfg.d_raw
        )));
    }
    let mut pre = Matrix::zeros(features.rows, cfg.d_vis_hidden);
    let mut out = Matrix::zeros(features.rows, cfg.d_v);
    let mut hidden = vec![T::zero(); cfg.d_vis_hidden];
    for r in 0..features.rows {
        linear_bias(params.get(lay.vis_w1), params.get(lay.vis_b1), features.row(r), pre.row_mut(r));
        for (h, &a) in hidden.iter_mut().zip(pre.row(r)) {
            *h = gelu(a);
        }
        linear_bias(params.get(lay.vis_w2), params.get(lay.vis_b2), &hidden, out.row_mut(r));
    }
    Ok((
        out,
        VisualCache {
            input: features.clone(),
            pre,
        },
    ))
}

/// Accumulates parameter gradients; returns the gradient w.r.t. the input
/// features.
pub fn project_visual_backward<T: Real>(
    params: &Params<T>,
    cache: &VisualCache<T>,
    d_out: &Matrix<T>,
    grads: &mut [T],
) -> Matrix<T> {
    let cfg = &params.cfg;
    let lay = &params.layout;
    let mut d_in = Matrix::zeros(cache.input.rows, cfg.d_raw);
    let mut hidden = vec![T::zero(); cfg.d_vis_hidden];
    let mut d_hidden = vec![T::zero(); cfg.d_vis_hidden];
    for r in 0..cache.input.rows {
        let dy = d_out.row(r);
        if dy.iter().all(|&g| g == T::zero()) {
            continue;
        }
        for (h, &a) in hidden.iter_mut().zip(cache.pre.row(r)) {
            *h = gelu(a);
        }
        for (gb, &g) in grads[lay.vis_b2.range()].iter_mut().zip(dy) {
            *gb += g;
        }
        d_hidden.fill(T::zero());
        linear_backward(params.get(lay.vis_w2), &hidden, dy, &mut d_hidden, &mut grads[lay.vis_w2.range()]);
        for (dh, &a) in d_hidden.iter_mut().zip(cache.pre.row(r)) {
            *dh *= gelu_grad(a);
        }
        for (gb, &g) in grads[lay.vis_b1.range()].iter_mut().zip(&d_hidden) {
            *gb += g;
        }
        linear_backward(
            params.get(lay.vis_w1),
            cache.input.row(r),
            &d_hidden,
            d_in.row_mut(r),
            &mut grads[lay.vis_w1.range()],
        );
    }
    d_in
}

/// Which visual source fills the condition channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualSource {
    /// Projected video frames (and the learned padding slot).
    Video,
    /// The learned unconditional vector on every row.
    Unconditional,
}

/// The assembled input sequence and what is needed to differentiate it.
pub struct SequenceInput<T> {
    pub rows: Matrix<T>,
    pub audio_offset: usize,
    pub source: VisualSource,
    visual: Option<(Matrix<T>, VisualCache<T>)>,
}

/// Builds the transformer input for one clip under the model's conditioning
/// mode.
pub fn assemble<T: Real>(
    params: &Params<T>,
    delayed: &DelayedGrid,
    video: &Matrix<T>,
    alignment: &AlignmentMap,
    source: VisualSource,
) -> Result<SequenceInput<T>> {
    let cfg = &params.cfg;
    let audio = embed_audio(delayed, params)?;
    let visual = match source {
        VisualSource::Video => Some(project_visual(video, params)?),
        VisualSource::Unconditional => None,
    };
    let u_cond = params.get(params.layout.u_cond);
    let v_pad = params.get(params.layout.v_pad);
    match cfg.conditioning {
        Conditioning::Fusion => {
            if alignment.len != delayed.len {
                return Err(Error::invalid("alignment length does not match the grid"));
            }
            let mut vis_rows = Matrix::zeros(delayed.len, cfg.d_v);
            for p in 0..delayed.len {
                let src = match (&visual, alignment.frame_of[p]) {
                    (None, _) => u_cond,
                    (Some(_), None) => v_pad,
                    (Some((proj, _)), Some(f)) => proj.row(f),
                };
                vis_rows.row_mut(p).copy_from_slice(src);
            }
            Ok(SequenceInput {
                rows: sequencer::fuse(&audio, &vis_rows)?,
                audio_offset: 0,
                source,
                visual,
            })
        }
        Conditioning::Prepend => {
            let vis_rows = match &visual {
                Some((proj, _)) => proj.clone(),
                None => {
                    let mut m = Matrix::zeros(video.rows, cfg.d_v);
                    for r in 0..video.rows {
                        m.row_mut(r).copy_from_slice(u_cond);
                    }
                    m
                }
            };
            Ok(SequenceInput {
                rows: sequencer::prepend_condition(&audio, &vis_rows),
                audio_offset: video.rows,
                source,
                visual,
            })
        }
    }
}

/// Pushes the input gradient back into the embedding tables, the visual
/// projection and the learned condition vectors.
pub fn assemble_backward<T: Real>(
    params: &Params<T>,
    input: &SequenceInput<T>,
    delayed: &DelayedGrid,
    alignment: &AlignmentMap,
    d_rows: &Matrix<T>,
    grads: &mut [T],
) {
    let cfg = &params.cfg;
    let lay = &params.layout;
    let d_a = cfg.d_a;
    let off = input.audio_offset;
    let mut d_audio = Matrix::zeros(delayed.len, d_a);
    for j in 0..delayed.len {
        d_audio.row_mut(j).copy_from_slice(&d_rows.row(off + j)[..d_a]);
    }
    embed_audio_backward(delayed, params, &d_audio, grads);

    let n_frames = match &input.visual {
        Some((proj, _)) => proj.rows,
        None => off,
    };
    let mut d_vis = Matrix::zeros(n_frames, cfg.d_v);
    let add = |grads: &mut [T], span: super::params::Span, g: &[T]| {
        for (gi, &v) in grads[span.range()].iter_mut().zip(g) {
            *gi += v;
        }
    };
    match cfg.conditioning {
        Conditioning::Fusion => {
            for p in 0..delayed.len {
                let g = &d_rows.row(p)[d_a..];
                match (input.source, alignment.frame_of[p]) {
                    (VisualSource::Unconditional, _) => add(grads, lay.u_cond, g),
                    (VisualSource::Video, None) => add(grads, lay.v_pad, g),
                    (VisualSource::Video, Some(f)) => {
                        for (dv, &gv) in d_vis.row_mut(f).iter_mut().zip(g) {
                            *dv += gv;
                        }
                    }
                }
            }
        }
        Conditioning::Prepend => {
            for r in 0..off {
                let g = &d_rows.row(r)[d_a..];
                match input.source {
                    VisualSource::Unconditional => add(grads, lay.u_cond, g),
                    VisualSource::Video => d_vis.row_mut(r).copy_from_slice(g),
                }
            }
        }
    }
    if let Some((_, cache)) = &input.visual {
        project_visual_backward(params, cache, &d_vis, grads);
    }
}
