//! Causal decoder-only transformer: pre-norm blocks with RMS normalization,
//! rotary query/key rotation and a SiLU-gated feed-forward, followed by one
//! classification head per residual level.
//!
//! [`forward_train`] keeps every intermediate for [`backward`]; [`Decoder`]
//! consumes one row at a time with a key/value cache. Both go through the
//! row kernels in [`super::ops`], so their logits agree bit for bit.

use super::ops::*;
use super::params::Params;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;

/// Logits for `positions` rows, each `n_q x vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub data: Vec<T>,
    pub positions: usize,
    pub n_q: usize,
    pub vocab: usize,
}

impl<T: Real> Logits<T> {
    #[inline]
    pub fn cell(&self, pos: usize, level: usize) -> &[T] {
        let o = (pos * self.n_q + level) * self.vocab;
        &self.data[o..o + self.vocab]
    }

    #[inline]
    pub fn cell_mut(&mut self, pos: usize, level: usize) -> &mut [T] {
        let o = (pos * self.n_q + level) * self.vocab;
        &mut self.data[o..o + self.vocab]
    }

    /// Order-dependent digest for regression checks.
    pub fn checksum(&self) -> f64 {
        self.data
            .iter()
            .enumerate()
            .map(|(i, v)| v.as_f64() * (1.0 + (i % 97) as f64 / 97.0))
            .sum()
    }
}

struct LayerCache<T> {
    x_in: Matrix<T>,
    inv1: Vec<T>,
    h1: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Per row `p`: `n_head x (p + 1)` weights, rows packed back to back.
    probs: Vec<T>,
    att: Matrix<T>,
    x_mid: Matrix<T>,
    inv2: Vec<T>,
    h2: Matrix<T>,
    gate: Matrix<T>,
    up: Matrix<T>,
    act: Matrix<T>,
}

/// Intermediates of one training forward pass.
pub struct ForwardCache<T> {
    n: usize,
    audio_offset: usize,
    layers: Vec<LayerCache<T>>,
    x_final: Matrix<T>,
    inv_f: Vec<T>,
    hf: Matrix<T>,
}

#[inline]
fn probs_offset(p: usize, n_head: usize) -> usize {
    n_head * p * (p + 1) / 2
}

fn head_logits<T: Real>(params: &Params<T>, hf: &[T], out: &mut [T]) {
    let v = params.cfg.vocab();
    for i in 0..params.cfg.n_q {
        linear_bias(
            params.get(params.layout.head_w[i]),
            params.get(params.layout.head_b[i]),
            hf,
            &mut out[i * v..(i + 1) * v],
        );
    }
}

fn check_finite<T: Real>(values: &[T], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow(format!("non-finite {what}")));
    }
    Ok(())
}

/// Full forward pass over `x0` (`n x d`). Logits are produced for rows
/// `audio_offset..n`.
pub fn forward_train<T: Real>(
    params: &Params<T>,
    x0: &Matrix<T>,
    audio_offset: usize,
) -> Result<(Logits<T>, ForwardCache<T>)> {
    let cfg = &params.cfg;
    let d = cfg.d();
    let f = cfg.ffn();
    let n = x0.rows;
    if x0.cols != d {
        return Err(Error::invalid(format!("input width {} != model width {d}", x0.cols)));
    }
    if n == 0 || audio_offset >= n {
        return Err(Error::invalid("sequence must contain at least one audio row"));
    }
    check_finite(&x0.data, "input")?;
    let hd = cfg.head_dim();
    let eps = T::from_f64(cfg.norm_eps);
    let angles: Vec<Vec<(T, T)>> = (0..n).map(|p| rope_angles(p, hd, cfg.rope_base)).collect();

    let mut x = x0.clone();
    let mut layers = Vec::with_capacity(cfg.n_layer);
    for blk in &params.layout.blocks {
        let x_in = x.clone();
        let mut inv1 = vec![T::zero(); n];
        let mut h1 = Matrix::zeros(n, d);
        let mut q = Matrix::zeros(n, d);
        let mut k = Matrix::zeros(n, d);
        let mut v = Matrix::zeros(n, d);
        for p in 0..n {
            inv1[p] = rmsnorm(x_in.row(p), params.get(blk.attn_norm), eps, h1.row_mut(p));
            linear(params.get(blk.wq), h1.row(p), q.row_mut(p));
            linear(params.get(blk.wk), h1.row(p), k.row_mut(p));
            linear(params.get(blk.wv), h1.row(p), v.row_mut(p));
            rope_apply(q.row_mut(p), &angles[p], hd);
            rope_apply(k.row_mut(p), &angles[p], hd);
        }
        let mut probs = vec![T::zero(); probs_offset(n, cfg.n_head)];
        let mut att = Matrix::zeros(n, d);
        let mut x_mid = x_in.clone();
        let mut proj = vec![T::zero(); d];
        for p in 0..n {
            let o = probs_offset(p, cfg.n_head);
            let len = cfg.n_head * (p + 1);
            attend_row(
                q.row(p),
                &k.data[..(p + 1) * d],
                &v.data[..(p + 1) * d],
                p,
                cfg.n_head,
                &mut probs[o..o + len],
                att.row_mut(p),
            );
            linear(params.get(blk.wo), att.row(p), &mut proj);
            for (xm, pr) in x_mid.row_mut(p).iter_mut().zip(&proj) {
                *xm += *pr;
            }
        }
        let mut inv2 = vec![T::zero(); n];
        let mut h2 = Matrix::zeros(n, d);
        let mut gate = Matrix::zeros(n, f);
        let mut up = Matrix::zeros(n, f);
        let mut act = Matrix::zeros(n, f);
        x = x_mid.clone();
        for p in 0..n {
            inv2[p] = rmsnorm(x_mid.row(p), params.get(blk.ffn_norm), eps, h2.row_mut(p));
            linear(params.get(blk.w_gate), h2.row(p), gate.row_mut(p));
            linear(params.get(blk.w_up), h2.row(p), up.row_mut(p));
            for ((a, &g), &u) in act.row_mut(p).iter_mut().zip(gate.row(p)).zip(up.row(p)) {
                *a = silu(g) * u;
            }
            linear(params.get(blk.w_down), act.row(p), &mut proj);
            for (xo, pr) in x.row_mut(p).iter_mut().zip(&proj) {
                *xo += *pr;
            }
        }
        layers.push(LayerCache {
            x_in,
            inv1,
            h1,
            q,
            k,
            v,
            probs,
            att,
            x_mid,
            inv2,
            h2,
            gate,
            up,
            act,
        });
    }

    let positions = n - audio_offset;
    let vocab = cfg.vocab();
    let mut inv_f = vec![T::zero(); n];
    let mut hf = Matrix::zeros(n, d);
    let mut logits = Logits {
        data: vec![T::zero(); positions * cfg.n_q * vocab],
        positions,
        n_q: cfg.n_q,
        vocab,
    };
    let row_len = cfg.n_q * vocab;
    for p in audio_offset..n {
        inv_f[p] = rmsnorm(x.row(p), params.get(params.layout.final_norm), eps, hf.row_mut(p));
        let r = p - audio_offset;
        head_logits(params, hf.row(p), &mut logits.data[r * row_len..(r + 1) * row_len]);
    }
    check_finite(&logits.data, "logits")?;
    Ok((
        logits,
        ForwardCache {
            n,
            audio_offset,
            layers,
            x_final: x,
            inv_f,
            hf,
        },
    ))
}

/// Back-propagates `dlogits` (same layout as the logits). Parameter
/// gradients are accumulated into `grads`; the input gradient is returned.
pub fn backward<T: Real>(
    params: &Params<T>,
    cache: &ForwardCache<T>,
    dlogits: &[T],
    grads: &mut [T],
) -> Matrix<T> {
    let cfg = &params.cfg;
    let lay = &params.layout;
    let d = cfg.d();
    let f = cfg.ffn();
    let n = cache.n;
    let hd = cfg.head_dim();
    let vocab = cfg.vocab();
    let row_len = cfg.n_q * vocab;
    let angles: Vec<Vec<(T, T)>> = (0..n).map(|p| rope_angles(p, hd, cfg.rope_base)).collect();

    // Heads and final norm.
    let mut dx = Matrix::zeros(n, d);
    let mut dhf = vec![T::zero(); d];
    for p in cache.audio_offset..n {
        let r = p - cache.audio_offset;
        dhf.fill(T::zero());
        for i in 0..cfg.n_q {
            let dy = &dlogits[r * row_len + i * vocab..r * row_len + (i + 1) * vocab];
            for (gb, &g) in grads[lay.head_b[i].range()].iter_mut().zip(dy) {
                *gb += g;
            }
            linear_backward(
                params.get(lay.head_w[i]),
                cache.hf.row(p),
                dy,
                &mut dhf,
                &mut grads[lay.head_w[i].range()],
            );
        }
        rmsnorm_backward(
            &dhf,
            cache.x_final.row(p),
            params.get(lay.final_norm),
            cache.inv_f[p],
            dx.row_mut(p),
            &mut grads[lay.final_norm.range()],
        );
    }

    let mut d_act = vec![T::zero(); f];
    let mut d_gate = vec![T::zero(); f];
    let mut d_up = vec![T::zero(); f];
    let mut dh = vec![T::zero(); d];
    for (blk, lc) in lay.blocks.iter().zip(&cache.layers).rev() {
        // Feed-forward: x_out = x_mid + W_down (silu(gate) * up)
        let mut dx_mid = dx.clone();
        for p in 0..n {
            let g_out = dx.row(p);
            d_act.fill(T::zero());
            linear_backward(
                params.get(blk.w_down),
                lc.act.row(p),
                g_out,
                &mut d_act,
                &mut grads[blk.w_down.range()],
            );
            for j in 0..f {
                let g = lc.gate.row(p)[j];
                d_up[j] = d_act[j] * silu(g);
                d_gate[j] = d_act[j] * lc.up.row(p)[j] * silu_grad(g);
            }
            dh.fill(T::zero());
            linear_backward(params.get(blk.w_gate), lc.h2.row(p), &d_gate, &mut dh, &mut grads[blk.w_gate.range()]);
            linear_backward(params.get(blk.w_up), lc.h2.row(p), &d_up, &mut dh, &mut grads[blk.w_up.range()]);
            rmsnorm_backward(
                &dh,
                lc.x_mid.row(p),
                params.get(blk.ffn_norm),
                lc.inv2[p],
                dx_mid.row_mut(p),
                &mut grads[blk.ffn_norm.range()],
            );
        }

        // Attention: x_mid = x_in + W_o att
        let mut d_att = Matrix::zeros(n, d);
        for p in 0..n {
            linear_backward(
                params.get(blk.wo),
                lc.att.row(p),
                dx_mid.row(p),
                d_att.row_mut(p),
                &mut grads[blk.wo.range()],
            );
        }
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        let mut dp = vec![T::zero(); n];
        for p in 0..n {
            let span = p + 1;
            let base = probs_offset(p, cfg.n_head);
            for h in 0..cfg.n_head {
                let pr = &lc.probs[base + h * span..base + (h + 1) * span];
                let dout = &d_att.row(p)[h * hd..(h + 1) * hd];
                let mut weighted = T::zero();
                for t in 0..span {
                    let vt = &lc.v.row(t)[h * hd..(h + 1) * hd];
                    dp[t] = crate::real::dot(dout, vt);
                    weighted += pr[t] * dp[t];
                    crate::real::axpy(pr[t], dout, &mut dv.row_mut(t)[h * hd..(h + 1) * hd]);
                }
                for t in 0..span {
                    let ds = pr[t] * (dp[t] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kt = &lc.k.row(t)[h * hd..(h + 1) * hd];
                    crate::real::axpy(ds, kt, &mut dq.row_mut(p)[h * hd..(h + 1) * hd]);
                    let qp = &lc.q.row(p)[h * hd..(h + 1) * hd];
                    crate::real::axpy(ds, qp, &mut dk.row_mut(t)[h * hd..(h + 1) * hd]);
                }
            }
        }
        let mut dx_in = dx_mid.clone();
        for p in 0..n {
            rope_apply_transpose(dq.row_mut(p), &angles[p], hd);
            rope_apply_transpose(dk.row_mut(p), &angles[p], hd);
            dh.fill(T::zero());
            let h1 = lc.h1.row(p);
            linear_backward(params.get(blk.wq), h1, dq.row(p), &mut dh, &mut grads[blk.wq.range()]);
            linear_backward(params.get(blk.wk), h1, dk.row(p), &mut dh, &mut grads[blk.wk.range()]);
            linear_backward(params.get(blk.wv), h1, dv.row(p), &mut dh, &mut grads[blk.wv.range()]);
            rmsnorm_backward(
                &dh,
                lc.x_in.row(p),
                params.get(blk.attn_norm),
                lc.inv1[p],
                dx_in.row_mut(p),
                &mut grads[blk.attn_norm.range()],
            );
        }
        dx = dx_in;
    }
    dx
}

/// Inference-only forward over a whole sequence, computed row by row.
pub fn forward<T: Real>(params: &Params<T>, x0: &Matrix<T>, audio_offset: usize) -> Result<Logits<T>> {
    if x0.rows == 0 || audio_offset >= x0.rows {
        return Err(Error::invalid("sequence must contain at least one audio row"));
    }
    let mut dec = Decoder::new(params, x0.rows);
    let vocab = params.cfg.vocab();
    let mut data = Vec::with_capacity((x0.rows - audio_offset) * params.cfg.n_q * vocab);
    for p in 0..x0.rows {
        let row = dec.step(x0.row(p), p >= audio_offset)?;
        if let Some(l) = row {
            data.extend_from_slice(l);
        }
    }
    Ok(Logits {
        data,
        positions: x0.rows - audio_offset,
        n_q: params.cfg.n_q,
        vocab,
    })
}

/// Incremental decoder with a key/value cache.
pub struct Decoder<'a, T> {
    params: &'a Params<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    pos: usize,
    x: Vec<T>,
    h: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    att: Vec<T>,
    proj: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    probs: Vec<T>,
    logits: Vec<T>,
}

impl<'a, T: Real> Decoder<'a, T> {
    pub fn new(params: &'a Params<T>, capacity: usize) -> Self {
        let cfg = &params.cfg;
        let d = cfg.d();
        let f = cfg.ffn();
        Decoder {
            params,
            keys: (0..cfg.n_layer).map(|_| Vec::with_capacity(capacity * d)).collect(),
            values: (0..cfg.n_layer).map(|_| Vec::with_capacity(capacity * d)).collect(),
            pos: 0,
            x: vec![T::zero(); d],
            h: vec![T::zero(); d],
            q: vec![T::zero(); d],
            k: vec![T::zero(); d],
            v: vec![T::zero(); d],
            att: vec![T::zero(); d],
            proj: vec![T::zero(); d],
            gate: vec![T::zero(); f],
            up: vec![T::zero(); f],
            probs: Vec::with_capacity(capacity * cfg.n_head),
            logits: vec![T::zero(); cfg.n_q * cfg.vocab()],
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds the next input row. Returns its `n_q x vocab` logits when
    /// `want_logits` is set.
    pub fn step(&mut self, row: &[T], want_logits: bool) -> Result<Option<&[T]>> {
        let params = self.params;
        let cfg = &params.cfg;
        let d = cfg.d();
        if row.len() != d {
            return Err(Error::invalid(format!("input width {} != model width {d}", row.len())));
        }
        check_finite(row, "input")?;
        let hd = cfg.head_dim();
        let eps = T::from_f64(cfg.norm_eps);
        let p = self.pos;
        let angles = rope_angles(p, hd, cfg.rope_base);
        self.x.copy_from_slice(row);
        for (l, blk) in params.layout.blocks.iter().enumerate() {
            rmsnorm(&self.x, params.get(blk.attn_norm), eps, &mut self.h);
            linear(params.get(blk.wq), &self.h, &mut self.q);
            linear(params.get(blk.wk), &self.h, &mut self.k);
            linear(params.get(blk.wv), &self.h, &mut self.v);
            rope_apply(&mut self.q, &angles, hd);
            rope_apply(&mut self.k, &angles, hd);
            self.keys[l].extend_from_slice(&self.k);
            self.values[l].extend_from_slice(&self.v);
            self.probs.resize(cfg.n_head * (p + 1), T::zero());
            attend_row(&self.q, &self.keys[l], &self.values[l], p, cfg.n_head, &mut self.probs, &mut self.att);
            linear(params.get(blk.wo), &self.att, &mut self.proj);
            for (x, pr) in self.x.iter_mut().zip(&self.proj) {
                *x += *pr;
            }
            rmsnorm(&self.x, params.get(blk.ffn_norm), eps, &mut self.h);
            linear(params.get(blk.w_gate), &self.h, &mut self.gate);
            linear(params.get(blk.w_up), &self.h, &mut self.up);
            for (g, &u) in self.gate.iter_mut().zip(&self.up) {
                *g = silu(*g) * u;
            }
            linear(params.get(blk.w_down), &self.gate, &mut self.proj);
            for (x, pr) in self.x.iter_mut().zip(&self.proj) {
                *x += *pr;
            }
        }
        self.pos += 1;
        if !want_logits {
            return Ok(None);
        }
        rmsnorm(&self.x, params.get(params.layout.final_norm), eps, &mut self.h);
        head_logits(params, &self.h, &mut self.logits);
        check_finite(&self.logits, "logits")?;
        Ok(Some(&self.logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{Conditioning, ModelConfig};
    use crate::rng::stream_rng;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            k: 16,
            n_q: 2,
            d_a: 12,
            d_v: 4,
            d_raw: 4,
            d_vis_hidden: 8,
            n_layer: 2,
            n_head: 2,
            conditioning: Conditioning::Fusion,
            ..ModelConfig::default()
        }
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Matrix<f32> {
        let mut rng = stream_rng(seed, 0);
        Matrix::from_vec((0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect(), n, d)
    }

    #[test]
    fn perturbing_a_row_leaves_earlier_logits_unchanged() {
        let p = Params::init(&cfg(), 0).unwrap();
        let x = random_rows(10, 16, 1);
        let (base, _) = forward_train(&p, &x, 0).unwrap();
        for j in 0..9 {
            let mut y = x.clone();
            for v in y.row_mut(j + 1) {
                *v += 0.75;
            }
            let (pert, _) = forward_train(&p, &y, 0).unwrap();
            for pos in 0..=j {
                for level in 0..2 {
                    assert_eq!(pert.cell(pos, level), base.cell(pos, level));
                }
            }
            assert_ne!(pert.cell(j + 1, 0), base.cell(j + 1, 0));
        }
    }

    #[test]
    fn incremental_decoder_matches_training_forward_bitwise() {
        for offset in [0, 3] {
            let p = Params::init(&cfg(), 2).unwrap();
            let x = random_rows(9, 16, 3);
            let (a, _) = forward_train(&p, &x, offset).unwrap();
            assert_eq!(forward(&p, &x, offset).unwrap(), a);
        }
    }

    #[test]
    fn single_position_is_finite() {
        let p = Params::init(&cfg(), 4).unwrap();
        let (l, _) = forward_train(&p, &random_rows(1, 16, 5), 0).unwrap();
        assert_eq!(l.positions, 1);
        assert!(l.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn checksum_is_reproducible() {
        let p = Params::init(&cfg(), 7).unwrap();
        let x = random_rows(12, 16, 8);
        let c = forward(&p, &x, 0).unwrap().checksum();
        assert_eq!(c, forward(&Params::init(&cfg(), 7).unwrap(), &x, 0).unwrap().checksum());
        assert!((c - GOLDEN_CHECKSUM).abs() < 1e-6 * GOLDEN_CHECKSUM.abs().max(1.0), "{c}");
    }

    // Recorded from the first build of this configuration.
    const GOLDEN_CHECKSUM: f64 = -1.894_402_899_932_999_8;

    #[test]
    fn non_finite_input_is_reported() {
        let p = Params::init(&cfg(), 0).unwrap();
        let mut x = random_rows(3, 16, 0);
        x.row_mut(1)[0] = f32::NAN;
        assert!(matches!(forward_train(&p, &x, 0), Err(Error::NumericOverflow(_))));
        assert!(matches!(forward(&p, &x, 0), Err(Error::NumericOverflow(_))));
    }
}
