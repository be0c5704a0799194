//! Residual vector quantization codec.
//!
//! The analysis stage cuts the waveform into Hann-windowed frames at 50%
//! overlap. Each frame is quantized greedily through `N_q` codebooks, every
//! level coding the residual left by the previous ones. Synthesis sums the
//! selected codebook vectors per frame and overlap-adds them; the periodic
//! Hann window at half-frame hop sums to exactly one, so no window
//! compensation beyond the explicit unit normalization is needed.

pub mod io;
pub mod kmeans;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::world::Waveform;
use kmeans::{nearest, sq_dist, KMeans};

/// Overlap-add normalization of a periodic Hann window at 50% overlap.
pub const COLA_GAIN: f32 = 1.0;

/// Periodic Hann window.
pub fn hann(frame_len: usize) -> Vec<f32> {
    (0..frame_len)
        .map(|n| {
            let x = 2.0 * std::f64::consts::PI * n as f64 / frame_len as f64;
            (0.5 - 0.5 * x.cos()) as f32
        })
        .collect()
}

/// Number of frames for a waveform of `len` samples.
pub fn frame_count(len: usize, frame_len: usize, hop: usize) -> usize {
    if len < frame_len {
        0
    } else {
        (len - frame_len) / hop + 1
    }
}

/// Windowed analysis frames, row-major `t_a x frame_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub rows: Vec<f32>,
    pub t_a: usize,
    pub frame_len: usize,
}

impl FrameFeatures {
    pub fn row(&self, j: usize) -> &[f32] {
        &self.rows[j * self.frame_len..(j + 1) * self.frame_len]
    }
}

pub fn analyze(wave: &Waveform, frame_len: usize, hop: usize) -> Result<FrameFeatures> {
    if frame_len == 0 || hop == 0 {
        return Err(Error::invalid("frame length and hop must be positive"));
    }
    if wave.samples.len() < frame_len {
        return Err(Error::invalid(format!(
            "waveform of {} samples is shorter than one frame ({frame_len})",
            wave.samples.len()
        )));
    }
    let window = hann(frame_len);
    let t_a = frame_count(wave.samples.len(), frame_len, hop);
    let mut rows = Vec::with_capacity(t_a * frame_len);
    for j in 0..t_a {
        let seg = &wave.samples[j * hop..j * hop + frame_len];
        rows.extend(seg.iter().zip(&window).map(|(s, w)| s * w));
    }
    Ok(FrameFeatures { rows, t_a, frame_len })
}

/// Audio tokens, row-major `t_a x n_q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub tokens: Vec<u16>,
    pub t_a: usize,
    pub n_q: usize,
    pub k: usize,
}

impl TokenGrid {
    pub fn new(tokens: Vec<u16>, t_a: usize, n_q: usize, k: usize) -> Result<Self> {
        if tokens.len() != t_a * n_q {
            return Err(Error::invalid("token count does not match t_a x n_q"));
        }
        let grid = TokenGrid { tokens, t_a, n_q, k };
        grid.validate()?;
        Ok(grid)
    }

    pub fn get(&self, j: usize, level: usize) -> u16 {
        self.tokens[j * self.n_q + level]
    }

    pub fn validate(&self) -> Result<()> {
        for (idx, &t) in self.tokens.iter().enumerate() {
            if t as usize >= self.k {
                return Err(Error::InvalidToken {
                    token: t as u32,
                    level: idx % self.n_q.max(1),
                    k: self.k,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvqCodebooks {
    pub n_q: usize,
    pub k: usize,
    pub frame_len: usize,
    pub hop: usize,
    /// One `k x frame_len` table per level.
    pub codebooks: Vec<Vec<f32>>,
}

impl RvqCodebooks {
    pub fn validate(&self) -> Result<()> {
        if self.n_q == 0 || self.k < 2 {
            return Err(Error::invalid("codebooks need n_q >= 1 and k >= 2"));
        }
        if self.frame_len == 0 || self.hop * 2 != self.frame_len {
            return Err(Error::invalid("hop must be half the frame length"));
        }
        if self.codebooks.len() != self.n_q
            || self.codebooks.iter().any(|c| c.len() != self.k * self.frame_len)
        {
            return Err(Error::invalid("codebook tables have the wrong shape"));
        }
        if self.codebooks.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("non-finite codebook entry".into()));
        }
        Ok(())
    }

    pub fn entry(&self, level: usize, token: usize) -> &[f32] {
        &self.codebooks[level][token * self.frame_len..(token + 1) * self.frame_len]
    }

    /// The first `n_q` levels, which is exactly what a fit with fewer levels
    /// would have produced.
    pub fn truncated(&self, n_q: usize) -> RvqCodebooks {
        let n_q = n_q.clamp(1, self.n_q);
        RvqCodebooks {
            n_q,
            k: self.k,
            frame_len: self.frame_len,
            hop: self.hop,
            codebooks: self.codebooks[..n_q].to_vec(),
        }
    }

    /// Number of token frames produced for `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        frame_count(len, self.frame_len, self.hop)
    }
}

/// Settings for [`fit_rvq_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub n_q: usize,
    pub k: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub iters: usize,
    pub seed: u64,
    /// Rows drawn (without replacement) from the corpus for fitting.
    pub max_rows: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            n_q: 4,
            k: 256,
            frame_len: 64,
            hop: 32,
            iters: 12,
            seed: 0,
            max_rows: 65536,
        }
    }
}

/// Fits the per-level codebooks on every row of the corpus.
pub fn fit_rvq(
    corpus: &[FrameFeatures],
    n_q: usize,
    k: usize,
    seed: u64,
    iters: usize,
) -> Result<RvqCodebooks> {
    let frame_len = corpus.first().map(|f| f.frame_len).unwrap_or(0);
    fit_rvq_with(
        corpus,
        &CodecConfig {
            n_q,
            k,
            frame_len,
            hop: frame_len / 2,
            iters,
            seed,
            max_rows: usize::MAX,
        },
    )
}

/// Level 1 is k-means on raw frames, level `i` is k-means on the residual
/// after levels `1..i`. Levels after the first keep entry 0 at the zero
/// vector, which makes each extra level unable to increase the residual.
pub fn fit_rvq_with(corpus: &[FrameFeatures], cfg: &CodecConfig) -> Result<RvqCodebooks> {
    if cfg.n_q == 0 || cfg.k < 2 {
        return Err(Error::invalid("need n_q >= 1 and k >= 2"));
    }
    if cfg.frame_len == 0 || cfg.hop * 2 != cfg.frame_len {
        return Err(Error::invalid("hop must be half the frame length"));
    }
    if corpus.iter().any(|f| f.frame_len != cfg.frame_len) {
        return Err(Error::invalid("corpus frame length does not match the config"));
    }
    let dim = cfg.frame_len;
    let total: usize = corpus.iter().map(|f| f.t_a).sum();
    if total < cfg.k {
        return Err(Error::invalid(format!(
            "corpus has {total} rows but k = {}",
            cfg.k
        )));
    }
    let mut data: Vec<f32> = Vec::with_capacity(total.min(cfg.max_rows) * dim);
    if total <= cfg.max_rows {
        for f in corpus {
            data.extend_from_slice(&f.rows);
        }
    } else {
        let mut rng = stream_rng(cfg.seed, 11);
        let mut picks = sample_indices(&mut rng, total, cfg.max_rows).into_vec();
        picks.sort_unstable();
        let mut offsets = Vec::with_capacity(corpus.len());
        let mut acc = 0;
        for f in corpus {
            offsets.push(acc);
            acc += f.t_a;
        }
        for p in picks {
            let c = offsets.partition_point(|&o| o <= p) - 1;
            data.extend_from_slice(corpus[c].row(p - offsets[c]));
        }
    }

    let mut codebooks = Vec::with_capacity(cfg.n_q);
    for level in 0..cfg.n_q {
        let table = KMeans {
            k: cfg.k,
            dim,
            iters: cfg.iters,
            seed: crate::rng::derive_seed(cfg.seed, level as u64),
            pin_zero: level > 0,
        }
        .fit(&data);
        for row in data.chunks_exact_mut(dim) {
            let (idx, _) = nearest(row, &table, dim);
            for (r, c) in row.iter_mut().zip(&table[idx * dim..(idx + 1) * dim]) {
                *r -= c;
            }
        }
        codebooks.push(table);
    }
    let books = RvqCodebooks {
        n_q: cfg.n_q,
        k: cfg.k,
        frame_len: cfg.frame_len,
        hop: cfg.hop,
        codebooks,
    };
    books.validate()?;
    Ok(books)
}

/// Quantizes analysis frames. `trace`, when given, receives the squared
/// residual norm of every frame after every level (`t_a x n_q`).
pub fn encode_frames(
    frames: &FrameFeatures,
    books: &RvqCodebooks,
    mut trace: Option<&mut Vec<f32>>,
) -> Result<TokenGrid> {
    if frames.frame_len != books.frame_len {
        return Err(Error::invalid("frame length does not match codebooks"));
    }
    let dim = books.frame_len;
    let mut tokens = Vec::with_capacity(frames.t_a * books.n_q);
    let mut residual = vec![0.0f32; dim];
    let zero = vec![0.0f32; dim];
    if let Some(t) = trace.as_deref_mut() {
        t.clear();
    }
    for j in 0..frames.t_a {
        residual.copy_from_slice(frames.row(j));
        for level in 0..books.n_q {
            let (idx, _) = nearest(&residual, &books.codebooks[level], dim);
            for (r, c) in residual.iter_mut().zip(books.entry(level, idx)) {
                *r -= c;
            }
            tokens.push(idx as u16);
            if let Some(t) = trace.as_deref_mut() {
                t.push(sq_dist(&residual, &zero));
            }
        }
    }
    Ok(TokenGrid {
        tokens,
        t_a: frames.t_a,
        n_q: books.n_q,
        k: books.k,
    })
}

pub fn encode(wave: &Waveform, books: &RvqCodebooks) -> Result<TokenGrid> {
    let frames = analyze(wave, books.frame_len, books.hop)?;
    encode_frames(&frames, books, None)
}

/// Overlap-add synthesis of `(t_a - 1) * hop + frame_len` samples.
pub fn decode(grid: &TokenGrid, books: &RvqCodebooks, sample_rate: u32) -> Result<Waveform> {
    if grid.n_q > books.n_q || grid.k != books.k {
        return Err(Error::invalid(format!(
            "grid (n_q={}, k={}) incompatible with codebooks (n_q={}, k={})",
            grid.n_q, grid.k, books.n_q, books.k
        )));
    }
    grid.validate()?;
    let dim = books.frame_len;
    if grid.t_a == 0 {
        return Ok(Waveform::silent(0, sample_rate));
    }
    let len = (grid.t_a - 1) * books.hop + dim;
    let mut out = vec![0.0f32; len];
    let mut frame = vec![0.0f32; dim];
    for j in 0..grid.t_a {
        frame.fill(0.0);
        for level in 0..grid.n_q {
            let entry = books.entry(level, grid.get(j, level) as usize);
            for (f, e) in frame.iter_mut().zip(entry) {
                *f += e;
            }
        }
        for (o, f) in out[j * books.hop..j * books.hop + dim].iter_mut().zip(&frame) {
            *o += f;
        }
    }
    for s in &mut out {
        *s = (*s / COLA_GAIN).clamp(-1.0, 1.0);
    }
    Ok(Waveform {
        samples: out,
        sample_rate,
    })
}

/// Signal-to-error ratio in dB over the common prefix. Identical signals give
/// `+inf`.
pub fn snr_db(reference: &[f32], estimate: &[f32]) -> Result<f64> {
    let n = reference.len().min(estimate.len());
    let signal: f64 = reference[..n].iter().map(|&s| (s as f64).powi(2)).sum();
    if signal == 0.0 {
        return Err(Error::UndefinedSnr);
    }
    let error: f64 = reference[..n]
        .iter()
        .zip(&estimate[..n])
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    if error == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / error).log10())
}

pub fn roundtrip_snr(wave: &Waveform, books: &RvqCodebooks) -> Result<f64> {
    if wave.samples.iter().all(|&s| s == 0.0) {
        return Err(Error::UndefinedSnr);
    }
    let grid = encode(wave, books)?;
    let back = decode(&grid, books, wave.sample_rate)?;
    snr_db(&wave.samples, &back.samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(samples: Vec<f32>) -> Waveform {
        Waveform {
            samples,
            sample_rate: 8000,
        }
    }

    /// Codebook whose entries are windowed constants at well separated levels.
    fn level_books(levels: &[f32]) -> RvqCodebooks {
        let w = hann(64);
        RvqCodebooks {
            n_q: 1,
            k: levels.len(),
            frame_len: 64,
            hop: 32,
            codebooks: vec![levels.iter().flat_map(|&v| w.iter().map(move |x| v * x)).collect()],
        }
    }

    #[test]
    fn analysis_frame_arithmetic() {
        let f = analyze(&wave(vec![0.0; 8096]), 64, 32).unwrap();
        assert_eq!(f.t_a, 252);
        assert!(f.rows.iter().all(|&v| v == 0.0));
        let ones = analyze(&wave(vec![1.0; 200]), 64, 32).unwrap();
        let w = hann(64);
        for j in 0..ones.t_a {
            assert_eq!(ones.row(j), &w[..]);
        }
        assert!(matches!(analyze(&wave(vec![0.0; 10]), 64, 32), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn hann_is_cola_at_half_hop() {
        let w = hann(64);
        for n in 0..32 {
            assert!((w[n] + w[n + 32] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn construct_then_encode_recovers_tokens() {
        let books = level_books(&[-0.75, -0.25, 0.25, 0.75]);
        let mut tokens = Vec::new();
        let mut t = 0u16;
        for j in 0..60 {
            if j % 3 == 0 {
                t = ((j / 3) * 7 % 4) as u16;
            }
            tokens.push(t);
        }
        let grid = TokenGrid::new(tokens, 60, 1, 4).unwrap();
        let w = decode(&grid, &books, 8000).unwrap();
        assert_eq!(encode(&w, &books).unwrap(), grid);
    }

    #[test]
    fn zero_token_decodes_to_silence() {
        let books = level_books(&[0.5, 0.0, -0.5]);
        let silent = encode(&wave(vec![0.0; 640]), &books).unwrap();
        assert!(silent.tokens.iter().all(|&t| t == 1));
        let w = decode(&silent, &books, 8000).unwrap();
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn decode_rejects_out_of_range_tokens() {
        let books = level_books(&[0.5, 0.0]);
        let grid = TokenGrid {
            tokens: vec![0, 2],
            t_a: 2,
            n_q: 1,
            k: 2,
        };
        assert!(matches!(decode(&grid, &books, 8000), Err(Error::InvalidToken { .. })));
    }

    #[test]
    fn snr_definitions() {
        let a = [1.0f32, -1.0, 0.5];
        assert_eq!(snr_db(&a, &a).unwrap(), f64::INFINITY);
        assert!(snr_db(&a, &[0.0; 3]).unwrap().abs() < 1e-12);
        assert!(matches!(snr_db(&[0.0; 3], &a), Err(Error::UndefinedSnr)));
    }

    #[test]
    fn exact_corpus_is_a_fixed_point() {
        let k = 8;
        let rows: Vec<f32> = (0..k * 64).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        let frames = FrameFeatures {
            rows: rows.clone(),
            t_a: k,
            frame_len: 64,
        };
        let books = fit_rvq(&[frames.clone()], 1, k, 4, 10).unwrap();
        let mut trace = Vec::new();
        encode_frames(&frames, &books, Some(&mut trace)).unwrap();
        assert!(trace.iter().all(|&e| e == 0.0));
        assert!(matches!(fit_rvq(&[frames], 1, k + 1, 4, 10), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn nine_levels_are_accepted() {
        let rows: Vec<f32> = (0..40 * 64).map(|i| ((i as f32) * 0.37).sin()).collect();
        let frames = FrameFeatures { rows, t_a: 40, frame_len: 64 };
        let books = fit_rvq(&[frames], 9, 4, 1, 3).unwrap();
        assert_eq!(books.codebooks.len(), 9);
    }
}
