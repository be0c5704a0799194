//! Autoregressive generation with classifier-free guidance.
//!
//! Two incremental decoders run side by side: one sees the aligned video
//! rows, the other the learned unconditional vector. Their per-level
//! log-probabilities are blended, renormalized and sampled. With guidance 1
//! the unconditional decoder is never built.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode, frame_count, RvqCodebooks, TokenGrid};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::embed::{embed_audio_row, project_visual};
use crate::model::ops::log_softmax;
use crate::model::{Conditioning, Decoder, Params};
use crate::real::Real;
use crate::rng::stream_rng;
use crate::sequencer::{build_alignment, remove_delay, AlignmentMap, DelayedGrid};
use crate::world::{VideoFeatureStream, Waveform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub gamma: f64,
    /// 0 selects the most likely token.
    pub temperature: f64,
    /// Keep only this many highest-scoring tokens; 0 keeps all.
    pub top_k: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: u32,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            gamma: 6.0,
            temperature: 1.0,
            top_k: 0,
            seed: 0,
            duration_s: 2.56,
            sample_rate: 8000,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid("temperature must be >= 0 and gamma finite"));
        }
        if self.top_k > k {
            return Err(Error::invalid(format!("top_k {} exceeds k = {k}", self.top_k)));
        }
        if !(self.duration_s > 0.0) || self.sample_rate == 0 {
            return Err(Error::invalid("duration and sample rate must be positive"));
        }
        Ok(())
    }
}

/// `gamma * cond + (1 - gamma) * uncond`, renormalized as log-probabilities.
pub fn cfg_mix(logp_cond: &[f64], logp_uncond: &[f64], gamma: f64) -> Vec<f64> {
    let mut out: Vec<f64> = logp_cond
        .iter()
        .zip(logp_uncond)
        .map(|(&c, &u)| gamma * c + (1.0 - gamma) * u)
        .collect();
    log_softmax(&mut out);
    out
}

/// Draws a token from log-scores. Entries at `-inf` are never chosen.
pub fn sample_token(scores: &[f64], temperature: f64, top_k: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
    if scores.iter().any(|s| s.is_nan() || *s == f64::INFINITY) {
        return Err(Error::NumericOverflow("non-finite sampling scores".into()));
    }
    let argmax = scores
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &s)| match best {
            Some((_, b)) if b >= s => best,
            _ if s == f64::NEG_INFINITY => best,
            _ => Some((i, s)),
        })
        .ok_or_else(|| Error::NumericOverflow("every score is -inf".into()))?
        .0;
    if temperature == 0.0 {
        return Ok(argmax);
    }
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > f64::NEG_INFINITY).collect();
    if top_k > 0 && top_k < order.len() {
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(top_k);
        order.sort_unstable();
    }
    let max = scores[argmax];
    let weights: Vec<f64> = order.iter().map(|&i| ((scores[i] - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(*order.last().expect("at least one finite score"))
}

/// Bookkeeping exposed for tests and audits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationProbe {
    pub conditional_steps: usize,
    pub unconditional_steps: usize,
    /// Per audio position, the latest video frame read before its logits
    /// were produced.
    pub latest_frame: Vec<Option<usize>>,
}

impl GenerationProbe {
    /// Positions whose logits depended on a frame later in time than the
    /// position itself.
    pub fn violations(&self, alignment: &AlignmentMap) -> usize {
        self.latest_frame
            .iter()
            .enumerate()
            .filter(|(p, f)| match f {
                Some(f) => f * alignment.t_a > p * alignment.t_v,
                None => false,
            })
            .count()
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub delayed: DelayedGrid,
    pub tokens: TokenGrid,
    pub waveform: Waveform,
    pub alignment: AlignmentMap,
    pub probe: GenerationProbe,
}

/// Number of token rows for a duration.
pub fn tokens_for_duration(duration_s: f64, sample_rate: u32, books: &RvqCodebooks) -> usize {
    let samples = (duration_s * sample_rate as f64).round() as usize;
    frame_count(samples, books.frame_len, books.hop)
}

/// Projects video frames on first use and remembers the latest one read.
struct LazyFrames<'a, T> {
    params: &'a Params<T>,
    video: &'a VideoFeatureStream,
    rows: Vec<Option<Vec<T>>>,
    latest: Option<usize>,
}

impl<'a, T: Real> LazyFrames<'a, T> {
    fn frame(&mut self, f: usize) -> Result<&[T]> {
        if self.rows[f].is_none() {
            let raw: Vec<T> = self.video.row(f).iter().map(|&v| T::from_f64(v as f64)).collect();
            let (proj, _) = project_visual(&Matrix::from_vec(raw, 1, self.video.d_raw), self.params)?;
            self.rows[f] = Some(proj.data);
        }
        self.latest = Some(self.latest.map_or(f, |l| l.max(f)));
        Ok(self.rows[f].as_deref().expect("projected above"))
    }
}

fn level_logp<T: Real>(logits: &[T], vocab: usize, level: usize) -> Vec<f64> {
    let mut lp: Vec<f64> = logits[level * vocab..(level + 1) * vocab].iter().map(|v| v.as_f64()).collect();
    log_softmax(&mut lp);
    lp
}

pub fn generate<T: Real>(
    params: &Params<T>,
    books: &RvqCodebooks,
    video: &VideoFeatureStream,
    cfg: &SampleConfig,
) -> Result<Generation> {
    let mc = &params.cfg;
    if mc.k != books.k || mc.n_q != books.n_q {
        return Err(Error::invalid(format!(
            "model (k={}, n_q={}) and codebooks (k={}, n_q={}) disagree",
            mc.k, mc.n_q, books.k, books.n_q
        )));
    }
    if video.d_raw != mc.d_raw {
        return Err(Error::invalid(format!(
            "video has {} channels, model expects {}",
            video.d_raw, mc.d_raw
        )));
    }
    cfg.validate(mc.k)?;
    if cfg.duration_s > video.duration_s() + 1e-9 {
        return Err(Error::invalid(format!(
            "requested {} s but the video lasts {} s",
            cfg.duration_s,
            video.duration_s()
        )));
    }
    let t_a = tokens_for_duration(cfg.duration_s, cfg.sample_rate, books);
    let t_v = ((cfg.duration_s * video.fps).round() as usize).clamp(1, video.t_v);
    let alignment = build_alignment(t_v, t_a, mc.n_q)?;
    let n_q = mc.n_q;
    let vocab = mc.vocab();
    let d_a = mc.d_a;
    let len = alignment.len;
    let use_uncond = cfg.gamma != 1.0;
    let capacity = len + if mc.conditioning == Conditioning::Prepend { t_v } else { 0 };

    let mut delayed = DelayedGrid::all_pad(t_a, n_q, mc.k);
    let mut frames = LazyFrames {
        params,
        video,
        rows: vec![None; t_v],
        latest: None,
    };
    let u_cond = params.get(params.layout.u_cond).to_vec();
    let v_pad = params.get(params.layout.v_pad).to_vec();
    let mut cond = Decoder::new(params, capacity);
    let mut uncond = use_uncond.then(|| Decoder::new(params, capacity));
    let mut probe = GenerationProbe::default();
    let mut row = vec![T::zero(); mc.d()];

    if mc.conditioning == Conditioning::Prepend {
        for f in 0..t_v {
            row[..d_a].fill(T::zero());
            row[d_a..].copy_from_slice(frames.frame(f)?);
            cond.step(&row, false)?;
            probe.conditional_steps += 1;
            if let Some(dec) = uncond.as_mut() {
                row[d_a..].copy_from_slice(&u_cond);
                dec.step(&row, false)?;
                probe.unconditional_steps += 1;
            }
        }
    }

    let mut rng = stream_rng(cfg.seed, 31);
    for j in 0..len - 1 {
        embed_audio_row(params, &delayed.cells[j * n_q..(j + 1) * n_q], &mut row[..d_a])?;
        match mc.conditioning {
            Conditioning::Fusion => match alignment.frame_of[j] {
                Some(f) => row[d_a..].copy_from_slice(frames.frame(f)?),
                None => row[d_a..].copy_from_slice(&v_pad),
            },
            Conditioning::Prepend => row[d_a..].fill(T::zero()),
        }
        let cond_logits = cond.step(&row, true)?.expect("logits requested").to_vec();
        probe.conditional_steps += 1;
        probe.latest_frame.push(frames.latest);
        let uncond_logits = match uncond.as_mut() {
            Some(dec) => {
                if mc.conditioning == Conditioning::Fusion {
                    row[d_a..].copy_from_slice(&u_cond);
                }
                probe.unconditional_steps += 1;
                Some(dec.step(&row, true)?.expect("logits requested").to_vec())
            }
            None => None,
        };
        for level in 0..n_q {
            if !delayed.is_token_slot(j + 1, level) {
                continue;
            }
            let lc = level_logp(&cond_logits, vocab, level);
            let mut scores = match &uncond_logits {
                Some(u) => cfg_mix(&lc, &level_logp(u, vocab, level), cfg.gamma),
                None => lc,
            };
            scores[mc.k] = f64::NEG_INFINITY;
            let tok = sample_token(&scores, cfg.temperature, cfg.top_k, &mut rng)?;
            delayed.set(j + 1, level, tok as u16);
        }
    }
    probe.latest_frame.push(frames.latest);
    let tokens = remove_delay(&delayed)?;
    let waveform = decode(&tokens, books, cfg.sample_rate)?;
    Ok(Generation {
        delayed,
        tokens,
        waveform,
        alignment,
        probe,
    })
}

/// Mixed sampling distribution for one position and level, exposed for
/// exactness checks.
pub fn mixed_distribution(cond_logits: &[f64], uncond_logits: &[f64], gamma: f64) -> Vec<f64> {
    let mut lc = cond_logits.to_vec();
    log_softmax(&mut lc);
    let mut lu = uncond_logits.to_vec();
    log_softmax(&mut lu);
    cfg_mix(&lc, &lu, gamma).into_iter().map(f64::exp).collect()
}

/// Sidecar written next to generated audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub config: SampleConfig,
    pub checkpoint_sha256: String,
    pub codebooks_sha256: String,
    pub clip_id: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{fit_rvq, analyze};
    use crate::model::ModelConfig;
    use crate::world::WorldConfig;

    #[test]
    fn hand_example_for_guidance_six() {
        let lc = [0.8f64.ln(), 0.2f64.ln()];
        let lu = [0.5f64.ln(), 0.5f64.ln()];
        let p: Vec<f64> = cfg_mix(&lc, &lu, 6.0).into_iter().map(f64::exp).collect();
        // A uniform unconditional term cancels, leaving 0.8^6 : 0.2^6.
        let expected0 = 0.8f64.powi(6) / (0.8f64.powi(6) + 0.2f64.powi(6));
        assert!((p[0] - expected0).abs() < 1e-12);
        assert!((p[0] - 4096.0 / 4097.0).abs() < 1e-12);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn guidance_one_and_zero_collapse() {
        let lc = [0.1f64.ln(), 0.6f64.ln(), 0.3f64.ln()];
        let lu = [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()];
        for (a, b) in cfg_mix(&lc, &lu, 1.0).iter().zip(&lc) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in cfg_mix(&lc, &lu, 0.0).iter().zip(&lu) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn greedy_and_tie_rules() {
        let mut rng = stream_rng(0, 0);
        assert_eq!(sample_token(&[1.0, 3.0, 2.0], 0.0, 0, &mut rng).unwrap(), 1);
        assert_eq!(sample_token(&[5.0, 5.0], 0.0, 0, &mut rng).unwrap(), 0);
        assert_eq!(sample_token(&[f64::NEG_INFINITY, -1.0], 0.0, 0, &mut rng).unwrap(), 1);
        assert!(sample_token(&[f64::NAN, 1.0], 1.0, 0, &mut rng).is_err());
    }

    #[test]
    fn top_one_is_greedy() {
        let mut rng = stream_rng(3, 0);
        let scores = [0.2, 1.5, 1.4, -3.0, f64::NEG_INFINITY];
        for _ in 0..1000 {
            assert_eq!(sample_token(&scores, 1.0, 1, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn never_samples_masked_entries() {
        let mut rng = stream_rng(4, 0);
        let scores = [0.0, 0.0, f64::NEG_INFINITY];
        let mut seen = [0usize; 3];
        for _ in 0..2000 {
            seen[sample_token(&scores, 1.0, 0, &mut rng).unwrap()] += 1;
        }
        assert_eq!(seen[2], 0);
        assert!((seen[0] as f64 / 2000.0 - 0.5).abs() < 0.05);
    }

    fn toy_setup(conditioning: Conditioning) -> (Params<f32>, RvqCodebooks, VideoFeatureStream) {
        let world = WorldConfig {
            duration_s: 0.32,
            ..WorldConfig::default()
        };
        let clips: Vec<_> = (0..4).map(|i| world.clip(format!("c{i}"), i).unwrap()).collect();
        let frames: Vec<_> = clips.iter().map(|c| analyze(&c.audio, 64, 32).unwrap()).collect();
        let books = fit_rvq(&frames, 2, 8, 0, 4).unwrap();
        let cfg = ModelConfig {
            k: 8,
            n_q: 2,
            d_a: 8,
            d_v: 8,
            d_raw: world.d_raw,
            d_vis_hidden: 8,
            n_layer: 1,
            n_head: 2,
            conditioning,
            ..ModelConfig::default()
        };
        (Params::init(&cfg, 0).unwrap(), books, clips[0].video.clone())
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        for conditioning in [Conditioning::Fusion, Conditioning::Prepend] {
            let (p, books, video) = toy_setup(conditioning);
            let sc = SampleConfig {
                duration_s: 0.32,
                seed: 5,
                ..SampleConfig::default()
            };
            let a = generate(&p, &books, &video, &sc).unwrap();
            let b = generate(&p, &books, &video, &sc).unwrap();
            assert_eq!(a.waveform, b.waveform);
            a.delayed.validate().unwrap();
            assert_eq!(a.tokens.t_a, tokens_for_duration(0.32, 8000, &books));
            assert_eq!(a.waveform.samples.len(), 2560);
            assert_eq!(a.probe.unconditional_steps, a.probe.conditional_steps);
        }
    }

    #[test]
    fn guidance_one_skips_the_unconditional_branch() {
        let (p, books, video) = toy_setup(Conditioning::Fusion);
        let sc = SampleConfig {
            duration_s: 0.32,
            gamma: 1.0,
            ..SampleConfig::default()
        };
        let g = generate(&p, &books, &video, &sc).unwrap();
        assert_eq!(g.probe.unconditional_steps, 0);
        assert_eq!(g.probe.conditional_steps, g.alignment.len - 1);
    }

    #[test]
    fn fusion_reads_no_future_frames() {
        let (p, books, video) = toy_setup(Conditioning::Fusion);
        let g = generate(&p, &books, &video, &SampleConfig {
            duration_s: 0.32,
            ..SampleConfig::default()
        })
        .unwrap();
        assert_eq!(g.probe.violations(&g.alignment), 0);
        assert_eq!(g.probe.latest_frame.last().copied().flatten(), Some(g.alignment.t_v - 1));
    }

    #[test]
    fn rejects_incompatible_inputs() {
        let (p, books, video) = toy_setup(Conditioning::Fusion);
        let long = SampleConfig {
            duration_s: 1.0,
            ..SampleConfig::default()
        };
        assert!(matches!(generate(&p, &books, &video, &long), Err(Error::InvalidArgument(_))));
        let fewer = books.truncated(1);
        let sc = SampleConfig {
            duration_s: 0.32,
            ..SampleConfig::default()
        };
        assert!(matches!(generate(&p, &fewer, &video, &sc), Err(Error::InvalidArgument(_))));
    }
}
