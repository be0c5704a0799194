//! Evaluation: synchronization offset, class-posterior divergence, Fréchet
//! distance of embedding sets, and audio-video embedding agreement.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codec::RvqCodebooks;
use crate::curation::{cosine_of_units, embed_audio_clip, embed_video_clip, AvEmbedder};
use crate::error::{Error, Result};
use crate::model::Params;
use crate::sampler::{generate, SampleConfig};
use crate::world::{ClipSample, EventTimeline, VideoFeatureStream, Waveform};

/// Envelope and correlation rate, frames per second.
pub const ENVELOPE_HZ: f64 = 250.0;
/// Largest searched lag, seconds.
pub const MAX_LAG_S: f64 = 2.0;
/// Spacing of the offset classes, seconds.
pub const OFFSET_STEP_S: f64 = 0.2;
pub const OFFSET_CLASSES: usize = 21;
pub const DEFAULT_WIN_MS: f64 = 16.0;
const ENERGY_FLOOR: f64 = 1e-12;

/// Offset in seconds of class `i`.
pub fn offset_class_value(i: usize) -> f64 {
    (i as f64 - (OFFSET_CLASSES / 2) as f64) * OFFSET_STEP_S
}

/// Nearest class for an offset in seconds, clamped to the grid.
pub fn offset_class(offset_s: f64) -> usize {
    let half = (OFFSET_CLASSES / 2) as f64;
    ((offset_s / OFFSET_STEP_S).round() + half).clamp(0.0, 2.0 * half) as usize
}

/// Rectified first difference of a centered short-window RMS, one value per
/// `1 / ENVELOPE_HZ` seconds.
pub fn onset_envelope(wave: &Waveform, win_ms: f64) -> Result<Vec<f64>> {
    if !(win_ms > 0.0) {
        return Err(Error::invalid("window must be positive"));
    }
    let sr = wave.sample_rate as f64;
    let n = (wave.samples.len() as f64 * ENVELOPE_HZ / sr).floor() as usize;
    let half = ((win_ms / 1000.0 * sr) / 2.0).round().max(1.0) as isize;
    let mut prefix = Vec::with_capacity(wave.samples.len() + 1);
    prefix.push(0.0f64);
    for &s in &wave.samples {
        prefix.push(prefix.last().unwrap() + (s as f64) * (s as f64));
    }
    let len = wave.samples.len() as isize;
    let rms: Vec<f64> = (0..n)
        .map(|i| {
            let c = (i as f64 * sr / ENVELOPE_HZ).round() as isize;
            let lo = (c - half).clamp(0, len) as usize;
            let hi = (c + half).clamp(0, len) as usize;
            let width = (2 * half) as f64;
            ((prefix[hi] - prefix[lo]) / width).sqrt()
        })
        .collect();
    let mut env = vec![0.0; n];
    for i in 1..n {
        env[i] = (rms[i] - rms[i - 1]).max(0.0);
    }
    Ok(env)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    /// Positive when the audio lags the reference.
    pub offset_ms: f64,
    pub class_index: usize,
    pub class_offset_s: f64,
}

/// Cross-correlates the onset envelope with unit impulses at the reference
/// event times over lags within `MAX_LAG_S`.
pub fn estimate_offset(gen_audio: &Waveform, reference: &EventTimeline) -> Result<OffsetEstimate> {
    if reference.events.is_empty() {
        return Err(Error::UndefinedOffset("reference timeline has no events".into()));
    }
    let env = onset_envelope(gen_audio, DEFAULT_WIN_MS)?;
    if env.iter().all(|&v| v == 0.0) {
        return Err(Error::UndefinedOffset("audio has no onsets".into()));
    }
    let impulses: Vec<isize> = reference
        .events
        .iter()
        .map(|e| (e.t * ENVELOPE_HZ).round() as isize)
        .collect();
    let max_lag = (MAX_LAG_S * ENVELOPE_HZ).round() as isize;
    let mut best: Option<(isize, f64)> = None;
    // Visit lags by increasing magnitude, negative first, so strict
    // improvement implements the tie rule.
    for mag in 0..=max_lag {
        let lags: &[isize] = if mag == 0 { &[0] } else { &[-mag, mag] };
        for &lag in lags {
            let score: f64 = impulses
                .iter()
                .filter_map(|&i| {
                    let j = i + lag;
                    (j >= 0 && (j as usize) < env.len()).then(|| env[j as usize])
                })
                .sum();
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((lag, score));
            }
        }
    }
    let lag = best.expect("at least lag 0").0;
    let offset_s = lag as f64 / ENVELOPE_HZ;
    let class_index = offset_class(offset_s);
    Ok(OffsetEstimate {
        offset_ms: offset_s * 1000.0,
        class_index,
        class_offset_s: offset_class_value(class_index),
    })
}

/// Mean absolute offset over pairs with a defined offset. Returns the score
/// and the number of undefined pairs.
pub fn sync_score(pairs: &[(&Waveform, &EventTimeline)]) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut valid = 0usize;
    let mut undefined = 0usize;
    for (w, tl) in pairs {
        match estimate_offset(w, tl) {
            Ok(o) => {
                sum += o.offset_ms.abs();
                valid += 1;
            }
            Err(Error::UndefinedOffset(_)) => undefined += 1,
            Err(e) => return Err(e),
        }
    }
    if valid == 0 {
        return Err(Error::NoSamples("no pair has a defined offset".into()));
    }
    Ok((sum / valid as f64, undefined))
}

/// Class posterior proportional to the floored matched-filter energies.
pub fn classify_audio(wave: &Waveform, embedder: &AvEmbedder) -> Result<Vec<f64>> {
    let logs: Vec<f64> = embedder
        .audio_energies(wave)?
        .into_iter()
        .map(|e| e.max(ENERGY_FLOOR).ln())
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `KL(p || q)` in nats; zero-probability terms of `p` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid("distributions differ in length"));
    }
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += a * (a / b).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Mean `KL(classify(gt) || classify(gen))` over pairs.
pub fn kld_relevance(gen_set: &[Waveform], gt_set: &[Waveform], embedder: &AvEmbedder) -> Result<f64> {
    if gen_set.len() != gt_set.len() {
        return Err(Error::invalid("generated and reference sets differ in size"));
    }
    if gen_set.is_empty() {
        return Err(Error::NoSamples("empty evaluation set".into()));
    }
    let mut sum = 0.0;
    for (g, t) in gen_set.iter().zip(gt_set) {
        sum += kl_divergence(&classify_audio(t, embedder)?, &classify_audio(g, embedder)?)?;
    }
    Ok(sum / gen_set.len() as f64)
}

fn gaussian_fit(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dim = set.first().map_or(0, |v| v.len());
    if dim == 0 || set.len() < dim + 1 {
        return Err(Error::invalid(format!(
            "need at least dim + 1 = {} vectors, got {}",
            dim + 1,
            set.len()
        )));
    }
    if set.iter().any(|v| v.len() != dim) {
        return Err(Error::invalid("vectors differ in dimension"));
    }
    let n = set.len() as f64;
    let mut mean = DVector::zeros(dim);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let d = DVector::from_column_slice(v) - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = gaussian_fit(a)?;
    let (mu_b, cov_b) = gaussian_fit(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::invalid("sets differ in dimension"));
    }
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let trace_root: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = (&mu_a - &mu_b).norm_squared();
    Ok(diff + cov_a.trace() + cov_b.trace() - 2.0 * trace_root)
}

/// `100 * cosine` between the audio and video embeddings.
pub fn ib_score(gen_audio: &Waveform, video: &VideoFeatureStream, embedder: &AvEmbedder) -> Result<f64> {
    let a = embed_audio_clip(gen_audio, embedder)?;
    let v = embed_video_clip(video, embedder)?;
    Ok(100.0 * cosine_of_units(&a, &v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub id: String,
    /// None when no generation of this video had a defined offset.
    pub sync_ms: Option<f64>,
    pub kld: f64,
    pub ib: f64,
    pub undefined_offsets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sync_ms: f64,
    pub kld: f64,
    /// None when either set has fewer than `C + 1` embeddings.
    pub fd: Option<f64>,
    pub ib: f64,
    pub n_samples: usize,
    pub n_generations_per_video: usize,
    pub undefined_offsets: usize,
    pub per_video: Vec<VideoMetrics>,
}

impl MetricsReport {
    pub fn per_video_csv(&self) -> String {
        let mut s = String::from("id,sync_ms,kld,fd_contribution,ib\n");
        for v in &self.per_video {
            let sync = v.sync_ms.map_or_else(|| "nan".to_string(), |x| format!("{x:.3}"));
            let _ = writeln!(s, "{},{},{:.6},n/a,{:.4}", v.id, sync, v.kld, v.ib);
        }
        s
    }

    /// One row in the column order KLD, FD, IB, Sync.
    pub fn aggregate_csv(&self) -> String {
        let fd = self.fd.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        format!(
            "kld,fd,ib,sync_ms\n{:.6},{},{:.4},{:.3}\n",
            self.kld, fd, self.ib, self.sync_ms
        )
    }
}

/// Scores already generated audio. `generated[i]` holds the generations for
/// `clips[i]`; the clip's own audio is the ground truth and its timeline the
/// synchronization reference.
pub fn score_generations(
    clips: &[ClipSample],
    generated: &[Vec<Waveform>],
    embedder: &AvEmbedder,
) -> Result<MetricsReport> {
    if clips.is_empty() {
        return Err(Error::NoSamples("no test videos".into()));
    }
    if clips.len() != generated.len() {
        return Err(Error::invalid("one generation list per clip is required"));
    }
    let n_gen = generated[0].len();
    if n_gen == 0 || generated.iter().any(|g| g.len() != n_gen) {
        return Err(Error::invalid("every clip needs the same positive number of generations"));
    }
    let mut per_video = Vec::with_capacity(clips.len());
    let mut gen_embeddings = Vec::new();
    let mut gt_embeddings = Vec::new();
    for (clip, gens) in clips.iter().zip(generated) {
        let gt_class = classify_audio(&clip.audio, embedder)?;
        gt_embeddings.push(embed_audio_clip(&clip.audio, embedder)?);
        let mut sync_sum = 0.0;
        let mut sync_n = 0usize;
        let mut undefined = 0usize;
        let mut kld = 0.0;
        let mut ib = 0.0;
        for g in gens {
            match estimate_offset(g, &clip.timeline) {
                Ok(o) => {
                    sync_sum += o.offset_ms.abs();
                    sync_n += 1;
                }
                Err(Error::UndefinedOffset(_)) => undefined += 1,
                Err(e) => return Err(e),
            }
            kld += kl_divergence(&gt_class, &classify_audio(g, embedder)?)?;
            ib += ib_score(g, &clip.video, embedder)?;
            gen_embeddings.push(embed_audio_clip(g, embedder)?);
        }
        per_video.push(VideoMetrics {
            id: clip.id.clone(),
            sync_ms: (sync_n > 0).then(|| sync_sum / sync_n as f64),
            kld: kld / n_gen as f64,
            ib: ib / n_gen as f64,
            undefined_offsets: undefined,
        });
    }
    let synced: Vec<f64> = per_video.iter().filter_map(|v| v.sync_ms).collect();
    if synced.is_empty() {
        return Err(Error::NoSamples("no video has a defined offset".into()));
    }
    let nv = per_video.len() as f64;
    let undefined_offsets = per_video.iter().map(|v| v.undefined_offsets).sum();
    if undefined_offsets > 0 {
        log::warn!("{undefined_offsets} generations had no defined offset");
    }
    let fd = match frechet_distance(&gt_embeddings, &gen_embeddings) {
        Ok(v) => Some(v),
        Err(Error::InvalidArgument(msg)) => {
            log::warn!("Fréchet distance skipped: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        sync_ms: synced.iter().sum::<f64>() / synced.len() as f64,
        kld: per_video.iter().map(|v| v.kld).sum::<f64>() / nv,
        fd,
        ib: per_video.iter().map(|v| v.ib).sum::<f64>() / nv,
        n_samples: clips.len() * n_gen,
        n_generations_per_video: n_gen,
        undefined_offsets,
        per_video,
    })
}

/// Generates `n_gen` clips per video (seeds `base.seed + index`) and scores
/// them.
pub fn evaluate(
    params: &Params<f32>,
    books: &RvqCodebooks,
    clips: &[ClipSample],
    base: &SampleConfig,
    n_gen: usize,
    embedder: &AvEmbedder,
) -> Result<MetricsReport> {
    if clips.is_empty() {
        return Err(Error::NoSamples("no test videos".into()));
    }
    if n_gen == 0 {
        return Err(Error::invalid("n_gen must be positive"));
    }
    let mut generated = Vec::with_capacity(clips.len());
    for clip in clips {
        let mut gens = Vec::with_capacity(n_gen);
        for i in 0..n_gen {
            let cfg = SampleConfig {
                seed: base.seed.wrapping_add(i as u64),
                duration_s: base.duration_s.min(clip.video.duration_s()),
                ..base.clone()
            };
            gens.push(generate(params, books, &clip.video, &cfg)?.waveform);
        }
        generated.push(gens);
    }
    score_generations(clips, &generated, embedder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::world::{render_audio, render_video_features, Event, WorldConfig};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn timeline(events: &[(f64, usize)]) -> EventTimeline {
        EventTimeline::from_events(
            2.56,
            8,
            events
                .iter()
                .map(|&(t, c)| Event {
                    t,
                    class_id: c,
                    amplitude: 0.9,
                })
                .collect(),
        )
        .unwrap()
    }

    fn shifted(tl: &EventTimeline, dt: f64) -> EventTimeline {
        let events = tl
            .events
            .iter()
            .filter(|e| e.t + dt < tl.duration_s)
            .map(|e| Event { t: e.t + dt, ..*e })
            .collect();
        EventTimeline::from_events(tl.duration_s, tl.num_classes, events).unwrap()
    }

    fn local_maxima(env: &[f64], min_height: f64) -> Vec<usize> {
        (1..env.len() - 1)
            .filter(|&i| env[i] >= min_height && env[i] > env[i - 1] && env[i] >= env[i + 1])
            .collect()
    }

    #[test]
    fn offset_grid_has_21_symmetric_classes() {
        assert_eq!(offset_class_value(0), -2.0);
        assert_eq!(offset_class_value(20), 2.0);
        assert_eq!(offset_class_value(10), 0.0);
        assert_eq!(offset_class(0.09), 10);
        assert_eq!(offset_class(0.11), 11);
        assert_eq!(offset_class(-0.11), 9);
        assert_eq!(offset_class(-5.0), 0);
        let max_lag = (MAX_LAG_S * ENVELOPE_HZ) as isize;
        for lag in -max_lag..=max_lag {
            let c = offset_class(lag as f64 / ENVELOPE_HZ);
            assert!((offset_class_value(c) - lag as f64 / ENVELOPE_HZ).abs() <= 0.1 + 1e-9);
        }
    }

    #[test]
    fn silence_envelope_is_zero() {
        let env = onset_envelope(&Waveform::silent(8000, 8000), 16.0).unwrap();
        assert_eq!(env.len(), 250);
        assert!(env.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_event_envelope_peaks_at_onset() {
        for c in [0, 3, 7] {
            let w = render_audio(&timeline(&[(1.0, c)]), 8000).unwrap();
            let env = onset_envelope(&w, DEFAULT_WIN_MS).unwrap();
            let peak = (0..env.len()).max_by(|&a, &b| env[a].total_cmp(&env[b])).unwrap();
            assert!((peak as f64 / ENVELOPE_HZ - 1.0).abs() <= 0.02, "class {c}: {peak}");
        }
    }

    #[test]
    fn two_events_give_two_maxima() {
        let w = render_audio(&timeline(&[(0.5, 1), (1.7, 5)]), 8000).unwrap();
        let env = onset_envelope(&w, DEFAULT_WIN_MS).unwrap();
        let max = env.iter().copied().fold(0.0, f64::max);
        let peaks = local_maxima(&env, 0.3 * max);
        assert_eq!(peaks.len(), 2, "{peaks:?}");
        assert!((peaks[0] as f64 / ENVELOPE_HZ - 0.5).abs() <= 0.02);
        assert!((peaks[1] as f64 / ENVELOPE_HZ - 1.7).abs() <= 0.02);
    }

    #[test]
    fn self_alignment_and_constructed_shift() {
        let tl = timeline(&[(0.3, 2), (0.9, 4), (1.4, 1)]);
        let own = estimate_offset(&render_audio(&tl, 8000).unwrap(), &tl).unwrap();
        assert_eq!(own.class_index, 10);
        assert!(own.offset_ms.abs() <= 20.0);
        let late = estimate_offset(&render_audio(&shifted(&tl, 0.4), 8000).unwrap(), &tl).unwrap();
        assert_eq!(late.class_offset_s, 0.4);
        assert!((late.offset_ms - 400.0).abs() <= 20.0, "{late:?}");
        let early = estimate_offset(&render_audio(&shifted(&tl, -0.2), 8000).unwrap(), &tl).unwrap();
        assert!((early.class_offset_s + 0.2).abs() < 1e-12, "{early:?}");
    }

    #[test]
    fn offset_errors_are_explicit() {
        let empty = EventTimeline::from_events(2.56, 8, vec![]).unwrap();
        let w = render_audio(&timeline(&[(0.3, 2)]), 8000).unwrap();
        assert!(matches!(estimate_offset(&w, &empty), Err(Error::UndefinedOffset(_))));
        let mut rng = stream_rng(1, 0);
        let noise = Waveform {
            samples: (0..20480).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
            sample_rate: 8000,
        };
        let o = estimate_offset(&noise, &timeline(&[(1.0, 0)])).unwrap();
        assert!(o.offset_ms.abs() <= 2000.0 && o.class_index < OFFSET_CLASSES);
    }

    #[test]
    fn sync_score_is_mean_absolute_and_order_free() {
        let tl = timeline(&[(0.8, 3), (1.6, 6)]);
        let late = render_audio(&shifted(&tl, 0.4), 8000).unwrap();
        let tl_early = shifted(&tl, 0.4);
        // Reference 0.4 s later than the audio gives a -400 ms offset.
        let pairs = [(&late, &tl), (&late, &shifted(&tl_early, 0.4))];
        let (s, undefined) = sync_score(&pairs).unwrap();
        assert_eq!(undefined, 0);
        assert!((s - 400.0).abs() <= 20.0, "{s}");
        let rev = [pairs[1], pairs[0]];
        assert_eq!(sync_score(&rev).unwrap().0, s);
        let own = render_audio(&tl, 8000).unwrap();
        assert!(sync_score(&[(&own, &tl)]).unwrap().0 <= 4.0);
    }

    #[test]
    fn classifier_oracles() {
        let emb = AvEmbedder::new(8, 16).unwrap();
        let p = classify_audio(&render_audio(&timeline(&[(0.5, 2)]), 8000).unwrap(), &emb).unwrap();
        let arg = (0..8).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(arg, 2);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let u = classify_audio(&Waveform::silent(4000, 8000), &emb).unwrap();
        assert!(u.iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn kl_hand_value_and_gibbs() {
        let kl = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let hand = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - hand).abs() < 1e-15);
        assert!((kl - 0.1438).abs() < 1e-4);
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let mut rng = stream_rng(2, 0);
        for _ in 0..1000 {
            let n = rng.random_range(2..6);
            let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let mut q: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
            p.iter_mut().for_each(|v| *v /= sp);
            q.iter_mut().for_each(|v| *v /= sq);
            assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }
    }

    fn gaussian_set(n: usize, dim: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream_rng(seed, 0);
        (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z + shift
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn frechet_oracles() {
        let a = gaussian_set(200, 4, 0.0, 1);
        let b = gaussian_set(150, 4, 0.3, 2);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
        let ab = frechet_distance(&a, &b).unwrap();
        assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-9);
        assert!(ab > 0.0);
        let x = gaussian_set(100_000, 1, 0.0, 3);
        let y = gaussian_set(100_000, 1, 1.0, 4);
        assert!((frechet_distance(&x, &y).unwrap() - 1.0).abs() < 0.05);
        assert!(matches!(
            frechet_distance(&a[..4], &b),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn ib_identical_and_disjoint() {
        let emb = AvEmbedder::new(8, 16).unwrap();
        let tl = timeline(&[(0.5, 0)]);
        let video = render_video_features(&tl, 25.0, 16, 0.0).unwrap();
        let own = ib_score(&render_audio(&tl, 8000).unwrap(), &video, &emb).unwrap();
        assert!(own > 90.0, "{own}");
        let other = ib_score(&render_audio(&timeline(&[(0.5, 1)]), 8000).unwrap(), &video, &emb).unwrap();
        assert!(other.abs() < 10.0, "{other}");
    }

    #[test]
    fn own_audio_beats_permuted_pairs() {
        let world = WorldConfig::default();
        let emb = AvEmbedder::new(world.num_classes, world.d_raw).unwrap();
        let clips: Vec<_> = (0..200).map(|s| world.clip(format!("c{s}"), 1000 + s).unwrap()).collect();
        let mut wins = 0;
        for i in 0..clips.len() {
            let j = (i + 1) % clips.len();
            let own = ib_score(&clips[i].audio, &clips[i].video, &emb).unwrap();
            let perm = ib_score(&clips[j].audio, &clips[i].video, &emb).unwrap();
            wins += usize::from(own > perm);
        }
        assert!(wins >= 190, "{wins}");
    }

    #[test]
    fn scoring_ground_truth_gives_perfect_relevance() {
        let world = WorldConfig::default();
        let emb = AvEmbedder::new(world.num_classes, world.d_raw).unwrap();
        let clips: Vec<_> = (0..12)
            .map(|s| world.clip(format!("c{s}"), 50 + s).unwrap())
            .filter(|c| !c.timeline.events.is_empty())
            .collect();
        let gens: Vec<Vec<Waveform>> = clips.iter().map(|c| vec![c.audio.clone()]).collect();
        let r = score_generations(&clips, &gens, &emb).unwrap();
        assert_eq!(r.n_samples, clips.len());
        assert_eq!(r.kld, 0.0);
        assert!(r.sync_ms <= 8.0, "{}", r.sync_ms);
        assert!(r.fd.unwrap().abs() < 1e-6);
        assert!(r.aggregate_csv().starts_with("kld,fd,ib,sync_ms\n"));
        assert_eq!(r.per_video_csv().lines().count(), clips.len() + 1);
    }
}
