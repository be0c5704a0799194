//! Cross-modal similarity scoring and threshold filtering of paired
//! datasets.
//!
//! The embedder is analytic. Audio component `c` is the rectified
//! matched-filter response of a unit-norm class-`c` template summed over the
//! clip; video component `c` is the positive mass on the class's two
//! channels. Both vectors are L2-normalized, so their dot product is a
//! cosine similarity.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::io::{Manifest, ManifestRecord};
use crate::world::{bump_channel, event_kernel, spike_channel, ClipSample, VideoFeatureStream, Waveform};

/// Length of the class templates, seconds.
pub const TEMPLATE_S: f64 = 0.2;
/// Default threshold sweep.
pub const SWEEP: [f64; 4] = [0.0, 0.2, 0.3, 0.4];
pub const DEFAULT_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct AvEmbedder {
    pub num_classes: usize,
    pub d_raw: usize,
}

impl AvEmbedder {
    pub fn new(num_classes: usize, d_raw: usize) -> Result<Self> {
        if num_classes == 0 || d_raw == 0 {
            return Err(Error::invalid("embedder needs at least one class and one channel"));
        }
        Ok(AvEmbedder { num_classes, d_raw })
    }

    /// Unit-norm class templates at `sample_rate`.
    pub fn templates(&self, sample_rate: u32) -> Vec<Vec<f64>> {
        let n = (TEMPLATE_S * sample_rate as f64).round().max(1.0) as usize;
        (0..self.num_classes)
            .map(|c| {
                let mut t: Vec<f64> = (0..n).map(|i| event_kernel(c, i as f64 / sample_rate as f64)).collect();
                let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    t.iter_mut().for_each(|v| *v /= norm);
                }
                t
            })
            .collect()
    }

    /// Per-class rectified matched-filter response summed over the clip.
    pub fn audio_energies(&self, wave: &Waveform) -> Result<Vec<f64>> {
        if wave.samples.is_empty() {
            return Err(Error::invalid("empty waveform"));
        }
        let templates = self.templates(wave.sample_rate);
        let m = templates[0].len();
        let n = wave.samples.len();
        let size = (n + m - 1).next_power_of_two();
        let mut planner = FftPlanner::<f64>::new();
        let fwd: Arc<dyn Fft<f64>> = planner.plan_fft_forward(size);
        let inv = planner.plan_fft_inverse(size);
        let mut x: Vec<Complex<f64>> = wave
            .samples
            .iter()
            .map(|&s| Complex::new(s as f64, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(size)
            .collect();
        fwd.process(&mut x);
        let scale = 1.0 / size as f64;
        let mut out = Vec::with_capacity(templates.len());
        let mut buf = vec![Complex::new(0.0, 0.0); size];
        for t in &templates {
            buf.fill(Complex::new(0.0, 0.0));
            for (b, &v) in buf.iter_mut().zip(t) {
                b.re = v;
            }
            fwd.process(&mut buf);
            for (b, xv) in buf.iter_mut().zip(&x) {
                *b = xv * b.conj();
            }
            inv.process(&mut buf);
            // Lags 0..n cover every alignment of the template start within
            // the clip.
            out.push(buf[..n].iter().map(|c| (c.re * scale).abs()).sum());
        }
        Ok(out)
    }

    pub fn video_energies(&self, stream: &VideoFeatureStream) -> Result<Vec<f64>> {
        if stream.t_v == 0 {
            return Err(Error::invalid("empty video stream"));
        }
        if stream.d_raw != self.d_raw {
            return Err(Error::invalid(format!(
                "video has {} channels, embedder expects {}",
                stream.d_raw, self.d_raw
            )));
        }
        Ok((0..self.num_classes)
            .map(|c| {
                let (a, b) = (bump_channel(c, self.d_raw), spike_channel(c, self.d_raw));
                (0..stream.t_v)
                    .map(|f| {
                        let row = stream.row(f);
                        (row[a].max(0.0) + row[b].max(0.0)) as f64
                    })
                    .sum()
            })
            .collect())
    }
}

/// L2-normalizes, falling back to the uniform vector when all mass is zero.
pub fn unit_or_uniform(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        v.into_iter().map(|x| x / norm).collect()
    } else {
        vec![1.0 / (v.len() as f64).sqrt(); v.len()]
    }
}

pub fn embed_audio_clip(wave: &Waveform, embedder: &AvEmbedder) -> Result<Vec<f64>> {
    Ok(unit_or_uniform(embedder.audio_energies(wave)?))
}

pub fn embed_video_clip(stream: &VideoFeatureStream, embedder: &AvEmbedder) -> Result<Vec<f64>> {
    Ok(unit_or_uniform(embedder.video_energies(stream)?))
}

pub fn cosine_of_units(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn av_similarity(sample: &ClipSample, embedder: &AvEmbedder) -> Result<f64> {
    let dv = sample.video.duration_s();
    let da = sample.audio.duration_s();
    if (dv - da).abs() > 1.0 / sample.video.fps {
        return Err(Error::invalid(format!(
            "clip {}: audio lasts {da} s but video {dv} s",
            sample.id
        )));
    }
    let a = embed_audio_clip(&sample.audio, embedder)?;
    let v = embed_video_clip(&sample.video, embedder)?;
    Ok(cosine_of_units(&a, &v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub kept: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub threshold: f64,
    pub kept: usize,
    pub dropped: usize,
    /// Manifest lines that could not be parsed or loaded.
    pub skipped: usize,
    pub sweep: Vec<SweepRow>,
}

impl CurationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,kept,dropped\n");
        for r in &self.sweep {
            let _ = writeln!(s, "{},{},{}", r.threshold, r.kept, r.dropped);
        }
        s
    }
}

/// Records with their similarity filled in, sorted by id.
pub fn score_records(
    manifest: &Manifest,
    embedder: &AvEmbedder,
    fps: f64,
) -> (Vec<ManifestRecord>, usize) {
    let mut skipped = manifest.skipped.len();
    let mut scored = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        match manifest.load_clip(rec, fps).and_then(|clip| av_similarity(&clip, embedder)) {
            Ok(sim) => {
                let mut r = rec.clone();
                r.similarity = Some(sim);
                scored.push(r);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", rec.id);
                skipped += 1;
            }
        }
    }
    scored.sort_by(|a, b| a.id.cmp(&b.id));
    (scored, skipped)
}

/// Keeps scored records with similarity at or above `threshold`.
pub fn apply_threshold(scored: &[ManifestRecord], threshold: f64) -> Vec<ManifestRecord> {
    scored
        .iter()
        .filter(|r| r.similarity.is_some_and(|s| s >= threshold))
        .cloned()
        .collect()
}

pub fn sweep_table(scored: &[ManifestRecord], thresholds: &[f64]) -> Vec<SweepRow> {
    thresholds
        .iter()
        .map(|&t| {
            let kept = apply_threshold(scored, t).len();
            SweepRow {
                threshold: t,
                kept,
                dropped: scored.len() - kept,
            }
        })
        .collect()
}

pub fn filter_dataset(
    manifest: &Manifest,
    embedder: &AvEmbedder,
    threshold: f64,
    fps: f64,
    sweep: &[f64],
) -> Result<(Vec<ManifestRecord>, CurationReport)> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [-1, 1]")));
    }
    let (scored, skipped) = score_records(manifest, embedder, fps);
    let kept = apply_threshold(&scored, threshold);
    let report = CurationReport {
        threshold,
        kept: kept.len(),
        dropped: scored.len() - kept.len(),
        skipped,
        sweep: sweep_table(&scored, sweep),
    };
    Ok((kept, report))
}

/// Reads a manifest, filters it and writes the kept records plus the sweep
/// CSV next to `out_manifest`.
pub fn filter_manifest_file(
    input: &Path,
    out_manifest: &Path,
    embedder: &AvEmbedder,
    threshold: f64,
    fps: f64,
) -> Result<CurationReport> {
    let manifest = Manifest::read(input)?;
    let (kept, report) = filter_dataset(&manifest, embedder, threshold, fps, &SWEEP)?;
    // Paths stay valid when the output manifest lives elsewhere.
    let rebased: Vec<ManifestRecord> = kept
        .into_iter()
        .map(|mut r| {
            for p in [&mut r.paths.audio, &mut r.paths.video, &mut r.paths.timeline] {
                *p = manifest.resolve(p).to_string_lossy().into_owned();
            }
            r
        })
        .collect();
    Manifest::write(out_manifest, &rebased)?;
    Ok(report)
}

/// Area under the ROC curve for scores where positives should rank higher;
/// ties count half.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::NoSamples("roc needs both classes".into()));
    }
    let mut wins = 0.0;
    for &p in positives {
        for &n in negatives {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (positives.len() * negatives.len()) as f64)
}

/// Ids kept at each threshold are nested as the threshold rises.
pub fn is_nested(scored: &[ManifestRecord], thresholds: &[f64]) -> bool {
    let mut ts = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);
    let sets: Vec<BTreeSet<String>> = ts
        .iter()
        .map(|&t| apply_threshold(scored, t).into_iter().map(|r| r.id).collect())
        .collect();
    sets.windows(2).all(|w| w[1].is_subset(&w[0]))
}
