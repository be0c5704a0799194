//! Synthetic audio-visual world.
//!
//! Every clip is driven by an [`EventTimeline`]: a list of sound-producing
//! events. The waveform renders each event as a damped sinusoid whose pitch
//! identifies the event class, and the video feature stream renders the same
//! event as a decaying bump plus a one-frame onset spike on class-specific
//! channels. Both modalities therefore share one latent cause, which is what
//! the synchronization and relevance metrics rely on.

pub mod io;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng};

/// Decay constant of the acoustic event kernel, seconds.
pub const AUDIO_DECAY_S: f64 = 0.05;
/// Decay constant of the visual bump kernel, seconds.
pub const VIDEO_DECAY_S: f64 = 0.2;
/// Base pitch; class `c` sounds at `BASE_HZ * (c + 1)`.
pub const BASE_HZ: f64 = 300.0;
/// The audio kernel is truncated after this many decay constants.
const KERNEL_SPAN_TAUS: f64 = 24.0;

const TONE_HZ: f64 = 440.0;
const TONE_AMPLITUDE: f64 = 0.3;

/// Pitch of class `c` in Hz.
pub fn class_frequency(class_id: usize) -> f64 {
    BASE_HZ * (class_id as f64 + 1.0)
}

/// Value of a unit-amplitude class-`c` event kernel `dt` seconds after onset.
pub fn event_kernel(class_id: usize, dt: f64) -> f64 {
    if dt < 0.0 {
        return 0.0;
    }
    (-dt / AUDIO_DECAY_S).exp() * (2.0 * std::f64::consts::PI * class_frequency(class_id) * dt).sin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub class_id: usize,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTimeline {
    pub duration_s: f64,
    pub events: Vec<Event>,
    pub num_classes: usize,
    pub seed: u64,
    /// Rate the timeline was drawn with; replacement audio reuses it.
    pub event_rate: f64,
}

impl EventTimeline {
    /// Builds a timeline from explicit events, validating and sorting them.
    pub fn from_events(
        duration_s: f64,
        num_classes: usize,
        mut events: Vec<Event>,
    ) -> Result<Self> {
        if !(duration_s > 0.0) {
            return Err(Error::invalid("duration must be positive"));
        }
        if num_classes < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        for e in &events {
            if !(0.0..duration_s).contains(&e.t) {
                return Err(Error::invalid(format!("event time {} outside clip", e.t)));
            }
            if e.class_id >= num_classes {
                return Err(Error::invalid(format!("class {} out of range", e.class_id)));
            }
            if !(e.amplitude > 0.0 && e.amplitude <= 1.0) {
                return Err(Error::invalid(format!("amplitude {} outside (0, 1]", e.amplitude)));
            }
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(EventTimeline {
            duration_s,
            events,
            num_classes,
            seed: 0,
            event_rate: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn silent(len: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / self.samples.len() as f64
    }

    /// Snap every sample onto the 16-bit PCM grid used by the WAV files.
    pub fn quantize_pcm16(&mut self) {
        for s in &mut self.samples {
            *s = io::pcm16_to_f32(io::f32_to_pcm16(*s));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatureStream {
    /// Row-major `t_v x d_raw`.
    pub features: Vec<f32>,
    pub t_v: usize,
    pub d_raw: usize,
    pub fps: f64,
}

impl VideoFeatureStream {
    pub fn row(&self, frame: usize) -> &[f32] {
        &self.features[frame * self.d_raw..(frame + 1) * self.d_raw]
    }

    pub fn duration_s(&self) -> f64 {
        self.t_v as f64 / self.fps
    }

    /// First `t_v` frames only.
    pub fn truncated(&self, t_v: usize) -> VideoFeatureStream {
        let t_v = t_v.min(self.t_v);
        VideoFeatureStream {
            features: self.features[..t_v * self.d_raw].to_vec(),
            t_v,
            d_raw: self.d_raw,
            fps: self.fps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    None,
    Replace,
    Tone,
    Noise,
}

impl Corruption {
    pub fn as_str(self) -> &'static str {
        match self {
            Corruption::None => "none",
            Corruption::Replace => "replace",
            Corruption::Tone => "tone",
            Corruption::Noise => "noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub id: String,
    pub timeline: EventTimeline,
    pub video: VideoFeatureStream,
    pub audio: Waveform,
    pub corruption: Corruption,
}

/// Parameters of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub sample_rate: u32,
    pub fps: f64,
    pub duration_s: f64,
    pub num_classes: usize,
    pub event_rate: f64,
    pub d_raw: usize,
    pub noise_std: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            sample_rate: 8000,
            fps: 25.0,
            duration_s: 2.56,
            num_classes: 8,
            event_rate: 1.5,
            d_raw: 16,
            noise_std: 0.05,
        }
    }
}

impl WorldConfig {
    /// Generates one clean clip from `seed`.
    pub fn clip(&self, id: impl Into<String>, seed: u64) -> Result<ClipSample> {
        let timeline = generate_timeline(seed, self.duration_s, self.event_rate, self.num_classes)?;
        let audio = render_audio(&timeline, self.sample_rate)?;
        let video = render_video_features(&timeline, self.fps, self.d_raw, self.noise_std)?;
        Ok(ClipSample {
            id: id.into(),
            timeline,
            video,
            audio,
            corruption: Corruption::None,
        })
    }
}

/// Draws a Poisson number of events with uniform times and classes and
/// amplitudes uniform in `[0.5, 1]`.
pub fn generate_timeline(
    seed: u64,
    duration_s: f64,
    event_rate: f64,
    num_classes: usize,
) -> Result<EventTimeline> {
    if !(duration_s > 0.0) {
        return Err(Error::invalid(format!("duration must be positive, got {duration_s}")));
    }
    if !(event_rate > 0.0) {
        return Err(Error::invalid(format!("event rate must be positive, got {event_rate}")));
    }
    if num_classes < 2 {
        return Err(Error::invalid("at least two classes are required"));
    }
    let mut rng = stream_rng(seed, 1);
    let poisson = Poisson::new(event_rate * duration_s)
        .map_err(|e| Error::invalid(format!("event rate: {e}")))?;
    let count = poisson.sample(&mut rng) as usize;
    let mut events: Vec<Event> = (0..count)
        .map(|_| Event {
            t: rng.random_range(0.0..duration_s),
            class_id: rng.random_range(0..num_classes),
            amplitude: rng.random_range(0.5..=1.0),
        })
        .collect();
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(EventTimeline {
        duration_s,
        events,
        num_classes,
        seed,
        event_rate,
    })
}

fn check_nyquist(num_classes: usize, sample_rate: u32) -> Result<()> {
    let top = class_frequency(num_classes.saturating_sub(1));
    if top >= sample_rate as f64 / 2.0 {
        return Err(Error::invalid(format!(
            "class pitch {top} Hz is not below the Nyquist frequency of {sample_rate} Hz"
        )));
    }
    Ok(())
}

/// Sum of all event kernels without clipping, in 64-bit.
pub fn render_audio_unclipped(timeline: &EventTimeline, sample_rate: u32) -> Result<Vec<f64>> {
    check_nyquist(timeline.num_classes, sample_rate)?;
    let sr = sample_rate as f64;
    let len = (timeline.duration_s * sr).round() as usize;
    let mut out = vec![0.0f64; len];
    let span = (KERNEL_SPAN_TAUS * AUDIO_DECAY_S * sr).ceil() as usize;
    for e in &timeline.events {
        let first = (e.t * sr).ceil() as usize;
        let last = (first + span).min(len);
        for (n, slot) in out.iter_mut().enumerate().take(last).skip(first) {
            let dt = n as f64 / sr - e.t;
            *slot += e.amplitude * event_kernel(e.class_id, dt);
        }
    }
    Ok(out)
}

pub fn render_audio(timeline: &EventTimeline, sample_rate: u32) -> Result<Waveform> {
    let raw = render_audio_unclipped(timeline, sample_rate)?;
    Ok(Waveform {
        samples: raw.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect(),
        sample_rate,
    })
}

/// Channel carrying the sustained bump of `class_id`; the onset spike uses
/// the next channel. Channels wrap when `d_raw < 2 * C`.
pub fn bump_channel(class_id: usize, d_raw: usize) -> usize {
    (2 * class_id) % d_raw
}

pub fn spike_channel(class_id: usize, d_raw: usize) -> usize {
    (2 * class_id + 1) % d_raw
}

pub fn render_video_features(
    timeline: &EventTimeline,
    fps: f64,
    d_raw: usize,
    noise_std: f64,
) -> Result<VideoFeatureStream> {
    if !(fps > 0.0) {
        return Err(Error::invalid(format!("fps must be positive, got {fps}")));
    }
    if d_raw == 0 {
        return Err(Error::invalid("d_raw must be at least 1"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be non-negative"));
    }
    let t_v = (timeline.duration_s * fps).round() as usize;
    let mut feat = vec![0.0f64; t_v * d_raw];
    for e in &timeline.events {
        let bump = bump_channel(e.class_id, d_raw);
        let spike = spike_channel(e.class_id, d_raw);
        for k in 0..t_v {
            let t = k as f64 / fps;
            if t >= e.t {
                feat[k * d_raw + bump] += e.amplitude * (-(t - e.t) / VIDEO_DECAY_S).exp();
            }
        }
        let onset = (e.t * fps).floor() as usize;
        if onset < t_v {
            feat[onset * d_raw + spike] += e.amplitude;
        }
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = stream_rng(timeline.seed, 2);
        for v in &mut feat {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(VideoFeatureStream {
        features: feat.into_iter().map(|v| v as f32).collect(),
        t_v,
        d_raw,
        fps,
    })
}

/// Timeline used for `replace` corruption: independent of the original but
/// drawn with the same duration, rate and class count.
pub fn replacement_timeline(original: &EventTimeline, seed: u64) -> Result<EventTimeline> {
    let rate = if original.event_rate > 0.0 {
        original.event_rate
    } else {
        (original.events.len().max(1) as f64) / original.duration_s
    };
    generate_timeline(
        derive_seed(seed, 0x5e9_1ace),
        original.duration_s,
        rate,
        original.num_classes,
    )
}

/// Replaces or degrades the audio track of a clean sample. Video features
/// are left untouched.
pub fn corrupt_audio(sample: &ClipSample, mode: Corruption, seed: u64) -> Result<ClipSample> {
    if sample.corruption != Corruption::None {
        return Err(Error::InvalidState(format!(
            "sample {} is already corrupted ({})",
            sample.id,
            sample.corruption.as_str()
        )));
    }
    let sr = sample.audio.sample_rate;
    let len = sample.audio.samples.len();
    let audio = match mode {
        Corruption::None => {
            return Err(Error::invalid("corruption mode must not be none"));
        }
        Corruption::Replace => {
            let other = replacement_timeline(&sample.timeline, seed)?;
            let mut w = render_audio(&other, sr)?;
            w.samples.resize(len, 0.0);
            w
        }
        Corruption::Tone => {
            let samples = (0..len)
                .map(|n| {
                    let t = n as f64 / sr as f64;
                    (TONE_AMPLITUDE * (2.0 * std::f64::consts::PI * TONE_HZ * t).sin()) as f32
                })
                .collect();
            Waveform {
                samples,
                sample_rate: sr,
            }
        }
        Corruption::Noise => {
            let mut rng = stream_rng(seed, 3);
            let noise: Vec<f64> = (0..len)
                .map(|_| rand_distr::StandardNormal.sample(&mut rng))
                .collect();
            let noise_power = noise.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64;
            let signal_power = sample.audio.power();
            // Silent clips still get audible noise.
            let target = if signal_power > 0.0 { signal_power } else { 0.01 };
            let gain = if noise_power > 0.0 {
                (target / noise_power).sqrt()
            } else {
                0.0
            };
            let samples = sample
                .audio
                .samples
                .iter()
                .zip(&noise)
                .map(|(&s, &n)| (s as f64 + gain * n).clamp(-1.0, 1.0) as f32)
                .collect();
            Waveform {
                samples,
                sample_rate: sr,
            }
        }
    };
    Ok(ClipSample {
        id: sample.id.clone(),
        timeline: sample.timeline.clone(),
        video: sample.video.clone(),
        audio,
        corruption: mode,
    })
}
