//! On-disk formats for clips: 16-bit PCM WAV audio, `VFEA` feature streams,
//! and the JSON Lines dataset manifest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClipSample, Corruption, EventTimeline, VideoFeatureStream, Waveform};
use crate::error::{Error, Result};

pub const VFEA_MAGIC: &[u8; 4] = b"VFEA";
pub const VFEA_VERSION: u16 = 1;

pub fn f32_to_pcm16(v: f32) -> i16 {
    (v.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn pcm16_to_f32(v: i16) -> f32 {
    v as f32 / 32767.0
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::format(path, e.to_string()))?;
    for &s in &wave.samples {
        writer
            .write_sample(f32_to_pcm16(s))
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::format(path, "expected mono 16-bit PCM"));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(pcm16_to_f32))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Serializes a feature stream. The frame rate is not part of the format.
pub fn encode_vfea(stream: &VideoFeatureStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + stream.features.len() * 4);
    out.extend_from_slice(VFEA_MAGIC);
    out.extend_from_slice(&VFEA_VERSION.to_le_bytes());
    out.extend_from_slice(&(stream.t_v as u32).to_le_bytes());
    out.extend_from_slice(&(stream.d_raw as u32).to_le_bytes());
    for v in &stream.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_vfea(bytes: &[u8], fps: f64, path: &Path) -> Result<VideoFeatureStream> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(VFEA_MAGIC)?;
    let version = r.u16()?;
    if version != VFEA_VERSION {
        return Err(Error::Incompatible {
            what: format!("feature stream {}", path.display()),
            expected: format!("VFEA v{VFEA_VERSION}"),
            found: format!("VFEA v{version}"),
        });
    }
    let t_v = r.u32()? as usize;
    let d_raw = r.u32()? as usize;
    let features = r.f32s(t_v * d_raw)?;
    r.finish()?;
    Ok(VideoFeatureStream {
        features,
        t_v,
        d_raw,
        fps,
    })
}

pub fn write_vfea(path: &Path, stream: &VideoFeatureStream) -> Result<()> {
    fs::write(path, encode_vfea(stream)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_vfea(path: &Path, fps: f64) -> Result<VideoFeatureStream> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_vfea(&bytes, fps, path)
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        ByteReader { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::format(
                self.path,
                format!("expected magic {:?}", std::str::from_utf8(magic).unwrap_or("?")),
            ));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn u16s(&mut self, n: usize) -> Result<Vec<u16>> {
        let raw = self.take(n.checked_mul(2).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPaths {
    pub audio: String,
    pub video: String,
    pub timeline: String,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub seed: u64,
    pub duration_s: f64,
    pub corruption: Corruption,
    pub paths: ClipPaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
    /// Lines that failed to parse, with their 1-based line numbers.
    pub skipped: Vec<(usize, String)>,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Manifest {
        let mut records = Vec::new();
        let mut skipped = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<ManifestRecord>(line) {
                Ok(r) => records.push(r),
                Err(e) => {
                    log::warn!("manifest line {}: {e}; skipped", i + 1);
                    skipped.push((i + 1, e.to_string()));
                }
            }
        }
        Manifest {
            records,
            base_dir: base_dir.into(),
            skipped,
        }
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            text.push_str(&line);
            text.push('\n');
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest::parse(&text, base))
    }

    pub fn to_jsonl(records: &[ManifestRecord]) -> String {
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r).expect("manifest record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(path: &Path, records: &[ManifestRecord]) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        w.write_all(Manifest::to_jsonl(records).as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Loads the clip behind a record.
    pub fn load_clip(&self, record: &ManifestRecord, fps: f64) -> Result<ClipSample> {
        let audio = read_wav(&self.resolve(&record.paths.audio))?;
        let video = read_vfea(&self.resolve(&record.paths.video), fps)?;
        let tl_path = self.resolve(&record.paths.timeline);
        let text = fs::read_to_string(&tl_path)
            .map_err(|e| Error::io(format!("reading {}", tl_path.display()), e))?;
        let timeline: EventTimeline =
            serde_json::from_str(&text).map_err(|e| Error::format(&tl_path, e.to_string()))?;
        Ok(ClipSample {
            id: record.id.clone(),
            timeline,
            video,
            audio,
            corruption: record.corruption,
        })
    }
}

/// Writes a clip's three files under `dir` and returns its manifest record.
pub fn write_clip(dir: &Path, clip: &ClipSample, seed: u64) -> Result<ManifestRecord> {
    let paths = ClipPaths {
        audio: format!("audio/{}.wav", clip.id),
        video: format!("video/{}.vfea", clip.id),
        timeline: format!("timeline/{}.json", clip.id),
    };
    for sub in ["audio", "video", "timeline"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(format!("creating {sub}"), e))?;
    }
    write_wav(&dir.join(&paths.audio), &clip.audio)?;
    write_vfea(&dir.join(&paths.video), &clip.video)?;
    let tl = serde_json::to_string_pretty(&clip.timeline).expect("timeline serializes");
    fs::write(dir.join(&paths.timeline), tl).map_err(|e| Error::io("writing timeline", e))?;
    Ok(ManifestRecord {
        id: clip.id.clone(),
        seed,
        duration_s: clip.timeline.duration_s,
        corruption: clip.corruption,
        paths,
        similarity: None,
    })
}
