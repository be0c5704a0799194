//! C ABI over the syncgen library.
//!
//! Objects cross the boundary as opaque handles created by `*_read` and
//! released by the matching `*_free`. Every fallible call returns an
//! [`SgStatus`]; on failure a description is available from
//! [`sg_last_error_message`] until the next failing call on the same thread.
//! Output pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use syncgen::codec::io::read_codebooks;
use syncgen::codec::{roundtrip_snr, RvqCodebooks};
use syncgen::metrics::{estimate_offset, frechet_distance, kl_divergence};
use syncgen::model::{parameter_count, read_checkpoint, Params};
use syncgen::sampler::{cfg_mix, generate, SampleConfig};
use syncgen::world::{Event, EventTimeline, VideoFeatureStream, Waveform};
use syncgen::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    InvalidArgument = 1,
    NullPointer = 2,
    Incompatible = 3,
    NumericFailure = 4,
    Io = 5,
    Format = 6,
    NoSamples = 7,
    Undefined = 8,
    /// The output buffer is too short; the required length was written.
    BufferTooSmall = 9,
    Panic = 10,
}

/// Fitted residual codebooks.
pub struct SgCodebooks(RvqCodebooks);

/// Model parameters loaded from a checkpoint.
pub struct SgModel(Params<f32>);

/// Sampling settings for [`sg_generate`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SgSampleParams {
    pub gamma: f64,
    pub temperature: f64,
    /// 0 disables top-k filtering.
    pub top_k: u32,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::InvalidState(_) | Error::InvalidToken { .. } | Error::MalformedGrid(_) => {
                SgStatus::InvalidArgument
            }
            Error::Incompatible { .. } => SgStatus::Incompatible,
            Error::NumericOverflow(_) => SgStatus::NumericFailure,
            Error::Io { .. } => SgStatus::Io,
            Error::Format { .. } => SgStatus::Format,
            Error::NoSamples(_) => SgStatus::NoSamples,
            Error::UndefinedSnr | Error::UndefinedOffset(_) => SgStatus::Undefined,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SgStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SgStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn sg_sample_params_default() -> SgSampleParams {
    let d = SampleConfig::default();
    SgSampleParams {
        gamma: d.gamma,
        temperature: d.temperature,
        top_k: d.top_k as u32,
        seed: d.seed,
        duration_s: d.duration_s,
        sample_rate: d.sample_rate,
    }
}

/// # Safety
/// `path_c` must be a NUL-terminated string and `out_handle` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_codebooks_read(path_c: *const c_char, out_handle: *mut *mut SgCodebooks) -> SgStatus {
    guard(|| {
        let p = path(path_c)?;
        let o = out(out_handle, "out_handle")?;
        let books = read_codebooks(&p)?;
        *o = Box::into_raw(Box::new(SgCodebooks(books)));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`sg_codebooks_read`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sg_codebooks_free(handle: *mut SgCodebooks) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must be live; the output pointers writable.
#[no_mangle]
pub unsafe extern "C" fn sg_codebooks_shape(
    handle: *const SgCodebooks,
    k: *mut usize,
    n_q: *mut usize,
    frame_len: *mut usize,
) -> SgStatus {
    guard(|| {
        let b = &handle.as_ref().ok_or_else(|| null("handle"))?.0;
        let (k, n_q, frame_len) = (out(k, "k")?, out(n_q, "n_q")?, out(frame_len, "frame_len")?);
        *k = b.k;
        *n_q = b.n_q;
        *frame_len = b.frame_len;
        Ok(())
    })
}

/// Encode-decode SNR in dB of a mono signal.
///
/// # Safety
/// `samples` must hold `len` floats; `handle` must be live.
#[no_mangle]
pub unsafe extern "C" fn sg_codec_roundtrip_snr(
    handle: *const SgCodebooks,
    samples: *const f32,
    len: usize,
    sample_rate: u32,
    out_db: *mut f64,
) -> SgStatus {
    guard(|| {
        let b = &handle.as_ref().ok_or_else(|| null("handle"))?.0;
        let wave = Waveform {
            samples: slice(samples, len, "samples")?.to_vec(),
            sample_rate,
        };
        let o = out(out_db, "out_db")?;
        *o = roundtrip_snr(&wave, b)?;
        Ok(())
    })
}

/// # Safety
/// `path_c` must be a NUL-terminated string and `out_handle` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_model_read(path_c: *const c_char, out_handle: *mut *mut SgModel) -> SgStatus {
    guard(|| {
        let p = path(path_c)?;
        let o = out(out_handle, "out_handle")?;
        let (params, _) = read_checkpoint(&p)?;
        *o = Box::into_raw(Box::new(SgModel(params)));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`sg_model_read`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sg_model_free(handle: *mut SgModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must be live and `out_count` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_model_parameter_count(handle: *const SgModel, out_count: *mut usize) -> SgStatus {
    guard(|| {
        let m = &handle.as_ref().ok_or_else(|| null("handle"))?.0;
        *out(out_count, "out_count")? = parameter_count(&m.cfg);
        Ok(())
    })
}

/// Generates audio for a row-major `t_v` x `d_raw` feature matrix. When
/// `capacity` is too small nothing is copied, `out_len` receives the
/// required length and `BufferTooSmall` is returned.
///
/// # Safety
/// Handles must be live, `video` must hold `t_v * d_raw` floats and
/// `out_samples` `capacity` floats.
#[no_mangle]
pub unsafe extern "C" fn sg_generate(
    model: *const SgModel,
    books: *const SgCodebooks,
    video: *const f32,
    t_v: usize,
    d_raw: usize,
    fps: f64,
    params: *const SgSampleParams,
    out_samples: *mut f32,
    capacity: usize,
    out_len: *mut usize,
) -> SgStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let b = &books.as_ref().ok_or_else(|| null("books"))?.0;
        let sp = params.as_ref().ok_or_else(|| null("params"))?;
        let n = t_v
            .checked_mul(d_raw)
            .ok_or_else(|| Failure(SgStatus::InvalidArgument, "video size overflows".into()))?;
        let stream = VideoFeatureStream {
            features: slice(video, n, "video")?.to_vec(),
            t_v,
            d_raw,
            fps,
        };
        let cfg = SampleConfig {
            gamma: sp.gamma,
            temperature: sp.temperature,
            top_k: sp.top_k as usize,
            seed: sp.seed,
            duration_s: sp.duration_s,
            sample_rate: sp.sample_rate,
        };
        let len_out = out(out_len, "out_len")?;
        let g = generate(m, b, &stream, &cfg)?;
        let wave = &g.waveform.samples;
        *len_out = wave.len();
        if capacity < wave.len() {
            return Err(Failure(
                SgStatus::BufferTooSmall,
                format!("need {} samples, buffer holds {capacity}", wave.len()),
            ));
        }
        if out_samples.is_null() {
            return Err(null("out_samples"));
        }
        ptr::copy_nonoverlapping(wave.as_ptr(), out_samples, wave.len());
        Ok(())
    })
}

/// Guidance mix of two log-softmax vectors of length `n`, renormalized.
///
/// # Safety
/// All three pointers must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_cfg_mix(
    logp_cond: *const f64,
    logp_uncond: *const f64,
    n: usize,
    gamma: f64,
    out_scores: *mut f64,
) -> SgStatus {
    guard(|| {
        if n == 0 {
            return Err(Failure(SgStatus::InvalidArgument, "n must be positive".into()));
        }
        let lc = slice(logp_cond, n, "logp_cond")?;
        let lu = slice(logp_uncond, n, "logp_uncond")?;
        if out_scores.is_null() {
            return Err(null("out_scores"));
        }
        let mixed = cfg_mix(lc, lu, gamma);
        ptr::copy_nonoverlapping(mixed.as_ptr(), out_scores, n);
        Ok(())
    })
}

/// # Safety
/// `p` and `q` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_kl_divergence(p: *const f64, q: *const f64, n: usize, out_kl: *mut f64) -> SgStatus {
    guard(|| {
        let (p, q) = (slice(p, n, "p")?, slice(q, n, "q")?);
        *out(out_kl, "out_kl")? = kl_divergence(p, q)?;
        Ok(())
    })
}

/// Fréchet distance between two row-major sets of `dim`-vectors.
///
/// # Safety
/// `a` must hold `n_a * dim` doubles and `b` `n_b * dim`.
#[no_mangle]
pub unsafe extern "C" fn sg_frechet_distance(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    dim: usize,
    out_fd: *mut f64,
) -> SgStatus {
    guard(|| {
        if dim == 0 {
            return Err(Failure(SgStatus::InvalidArgument, "dim must be positive".into()));
        }
        let rows = |p: *const f64, n: usize, what: &str| -> Result<Vec<Vec<f64>>, Failure> {
            let total = n
                .checked_mul(dim)
                .ok_or_else(|| Failure(SgStatus::InvalidArgument, "set size overflows".into()))?;
            Ok(slice(p, total, what)?.chunks(dim).map(<[f64]>::to_vec).collect())
        };
        let fd = frechet_distance(&rows(a, n_a, "a")?, &rows(b, n_b, "b")?)?;
        *out(out_fd, "out_fd")? = fd;
        Ok(())
    })
}

/// Offset of `samples` against reference onsets at `event_times` (seconds).
///
/// # Safety
/// `samples` must hold `len` floats and `event_times` `n_events` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_estimate_offset(
    samples: *const f32,
    len: usize,
    sample_rate: u32,
    event_times: *const f64,
    n_events: usize,
    out_offset_ms: *mut f64,
    out_class: *mut usize,
) -> SgStatus {
    guard(|| {
        let wave = Waveform {
            samples: slice(samples, len, "samples")?.to_vec(),
            sample_rate,
        };
        let events = slice(event_times, n_events, "event_times")?
            .iter()
            .map(|&t| Event {
                t,
                class_id: 0,
                amplitude: 1.0,
            })
            .collect();
        let timeline = EventTimeline::from_events(wave.duration_s(), 2, events)?;
        let (o_ms, o_class) = (out(out_offset_ms, "out_offset_ms")?, out(out_class, "out_class")?);
        let est = estimate_offset(&wave, &timeline)?;
        *o_ms = est.offset_ms;
        *o_class = est.class_index;
        Ok(())
    })
}
