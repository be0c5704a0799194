//! `VCKP` checkpoint files.
//!
//! Layout (little-endian): magic, version `u16`, a fixed configuration
//! block, the number of completed optimizer steps `u64`, then a tensor
//! directory. Each directory entry is a `u16` name length, the name bytes,
//! a `u8` rank, `u32` dimensions and `f32` data. Optimizer moments, when
//! present, are stored as extra entries prefixed `adam.m.` and `adam.v.`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::OptState;
use super::params::{Conditioning, ModelConfig, Params};
use crate::codec::io::check_version;
use crate::error::{Error, Result};
use crate::world::io::ByteReader;

pub const VCKP_MAGIC: &[u8; 4] = b"VCKP";
pub const VCKP_VERSION: u16 = 1;

const MOMENT_PREFIXES: [&str; 2] = ["adam.m.", "adam.v."];

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        put_u32(out, d);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(params: &Params<f32>, state: Option<&OptState>) -> Vec<u8> {
    let c = &params.cfg;
    let mut out = Vec::with_capacity(params.data.len() * 4 * if state.is_some() { 3 } else { 1 } + 256);
    out.extend_from_slice(VCKP_MAGIC);
    out.extend_from_slice(&VCKP_VERSION.to_le_bytes());
    for v in [c.k, c.n_q, c.d_a, c.d_v, c.d_raw, c.d_vis_hidden, c.n_layer, c.n_head, c.ffn()] {
        put_u32(&mut out, v);
    }
    out.push(match c.conditioning {
        Conditioning::Fusion => 0,
        Conditioning::Prepend => 1,
    });
    out.extend_from_slice(&c.rope_base.to_le_bytes());
    out.extend_from_slice(&c.norm_eps.to_le_bytes());
    out.extend_from_slice(&state.map_or(0u64, |s| s.step).to_le_bytes());

    let n_tensors = params.layout.tensors.len() * if state.is_some() { 3 } else { 1 };
    put_u32(&mut out, n_tensors);
    for t in &params.layout.tensors {
        put_tensor(&mut out, &t.name, &t.shape, params.get(t.span));
    }
    if let Some(s) = state {
        for (prefix, moments) in MOMENT_PREFIXES.iter().zip([&s.m, &s.v]) {
            for t in &params.layout.tensors {
                put_tensor(&mut out, &format!("{prefix}{}", t.name), &t.shape, &moments[t.span.range()]);
            }
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Params<f32>, Option<OptState>)> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(VCKP_MAGIC)?;
    check_version("checkpoint", path, VCKP_VERSION, r.u16()?)?;
    let mut dims = [0usize; 9];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let conditioning = match r.u8()? {
        0 => Conditioning::Fusion,
        1 => Conditioning::Prepend,
        other => return Err(Error::format(path, format!("unknown conditioning mode {other}"))),
    };
    let cfg = ModelConfig {
        k: dims[0],
        n_q: dims[1],
        d_a: dims[2],
        d_v: dims[3],
        d_raw: dims[4],
        d_vis_hidden: dims[5],
        n_layer: dims[6],
        n_head: dims[7],
        ffn_hidden: dims[8],
        conditioning,
        rope_base: r.f64()?,
        norm_eps: r.f64()?,
    };
    cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
    let step = r.u64()?;
    let mut params = Params::from_data(cfg.clone(), vec![0.0; super::params::Layout::new(&cfg).total])?;
    let mut m = vec![0.0f32; params.data.len()];
    let mut v = vec![0.0f32; params.data.len()];
    let mut seen = vec![[false; 3]; params.layout.tensors.len()];

    let n = r.u32()? as usize;
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let (slot, base) = match MOMENT_PREFIXES.iter().position(|p| name.starts_with(p)) {
            Some(i) => (i + 1, &name[MOMENT_PREFIXES[i].len()..]),
            None => (0, name.as_str()),
        };
        let idx = params
            .layout
            .tensors
            .iter()
            .position(|t| t.name == base)
            .ok_or_else(|| Error::format(path, format!("unexpected tensor {name}")))?;
        let info = &params.layout.tensors[idx];
        if info.shape != shape {
            return Err(Error::format(
                path,
                format!("tensor {name} has shape {shape:?}, expected {:?}", info.shape),
            ));
        }
        if seen[idx][slot] {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
        seen[idx][slot] = true;
        let data = r.f32s(info.span.len)?;
        let dst = match slot {
            0 => &mut params.data,
            1 => &mut m,
            _ => &mut v,
        };
        dst[info.span.range()].copy_from_slice(&data);
    }
    r.finish()?;
    if let Some(t) = seen.iter().position(|s| !s[0]) {
        return Err(Error::format(path, format!("missing tensor {}", params.layout.tensors[t].name)));
    }
    let has_m = seen.iter().all(|s| s[1]);
    let has_v = seen.iter().all(|s| s[2]);
    let any_moment = seen.iter().any(|s| s[1] || s[2]);
    let state = if has_m && has_v {
        Some(OptState { m, v, step })
    } else if any_moment {
        return Err(Error::format(path, "incomplete optimizer state"));
    } else {
        None
    };
    if !params.is_finite() {
        return Err(Error::format(path, "non-finite parameter values"));
    }
    Ok((params, state))
}

pub fn write_checkpoint(path: &Path, params: &Params<f32>, state: Option<&OptState>) -> Result<()> {
    fs::write(path, encode_checkpoint(params, state)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_checkpoint(path: &Path) -> Result<(Params<f32>, Option<OptState>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes, path)
}

/// Hex SHA-256 of the encoded parameters (optimizer state excluded).
pub fn params_hash(params: &Params<f32>) -> String {
    hex::encode(Sha256::digest(encode_checkpoint(params, None)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::train::tests::tiny_cfg;

    #[test]
    fn roundtrip_with_and_without_state() {
        let p = Params::init(&tiny_cfg(Conditioning::Prepend), 3).unwrap();
        let path = Path::new("mem.vckp");
        let (q, s) = decode_checkpoint(&encode_checkpoint(&p, None), path).unwrap();
        assert_eq!(q, p);
        assert!(s.is_none());

        let mut st = OptState::new(p.data.len());
        st.step = 42;
        st.m[3] = 0.5;
        st.v[7] = 0.25;
        let (q, s) = decode_checkpoint(&encode_checkpoint(&p, Some(&st)), path).unwrap();
        assert_eq!(q, p);
        assert_eq!(s.unwrap(), st);
    }

    #[test]
    fn header_layout() {
        let p = Params::init(&tiny_cfg(Conditioning::Fusion), 0).unwrap();
        let b = encode_checkpoint(&p, None);
        assert_eq!(&b[..4], b"VCKP");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 8);
        // 9 u32 + u8 + 2 f64 + u64 after the 6-byte preamble.
        let dir = 6 + 36 + 1 + 16 + 8;
        assert_eq!(u32::from_le_bytes(b[dir..dir + 4].try_into().unwrap()) as usize, p.layout.tensors.len());
        let name_len = u16::from_le_bytes([b[dir + 4], b[dir + 5]]) as usize;
        assert_eq!(&b[dir + 6..dir + 6 + name_len], b"embed.0");
    }

    #[test]
    fn version_and_truncation_errors() {
        let p = Params::init(&tiny_cfg(Conditioning::Fusion), 0).unwrap();
        let mut b = encode_checkpoint(&p, None);
        let path = Path::new("x.vckp");
        assert!(matches!(
            decode_checkpoint(&b[..b.len() - 1], path),
            Err(Error::Format { .. })
        ));
        b[4] = 9;
        assert!(matches!(decode_checkpoint(&b, path), Err(Error::Incompatible { .. })));
    }

    #[test]
    fn hash_ignores_optimizer_state() {
        let p = Params::init(&tiny_cfg(Conditioning::Fusion), 0).unwrap();
        let h = params_hash(&p);
        assert_eq!(h.len(), 64);
        assert_eq!(h, params_hash(&p.clone()));
    }
}
