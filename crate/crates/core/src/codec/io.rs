//! `VRVQ` codebook files and `VTOK` token files.
//!
//! Token files carry the vocabulary size `K` in their header; the delay
//! layout's padding id is `K` itself.

use std::fs;
use std::path::Path;

use super::{RvqCodebooks, TokenGrid};
use crate::error::{Error, Result};
use crate::world::io::ByteReader;

pub const VRVQ_MAGIC: &[u8; 4] = b"VRVQ";
pub const VRVQ_VERSION: u16 = 1;
pub const VTOK_MAGIC: &[u8; 4] = b"VTOK";
pub const VTOK_VERSION: u16 = 1;

pub(crate) fn check_version(what: &str, path: &Path, expected: u16, found: u16) -> Result<()> {
    if expected != found {
        return Err(Error::Incompatible {
            what: format!("{what} {}", path.display()),
            expected: format!("v{expected}"),
            found: format!("v{found}"),
        });
    }
    Ok(())
}

pub fn encode_codebooks(books: &RvqCodebooks) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(VRVQ_MAGIC);
    out.extend_from_slice(&VRVQ_VERSION.to_le_bytes());
    out.extend_from_slice(&(books.n_q as u16).to_le_bytes());
    out.extend_from_slice(&(books.k as u32).to_le_bytes());
    out.extend_from_slice(&(books.frame_len as u32).to_le_bytes());
    out.extend_from_slice(&(books.hop as u32).to_le_bytes());
    for table in &books.codebooks {
        for v in table {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_codebooks(bytes: &[u8], path: &Path) -> Result<RvqCodebooks> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(VRVQ_MAGIC)?;
    check_version("codebook file", path, VRVQ_VERSION, r.u16()?)?;
    let n_q = r.u16()? as usize;
    let k = r.u32()? as usize;
    let frame_len = r.u32()? as usize;
    let hop = r.u32()? as usize;
    let codebooks = (0..n_q)
        .map(|_| r.f32s(k * frame_len))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let books = RvqCodebooks {
        n_q,
        k,
        frame_len,
        hop,
        codebooks,
    };
    books.validate()?;
    Ok(books)
}

pub fn encode_tokens(grid: &TokenGrid) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(VTOK_MAGIC);
    out.extend_from_slice(&VTOK_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.n_q as u16).to_le_bytes());
    out.extend_from_slice(&(grid.t_a as u32).to_le_bytes());
    out.extend_from_slice(&(grid.k as u32).to_le_bytes());
    for t in &grid.tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub fn decode_tokens(bytes: &[u8], path: &Path) -> Result<TokenGrid> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(VTOK_MAGIC)?;
    check_version("token file", path, VTOK_VERSION, r.u16()?)?;
    let n_q = r.u16()? as usize;
    let t_a = r.u32()? as usize;
    let k = r.u32()? as usize;
    let tokens = r.u16s(t_a * n_q)?;
    r.finish()?;
    TokenGrid::new(tokens, t_a, n_q, k)
}

pub fn write_codebooks(path: &Path, books: &RvqCodebooks) -> Result<()> {
    fs::write(path, encode_codebooks(books)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_codebooks(path: &Path) -> Result<RvqCodebooks> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_codebooks(&bytes, path)
}

pub fn write_tokens(path: &Path, grid: &TokenGrid) -> Result<()> {
    fs::write(path, encode_tokens(grid)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_tokens(path: &Path) -> Result<TokenGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_tokens(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_header_layout() {
        let grid = TokenGrid::new(vec![1, 2, 3, 0, 5, 6], 3, 2, 7).unwrap();
        let bytes = encode_tokens(&grid);
        assert_eq!(&bytes[..4], b"VTOK");
        assert_eq!(bytes.len(), 4 + 2 + 2 + 4 + 4 + 12);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 7);
        assert_eq!(decode_tokens(&bytes, Path::new("t")).unwrap(), grid);
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let grid = TokenGrid::new(vec![1], 1, 1, 4).unwrap();
        let mut bytes = encode_tokens(&grid);
        bytes[4] = 9;
        assert!(matches!(decode_tokens(&bytes, Path::new("t")), Err(Error::Incompatible { .. })));
    }
}
