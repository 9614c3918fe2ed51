//! TGEB: the binary embedding container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic      b"TGEB"
//! version    u32
//! count      u64        number of essays
//! dim        u32        embedding width d
//! per essay:
//!   id_len   u16, then id_len bytes of UTF-8
//!   essay    d x f32
//!   tokens   u32 (n)
//!   matrix   n*d x f32, row-major
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::data::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TGEB";
pub const VERSION: u32 = 1;

pub fn write<W: Write>(mut w: W, bundles: &[EmbeddingBundle]) -> Result<()> {
    let dim = match bundles.first() {
        Some(b) => b.dim(),
        None => 0,
    };
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(bundles.len() as u64).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for b in bundles {
        if b.dim() != dim || b.token_matrix.cols() != dim {
            return Err(Error::Format(format!(
                "essay {:?} has width {} but the file uses {dim}",
                b.essay_id,
                b.dim()
            )));
        }
        let id = b.essay_id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::Format(format!("essay id {:?} too long", b.essay_id)))?;
        w.write_all(&id_len.to_le_bytes())?;
        w.write_all(id)?;
        write_f32s(&mut w, &b.essay_vec)?;
        w.write_all(&(b.token_count() as u32).to_le_bytes())?;
        write_f32s(&mut w, b.token_matrix.data())?;
    }
    Ok(())
}

fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<EmbeddingBundle>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("bad embedding magic".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported embedding format version {version}"
        )));
    }
    let count = read_u64(&mut r, "essay count")?;
    let dim = read_u32(&mut r, "dimension")? as usize;
    let mut out = Vec::new();
    for i in 0..count {
        let mut len = [0u8; 2];
        read_exact(&mut r, &mut len, "id length")?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(&mut r, &mut id, "id")?;
        let essay_id = String::from_utf8(id)
            .map_err(|_| Error::Format(format!("essay {i}: id is not UTF-8")))?;
        let essay_vec = read_f32s(&mut r, dim, "essay vector")?;
        let n = read_u32(&mut r, "token count")? as usize;
        let matrix = read_f32s(&mut r, n * dim, "token matrix")?;
        out.push(EmbeddingBundle {
            essay_id,
            essay_vec,
            token_matrix: Tensor::matrix(n, dim, matrix)?,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last essay".into()));
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Vec<EmbeddingBundle>> {
    let bytes = fs::read(path)?;
    read(bytes.as_slice())
}

pub fn write_file(path: &Path, bundles: &[EmbeddingBundle]) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf, bundles)?;
    fs::write(path, buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated embedding file ({what})")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, count: usize, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 4];
    read_exact(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}
