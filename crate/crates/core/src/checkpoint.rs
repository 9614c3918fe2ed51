//! TGMC: the model checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic           b"TGMC"
//! version         u32
//! config block:
//!   d_in              u32
//!   num_layers        u32
//!   num_heads         u32
//!   d_head            u32
//!   attention_slope   f64
//!   activation_slope  f64
//!   trait_count       u32
//!   tensor_count      u32
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rank u32, dims rank x u64
//!   data f32 row-major
//! ```
//!
//! Tensors are stored in [`ScoringModel::named`] order. Values are narrowed
//! to `f32` on write.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TRAIT_COUNT;
use crate::error::{Error, Result};
use crate::essay_stream::EssayHeadParams;
use crate::gat::{init_params_with, GatConfig};
use crate::model::ScoringModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TGMC";
pub const VERSION: u32 = 1;

pub fn write<W: Write>(mut w: W, model: &ScoringModel) -> Result<()> {
    let c = &model.config;
    let named = model.named();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [model.d_in, c.num_layers, c.num_heads, c.d_head] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.attention_slope.to_le_bytes());
    buf.extend_from_slice(&c.activation_slope.to_le_bytes());
    buf.extend_from_slice(&(TRAIT_COUNT as u32).to_le_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<ScoringModel> {
    let mut magic = [0u8; 4];
    take(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32_le(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let d_in = u32_le(&mut r)? as usize;
    let config = GatConfig {
        num_layers: u32_le(&mut r)? as usize,
        num_heads: u32_le(&mut r)? as usize,
        d_head: u32_le(&mut r)? as usize,
        attention_slope: f64_le(&mut r)?,
        activation_slope: f64_le(&mut r)?,
    };
    let traits = u32_le(&mut r)? as usize;
    if traits != TRAIT_COUNT {
        return Err(Error::Format(format!(
            "checkpoint scores {traits} traits, expected {TRAIT_COUNT}"
        )));
    }
    config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    if d_in == 0 || config.num_layers > 64 || config.num_heads > 1024 {
        return Err(Error::Format("implausible checkpoint config".into()));
    }

    // Skeleton with the right structure; every tensor is overwritten below.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = ScoringModel {
        gat: init_params_with(&config, d_in, &mut rng),
        essay: EssayHeadParams::init(d_in, &mut rng),
        config,
        d_in,
    };

    let count = u32_le(&mut r)? as usize;
    let expected: Vec<(String, Vec<usize>)> = model
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, config implies {}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let name_len = u32_le(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::Format("tensor name too long".into()));
        }
        let mut name = vec![0u8; name_len];
        take(&mut r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if &name != want_name {
            return Err(Error::Format(format!(
                "expected tensor {want_name}, found {name}"
            )));
        }
        let rank = u32_le(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(u64_le(&mut r)? as usize);
        }
        if &shape != want_shape {
            return Err(Error::Format(format!(
                "tensor {name} has shape {shape:?}, expected {want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        take(&mut r, &mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        values.push(Tensor::new(shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    for (slot, v) in model.values_mut().into_iter().zip(values) {
        *slot = v;
    }
    Ok(model)
}

pub fn write_file(path: &Path, model: &ScoringModel) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf, model)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<ScoringModel> {
    let bytes = fs::read(path)?;
    read(bytes.as_slice())
}

fn take<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn u32_le<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    take(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn u64_le<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    take(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn f64_le<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    take(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ScoringModel {
        ScoringModel::init(
            GatConfig {
                d_head: 3,
                ..GatConfig::default()
            },
            5,
            17,
        )
        .unwrap()
    }

    /// Narrows every parameter to f32 precision.
    fn narrowed(m: &ScoringModel) -> ScoringModel {
        let vals: Vec<Tensor> = m
            .named()
            .into_iter()
            .map(|(_, t)| {
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f32 as f64).collect()).unwrap()
            })
            .collect();
        m.with_values(&vals).unwrap()
    }

    #[test]
    fn round_trip() {
        let m = model();
        let mut buf = Vec::new();
        write(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"TGMC");
        let back = read(buf.as_slice()).unwrap();
        assert_eq!(back, narrowed(&m));
        // second trip is exact
        let mut buf2 = Vec::new();
        write(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn corrupted_inputs() {
        let m = model();
        let mut buf = Vec::new();
        write(&mut buf, &m).unwrap();

        let mut bad = buf.clone();
        bad[1] = b'X';
        assert_eq!(read(bad.as_slice()).unwrap_err().to_string(), "bad checkpoint magic");

        assert!(read(&buf[..buf.len() - 1]).is_err());

        let mut extra = buf.clone();
        extra.push(0);
        assert!(read(extra.as_slice()).is_err());

        // change d_head in the config block: tensor shapes no longer match
        let mut wrong = buf.clone();
        wrong[20..24].copy_from_slice(&4u32.to_le_bytes());
        assert!(read(wrong.as_slice()).is_err());
    }
}
