//! EMB1 per-utterance frame matrices.
//!
//! Layout: magic `EMB1`, `u32` LE frame count, `u32` LE dimension, then
//! `n_frames * dim` little-endian `f32` values, frame-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";

/// Row-major `n_frames x dim` matrix of acoustic frame embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    n_frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Frames {
    pub fn new(n_frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_frames * dim {
            return Err(Error::Format(format!(
                "frame buffer has {} values, expected {n_frames}x{dim}",
                data.len()
            )));
        }
        Ok(Frames { n_frames, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Format("ragged frame rows".into()));
        }
        Frames::new(rows.len(), dim, rows.concat())
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Mean over frames, one value per dimension.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for t in 0..self.n_frames {
            for (o, v) in out.iter_mut().zip(self.frame(t)) {
                *o += v;
            }
        }
        let n = self.n_frames as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

pub fn write_emb1<W: Write>(frames: &Frames, mut writer: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * frames.data.len());
    buf.extend_from_slice(EMB1_MAGIC);
    buf.extend_from_slice(&(frames.n_frames as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.dim as u32).to_le_bytes());
    for v in &frames.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    writer.write_all(&buf)
}

pub fn read_emb1<R: Read>(mut reader: R) -> Result<Frames> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("EMB1 read: {e}")))?;
    parse_emb1(&bytes)
}

pub fn parse_emb1(bytes: &[u8]) -> Result<Frames> {
    if bytes.len() < 12 || &bytes[..4] != EMB1_MAGIC {
        return Err(Error::Format("missing EMB1 header".into()));
    }
    let n_frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = n_frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("EMB1 dimensions overflow".into()))?;
    let body = &bytes[12..];
    if body.len() != expected {
        return Err(Error::Format(format!(
            "EMB1 body is {} bytes, header declares {n_frames}x{dim} ({expected} bytes)",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Frames::new(n_frames, dim, data)
}

pub fn load_emb1(path: impl AsRef<Path>) -> Result<Frames> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_emb1(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_emb1(frames: &Frames, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_emb1(frames, &mut buf).expect("writing to a Vec cannot fail");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
