//! `SBTW` weight files: magic, `u32` version, `u32` tensor count, then per
//! tensor a `u32` name length, UTF-8 name, `u32` rank, `u32` extents and a
//! little-endian `f32` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::config::ModelConfig;
use super::net::Model;
use crate::error::{Result, SbtError};
use crate::tensor::{Float, Tensor};

pub const MAGIC: [u8; 4] = *b"SBTW";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 1 << 12;
const MAX_RANK: usize = 8;
const MAX_ELEMS: usize = 1 << 30;

fn format_err(msg: impl Into<String>) -> SbtError {
    SbtError::Format(msg.into())
}

pub fn write_tensors<'a, W: Write>(
    w: &mut W,
    tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err(format!("truncated while reading {what}")),
        _ => SbtError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = read_u32(r, "tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let len = read_u32(r, "name length")? as usize;
        if len > MAX_NAME {
            return Err(format_err(format!("tensor {i}: name length {len}")));
        }
        let mut name = vec![0u8; len];
        read_exact(r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| format_err(format!("tensor {i}: name is not UTF-8")))?;
        let rank = read_u32(r, "rank")? as usize;
        if rank > MAX_RANK {
            return Err(format_err(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r, "extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_ELEMS)
            .ok_or_else(|| format_err(format!("{name}: shape {shape:?} too large")))?;
        let mut bytes = vec![0u8; numel * 4];
        read_exact(r, &mut bytes, &name)?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = Tensor::new(&shape, data).map_err(|e| format_err(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Outcome of a by-name weight load.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// In the file, absent from the model.
    pub skipped: Vec<String>,
    /// In the model, absent from the file; these keep their current values.
    pub missing: Vec<String>,
}

impl LoadReport {
    pub fn is_complete(&self) -> bool {
        self.skipped.is_empty() && self.missing.is_empty()
    }
}

impl<F: Float> Model<F> {
    pub fn write_weights<W: Write>(&self, w: &mut W) -> Result<()> {
        let cast: Vec<(&str, Tensor<f32>)> = self.store().iter().map(|(_, n, t)| (n, t.cast())).collect();
        write_tensors(w, cast.iter().map(|(n, t)| (*n, t)))
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_weights(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Copies every same-named tensor from the stream into the model. Shape
    /// disagreement on a shared name is a load error and leaves the model
    /// unchanged.
    pub fn read_weights<R: Read>(&mut self, r: &mut R) -> Result<LoadReport> {
        let tensors = read_tensors(r)?;
        let mut report = LoadReport::default();
        let mut updates = Vec::new();
        for (name, t) in tensors {
            match self.store().id(&name) {
                Some(id) => {
                    let want = self.store().get(id).shape();
                    if want != t.shape() {
                        return Err(SbtError::Load(format!("{name}: file shape {:?}, model shape {want:?}", t.shape())));
                    }
                    updates.push((id, t));
                    report.loaded.push(name);
                }
                None => report.skipped.push(name),
            }
        }
        report.missing = self
            .store()
            .iter()
            .filter(|(_, n, _)| !report.loaded.iter().any(|l| l == n))
            .map(|(_, n, _)| n.to_string())
            .collect();
        for (id, t) in updates {
            *self.store_mut().get_mut(id) = t.cast();
        }
        Ok(report)
    }

    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<LoadReport> {
        self.read_weights(&mut BufReader::new(File::open(path)?))
    }
}

/// Path of the model-config sidecar stored next to a weight file.
pub fn sidecar_path(weights: impl AsRef<Path>) -> PathBuf {
    let mut s = weights.as_ref().as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

impl Model<f32> {
    /// Writes the weights and a `.toml` sidecar with the model config.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_weights(&path)?;
        std::fs::write(sidecar_path(&path), self.config().to_toml())?;
        Ok(())
    }

    /// Rebuilds the model from the sidecar config and loads every tensor;
    /// a partial match is a load error.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(sidecar_path(&path))?;
        let cfg = ModelConfig::from_toml(&text)?;
        let mut model = Model::new(&cfg, 0)?;
        let report = model.load_weights(&path)?;
        if !report.is_complete() {
            return Err(SbtError::Load(format!(
                "weights do not match the config: {} missing, {} unexpected",
                report.missing.len(),
                report.skipped.len()
            )));
        }
        Ok(model)
    }
}
