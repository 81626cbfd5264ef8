//! Binary tensor container.
//!
//! Layout, all integers little-endian `u32`:
//! `magic[4] version header_len header(json) n_tensors`, then per tensor
//! `name_len name ndim dims[ndim] data(f32 LE)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::tensor::Tensor;

use super::{ModelConfig, ModelError, WeightStore};

pub const MODEL_MAGIC: [u8; 4] = *b"SHRP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type CResult<T> = std::result::Result<T, CheckpointError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> CResult<()> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Malformed(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialise a header and named tensors into the container byte layout.
pub fn encode_container<H: Serialize>(magic: [u8; 4], header: &H, tensors: &[(String, &Tensor)]) -> CResult<Vec<u8>> {
    let header = serde_json::to_vec(header).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let body: usize = tensors.iter().map(|(n, t)| 8 + n.len() + 4 * t.shape().len() + 4 * t.numel()).sum();
    let mut buf = Vec::with_capacity(16 + header.len() + body);
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut buf, header.len())?;
    buf.extend_from_slice(&header);
    put_u32(&mut buf, tensors.len())?;
    for (name, t) in tensors {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> CResult<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> CResult<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parse container bytes, checking the magic and version.
pub fn decode_container<H: DeserializeOwned>(magic: [u8; 4], bytes: &[u8]) -> CResult<(H, Vec<(String, Tensor)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let found = r.take(4, "magic")?;
    if found != magic {
        return Err(CheckpointError::BadMagic {
            expected: String::from_utf8_lossy(&magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let version = r.u32("version")? as u32;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = r.u32("header length")?;
    let header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let n = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = r.u32("tensor name length")?;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not utf-8".into()))?
            .to_string();
        let ndim = r.u32("tensor rank")?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u32("tensor dims")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
        let raw = r.take(numel, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((header, tensors))
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub fn write_container<H: Serialize>(
    path: impl AsRef<Path>,
    magic: [u8; 4],
    header: &H,
    tensors: &[(String, &Tensor)],
) -> CResult<()> {
    let path = path.as_ref();
    let bytes = encode_container(magic, header, tensors)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_container<H: DeserializeOwned>(
    path: impl AsRef<Path>,
    magic: [u8; 4],
) -> CResult<(H, Vec<(String, Tensor)>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_container(magic, &bytes)
}

pub fn save_checkpoint(ws: &WeightStore, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let named: Vec<(String, &Tensor)> = ws.named_tensors();
    write_container(path, MODEL_MAGIC, &ws.config, &named)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<WeightStore, ModelError> {
    let (config, tensors): (ModelConfig, _) = read_container(path, MODEL_MAGIC)?;
    config.validate()?;
    let expected: Vec<String> = super::init_model(&ModelConfig { seed: 0, ..config })?
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let names: Vec<&String> = tensors.iter().map(|(n, _)| n).collect();
    if names.len() != expected.len() || names.iter().zip(&expected).any(|(a, b)| *a != b) {
        return Err(CheckpointError::Malformed("tensor names do not match the config".into()).into());
    }
    WeightStore::from_ordered(config, tensors.into_iter().map(|(_, t)| t).collect())
}
