//! Lossless tensor codecs and the `THDX` container.
//!
//! All codecs share one pipeline. Each chunk of `chunk_elements` elements is
//! transformed (identity, XOR against a base, or wrapping subtraction with a
//! sign interleave), split into byte planes (plane `k` holds byte `k` of every
//! element), and each plane is compressed on its own by the backend. Chunks are
//! independent, so any number of workers produces identical output.

mod blob;
mod transform;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use blob::{Backend, DeltaBlob, BLOB_MAGIC, BLOB_VERSION};

use crate::error::{Error, Result};
use crate::fingerprint::TensorDigest;
use crate::format::DType;

pub const DEFAULT_CHUNK_ELEMENTS: u32 = 4 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecId {
    Raw,
    Standalone,
    TensorX,
    Fmpp,
}

impl CodecId {
    pub fn code(self) -> u8 {
        match self {
            CodecId::Raw => 0,
            CodecId::Standalone => 1,
            CodecId::TensorX => 2,
            CodecId::Fmpp => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => CodecId::Raw,
            1 => CodecId::Standalone,
            2 => CodecId::TensorX,
            3 => CodecId::Fmpp,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CodecId::Raw => "raw",
            CodecId::Standalone => "standalone",
            CodecId::TensorX => "tensorx",
            CodecId::Fmpp => "fmpp",
        }
    }

    /// Whether blobs of this codec reference a base tensor.
    pub fn is_delta(self) -> bool {
        matches!(self, CodecId::TensorX | CodecId::Fmpp)
    }
}

impl fmt::Display for CodecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodecId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "raw" => CodecId::Raw,
            "standalone" => CodecId::Standalone,
            "tensorx" | "tx" => CodecId::TensorX,
            "fmpp" | "fm++" => CodecId::Fmpp,
            other => return Err(Error::Codec(format!("unknown codec {other:?}"))),
        })
    }
}

fn check_inputs(target: &[u8], base: Option<&[u8]>, dtype: DType, chunk_elements: u32) -> Result<()> {
    if chunk_elements == 0 {
        return Err(Error::Codec("chunk_elements must be positive".into()));
    }
    if !target.len().is_multiple_of(dtype.size()) {
        return Err(Error::Codec(format!(
            "{} bytes is not a whole number of {dtype} elements",
            target.len()
        )));
    }
    if let Some(base) = base {
        if base.len() != target.len() {
            return Err(Error::Codec(format!(
                "target is {} bytes but base is {}",
                target.len(),
                base.len()
            )));
        }
    }
    Ok(())
}

fn encode(
    codec: CodecId,
    target: &[u8],
    base: Option<&[u8]>,
    dtype: DType,
    chunk_elements: u32,
    backend: Backend,
) -> Result<DeltaBlob> {
    check_inputs(target, base, dtype, chunk_elements)?;
    let size = dtype.size();
    let chunk_bytes = chunk_elements as usize * size;
    let chunks: Vec<Vec<Vec<u8>>> = target
        .par_chunks(chunk_bytes)
        .enumerate()
        .map(|(c, t)| {
            let b = base.map(|b| &b[c * chunk_bytes..c * chunk_bytes + t.len()]);
            let planes = transform::forward(codec, t, b, size);
            planes.iter().map(|p| backend.compress(p)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut chunk_lengths = Vec::with_capacity(chunks.len() * size);
    let mut payload = Vec::with_capacity(chunks.iter().flatten().map(Vec::len).sum());
    for plane in chunks.iter().flatten() {
        chunk_lengths.push(plane.len() as u32);
        payload.extend_from_slice(plane);
    }
    Ok(DeltaBlob {
        codec,
        dtype,
        backend,
        element_count: (target.len() / size) as u64,
        chunk_elements,
        base: base.map(TensorDigest::of).unwrap_or(TensorDigest::ZERO),
        chunk_lengths,
        payload,
    })
}

fn decode(blob: &DeltaBlob, expected: CodecId, base: Option<&[u8]>) -> Result<Vec<u8>> {
    if blob.codec != expected {
        return Err(Error::CodecMismatch {
            expected: expected.to_string(),
            found: blob.codec.to_string(),
        });
    }
    blob.validate()?;
    let size = blob.dtype.size();
    let raw_len = blob.raw_len()?;
    if let Some(base) = base {
        if base.len() != raw_len {
            return Err(Error::Codec(format!(
                "base is {} bytes, blob decodes to {raw_len}",
                base.len()
            )));
        }
        let actual = TensorDigest::of(base);
        if actual != blob.base {
            return Err(Error::BaseMismatch {
                expected: blob.base,
                actual,
            });
        }
    }

    let chunk_bytes = blob.chunk_elements as usize * size;
    let mut offsets = Vec::with_capacity(blob.chunk_lengths.len() + 1);
    offsets.push(0usize);
    for &len in &blob.chunk_lengths {
        offsets.push(offsets.last().unwrap() + len as usize);
    }
    let mut out = vec![0u8; raw_len];
    out.par_chunks_mut(chunk_bytes.max(1))
        .enumerate()
        .try_for_each(|(c, dst)| -> Result<()> {
            let elems = dst.len() / size;
            let planes = (0..size)
                .map(|k| {
                    let i = c * size + k;
                    blob.backend
                        .decompress(&blob.payload[offsets[i]..offsets[i + 1]], elems)
                })
                .collect::<Result<Vec<_>>>()?;
            let b = base.map(|b| &b[c * chunk_bytes..c * chunk_bytes + dst.len()]);
            transform::inverse(blob.codec, &planes, b, size, dst);
            Ok(())
        })?;
    Ok(out)
}

/// XOR delta against `base`, byte-plane split, per-plane compression.
pub fn tensorx_encode(target: &[u8], base: &[u8], dtype: DType, chunk_elements: u32) -> Result<DeltaBlob> {
    encode(
        CodecId::TensorX,
        target,
        Some(base),
        dtype,
        chunk_elements,
        Backend::default(),
    )
}

pub fn tensorx_decode(blob: &DeltaBlob, base: &[u8]) -> Result<Vec<u8>> {
    decode(blob, CodecId::TensorX, Some(base))
}

/// Wrapping integer subtraction on `p`-bit elements with a zigzag sign
/// interleave, then byte-plane split and per-plane compression.
pub fn fmpp_encode(target: &[u8], base: &[u8], dtype: DType, chunk_elements: u32) -> Result<DeltaBlob> {
    encode(
        CodecId::Fmpp,
        target,
        Some(base),
        dtype,
        chunk_elements,
        Backend::default(),
    )
}

pub fn fmpp_decode(blob: &DeltaBlob, base: &[u8]) -> Result<Vec<u8>> {
    decode(blob, CodecId::Fmpp, Some(base))
}

/// Byte-plane compression with no base.
pub fn standalone_encode(target: &[u8], dtype: DType, chunk_elements: u32) -> Result<DeltaBlob> {
    encode(
        CodecId::Standalone,
        target,
        None,
        dtype,
        chunk_elements,
        Backend::default(),
    )
}

pub fn standalone_decode(blob: &DeltaBlob) -> Result<Vec<u8>> {
    decode(blob, CodecId::Standalone, None)
}

/// Encodes with any non-raw codec; `base` is required exactly for delta codecs.
pub fn encode_with(
    codec: CodecId,
    target: &[u8],
    base: Option<&[u8]>,
    dtype: DType,
    chunk_elements: u32,
) -> Result<DeltaBlob> {
    match (codec, base) {
        (CodecId::TensorX, Some(b)) => tensorx_encode(target, b, dtype, chunk_elements),
        (CodecId::Fmpp, Some(b)) => fmpp_encode(target, b, dtype, chunk_elements),
        (CodecId::Standalone, None) => standalone_encode(target, dtype, chunk_elements),
        (c, _) => Err(Error::Codec(format!(
            "codec {c} cannot encode {} a base",
            if base.is_some() { "with" } else { "without" }
        ))),
    }
}

/// Decodes by dispatching on the blob's codec id.
pub fn decode_any(blob: &DeltaBlob, base: Option<&[u8]>) -> Result<Vec<u8>> {
    match (blob.codec, base) {
        (CodecId::Standalone, None) => standalone_decode(blob),
        (c @ (CodecId::TensorX | CodecId::Fmpp), Some(b)) => decode(blob, c, Some(b)),
        (c, _) => Err(Error::Codec(format!(
            "codec {c} cannot decode {} a base",
            if base.is_some() { "with" } else { "without" }
        ))),
    }
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Codec(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
