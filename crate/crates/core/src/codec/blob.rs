use crate::codec::CodecId;
use crate::error::{Error, Result};
use crate::fingerprint::TensorDigest;
use crate::format::DType;

pub const BLOB_MAGIC: &[u8; 4] = b"THDX";
pub const BLOB_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 1 + 1 + 8 + 4 + 16 + 4;

/// General-purpose lossless backend applied to each byte plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    Zstd,
}

const ZSTD_LEVEL: i32 = 3;

impl Backend {
    pub fn id(self) -> u8 {
        match self {
            Backend::Zstd => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(Backend::Zstd),
            _ => None,
        }
    }

    pub(super) fn compress(self, plane: &[u8]) -> Result<Vec<u8>> {
        match self {
            Backend::Zstd => zstd::bulk::compress(plane, ZSTD_LEVEL).map_err(|e| Error::Codec(format!("zstd: {e}"))),
        }
    }

    pub(super) fn decompress(self, src: &[u8], expected: usize) -> Result<Vec<u8>> {
        let out = match self {
            Backend::Zstd => zstd::bulk::decompress(src, expected).map_err(|e| Error::Codec(format!("zstd: {e}")))?,
        };
        if out.len() != expected {
            return Err(Error::Codec(format!(
                "plane decompressed to {} bytes, expected {expected}",
                out.len()
            )));
        }
        Ok(out)
    }
}

/// A decoded `THDX` container.
///
/// Layout (little-endian): magic, u8 version, u8 codec, u8 dtype, u8 backend,
/// u64 element_count, u32 chunk_elements, 16-byte base digest (zero for none),
/// u32 chunk_count, then `chunk_count * p/8` u32 compressed lengths
/// (chunk-major, plane-minor), then the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaBlob {
    pub codec: CodecId,
    pub dtype: DType,
    pub backend: Backend,
    pub element_count: u64,
    pub chunk_elements: u32,
    pub base: TensorDigest,
    pub chunk_lengths: Vec<u32>,
    pub payload: Vec<u8>,
}

impl DeltaBlob {
    pub fn chunk_count(&self) -> u64 {
        self.element_count.div_ceil(self.chunk_elements.max(1) as u64)
    }

    pub fn raw_len(&self) -> Result<usize> {
        self.element_count
            .checked_mul(self.dtype.size() as u64)
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| Error::Codec("element count overflows".into()))
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 4 * self.chunk_lengths.len() + self.payload.len()
    }

    pub(super) fn validate(&self) -> Result<()> {
        if self.chunk_elements == 0 {
            return Err(Error::Codec("chunk_elements is zero".into()));
        }
        let expected = self.chunk_count() * self.dtype.size() as u64;
        if self.chunk_lengths.len() as u64 != expected {
            return Err(Error::Codec(format!(
                "chunk table has {} entries, expected {expected}",
                self.chunk_lengths.len()
            )));
        }
        let total: u64 = self.chunk_lengths.iter().map(|&l| l as u64).sum();
        if total != self.payload.len() as u64 {
            return Err(Error::Codec(format!(
                "chunk table sums to {total} bytes but payload is {}",
                self.payload.len()
            )));
        }
        if self.codec.is_delta() == self.base.is_zero() {
            return Err(Error::Codec("base digest presence does not match codec".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(BLOB_MAGIC);
        out.push(BLOB_VERSION);
        out.push(self.codec.code());
        out.push(self.dtype.code());
        out.push(self.backend.id());
        out.extend_from_slice(&self.element_count.to_le_bytes());
        out.extend_from_slice(&self.chunk_elements.to_le_bytes());
        out.extend_from_slice(self.base.as_bytes());
        out.extend_from_slice(&(self.chunk_count() as u32).to_le_bytes());
        for len in &self.chunk_lengths {
            out.extend_from_slice(&len.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Codec(format!("blob: {m}"));
        if bytes.len() < HEADER_LEN || &bytes[..4] != BLOB_MAGIC {
            return Err(bad("bad magic or truncated header"));
        }
        if bytes[4] != BLOB_VERSION {
            return Err(bad("unsupported version"));
        }
        let codec = CodecId::from_code(bytes[5]).ok_or_else(|| bad("unknown codec id"))?;
        let dtype = DType::from_code(bytes[6]).ok_or_else(|| bad("unknown dtype code"))?;
        let backend = Backend::from_id(bytes[7]).ok_or_else(|| bad("unknown backend id"))?;
        let element_count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let chunk_elements = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let base = TensorDigest(bytes[20..36].try_into().unwrap());
        let chunk_count = u32::from_le_bytes(bytes[36..40].try_into().unwrap()) as u64;
        if chunk_elements == 0 || chunk_count != element_count.div_ceil(chunk_elements as u64) {
            return Err(bad("chunk count inconsistent with element count"));
        }
        let entries = chunk_count
            .checked_mul(dtype.size() as u64)
            .filter(|&e| HEADER_LEN as u64 + 4 * e <= bytes.len() as u64)
            .ok_or_else(|| bad("truncated chunk table"))? as usize;
        let table_end = HEADER_LEN + 4 * entries;
        let chunk_lengths: Vec<u32> = bytes[HEADER_LEN..table_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let blob = DeltaBlob {
            codec,
            dtype,
            backend,
            element_count,
            chunk_elements,
            base,
            chunk_lengths,
            payload: bytes[table_end..].to_vec(),
        };
        blob.validate()?;
        Ok(blob)
    }
}
