//! Safetensors model files as collections of zero-copy tensor views.
//!
//! Layout: `u64` little-endian header length `N`, `N` bytes of UTF-8 JSON
//! mapping tensor names to `{dtype, shape, data_offsets}` (plus an optional
//! `__metadata__` string map), then the payload. Offsets are relative to the
//! start of the payload.
//!
//! Compressed blobs reuse the same layout. The compression flags go into
//! `__metadata__` under the reserved `th.*` keys, so stock safetensors
//! tooling can still open a blob and find its payload.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use memmap2::Mmap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::codec::CodecId;
use crate::error::{Error, Result};
use crate::fingerprint::TensorDigest;

pub type Metadata = BTreeMap<String, String>;

const METADATA_KEY: &str = "__metadata__";
/// Name of the single entry inside a blob container.
pub const BLOB_TENSOR_NAME: &str = "tensor";

pub const KEY_CODEC: &str = "th.codec";
pub const KEY_BASE: &str = "th.base";
pub const KEY_DTYPE: &str = "th.dtype";
pub const KEY_SHAPE: &str = "th.shape";
pub const KEY_RAW_LEN: &str = "th.raw_len";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
    I64,
    I32,
    I16,
    I8,
    U8,
    BOOL,
}

impl DType {
    pub const ALL: [DType; 10] = [
        DType::F64,
        DType::F32,
        DType::F16,
        DType::BF16,
        DType::I64,
        DType::I32,
        DType::I16,
        DType::I8,
        DType::U8,
        DType::BOOL,
    ];

    /// Bits per element (`p`).
    pub fn bits(self) -> u32 {
        match self {
            DType::F64 | DType::I64 => 64,
            DType::F32 | DType::I32 => 32,
            DType::F16 | DType::BF16 | DType::I16 => 16,
            DType::I8 | DType::U8 | DType::BOOL => 8,
        }
    }

    pub fn size(self) -> usize {
        self.bits() as usize / 8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F64 => "F64",
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
            DType::I64 => "I64",
            DType::I32 => "I32",
            DType::I16 => "I16",
            DType::I8 => "I8",
            DType::U8 => "U8",
            DType::BOOL => "BOOL",
        }
    }

    /// Stable one-byte code used in blob and sketch headers.
    pub fn code(self) -> u8 {
        DType::ALL.iter().position(|d| *d == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<DType> {
        DType::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DType::ALL
            .iter()
            .copied()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::UnsupportedDType(s.to_owned()))
    }
}

/// Element count of a shape; the empty shape is a scalar.
pub fn element_count(shape: &[u64]) -> Option<u64> {
    shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

/// A named tensor borrowing its bytes from a larger buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorView<'a> {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub bytes: &'a [u8],
}

impl<'a> TensorView<'a> {
    /// Builds a view, checking that the byte length matches dtype and shape.
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<u64>, bytes: &'a [u8]) -> Result<Self> {
        let name = name.into();
        let expected = expected_len(&name, dtype, &shape)?;
        if expected != bytes.len() {
            return Err(Error::LengthMismatch {
                name,
                expected,
                actual: bytes.len(),
            });
        }
        Ok(TensorView {
            name,
            dtype,
            shape,
            bytes,
        })
    }

    /// `n`, the number of elements.
    pub fn element_count(&self) -> u64 {
        element_count(&self.shape).unwrap_or(0)
    }
}

fn expected_len(name: &str, dtype: DType, shape: &[u64]) -> Result<usize> {
    element_count(shape)
        .and_then(|n| n.checked_mul(dtype.size() as u64))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::format(Some(name), "shape overflows addressable size"))
}

#[derive(Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

/// Parses a safetensors buffer into views in header order.
pub fn parse_model(bytes: &[u8]) -> Result<Vec<TensorView<'_>>> {
    parse_model_with_metadata(bytes).map(|(t, _)| t)
}

/// Like [`parse_model`], also returning the `__metadata__` map.
pub fn parse_model_with_metadata(bytes: &[u8]) -> Result<(Vec<TensorView<'_>>, Metadata)> {
    if bytes.len() < 8 {
        return Err(Error::format(None, "file shorter than the 8-byte header length"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let header_end = 8u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::format(None, format!("header length {header_len} exceeds file size")))?
        as usize;
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::format(None, format!("header is not UTF-8: {e}")))?;
    let root: Map<String, Value> =
        serde_json::from_str(header).map_err(|e| Error::format(None, format!("header JSON: {e}")))?;
    let payload = &bytes[header_end..];

    let mut metadata = Metadata::new();
    let mut tensors = Vec::with_capacity(root.len());
    let mut spans = Vec::with_capacity(root.len());
    for (name, value) in root {
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value)
                .map_err(|e| Error::format(None, format!("__metadata__ must be a string map: {e}")))?;
            continue;
        }
        let entry: HeaderEntry =
            serde_json::from_value(value).map_err(|e| Error::format(Some(&name), format!("bad entry: {e}")))?;
        let dtype: DType = entry
            .dtype
            .parse()
            .map_err(|_| Error::format(Some(&name), format!("unsupported dtype {:?}", entry.dtype)))?;
        let [start, end] = entry.data_offsets;
        if start > end || end > payload.len() as u64 {
            return Err(Error::format(
                Some(&name),
                format!(
                    "data_offsets [{start}, {end}] outside payload of {} bytes",
                    payload.len()
                ),
            ));
        }
        let expected = expected_len(&name, dtype, &entry.shape)?;
        if (end - start) as usize != expected {
            return Err(Error::format(
                Some(&name),
                format!("data_offsets span {} bytes, dtype/shape need {expected}", end - start),
            ));
        }
        spans.push((start, end, name.clone()));
        tensors.push(TensorView {
            name,
            dtype,
            shape: entry.shape,
            bytes: &payload[start as usize..end as usize],
        });
    }

    spans.sort();
    for pair in spans.windows(2) {
        let (_, prev_end, ref prev) = pair[0];
        let (next_start, _, ref next) = pair[1];
        if next_start < prev_end {
            return Err(Error::format(
                Some(next),
                format!("data_offsets overlap tensor {prev:?}"),
            ));
        }
    }
    Ok((tensors, metadata))
}

/// Serializes tensors in the given order.
pub fn write_model(tensors: &[TensorView<'_>]) -> Result<Vec<u8>> {
    write_model_with_metadata(tensors, None)
}

pub fn write_model_with_metadata(tensors: &[TensorView<'_>], metadata: Option<&Metadata>) -> Result<Vec<u8>> {
    let mut root = Map::new();
    if let Some(meta) = metadata.filter(|m| !m.is_empty()) {
        root.insert(METADATA_KEY.to_owned(), serde_json::to_value(meta)?);
    }
    let mut offset = 0u64;
    for t in tensors {
        if t.name == METADATA_KEY || root.contains_key(&t.name) {
            return Err(Error::DuplicateName(t.name.clone()));
        }
        let expected = expected_len(&t.name, t.dtype, &t.shape)?;
        if expected != t.bytes.len() {
            return Err(Error::LengthMismatch {
                name: t.name.clone(),
                expected,
                actual: t.bytes.len(),
            });
        }
        let end = offset + t.bytes.len() as u64;
        root.insert(
            t.name.clone(),
            serde_json::json!({
                "dtype": t.dtype.as_str(),
                "shape": t.shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    let mut header = serde_json::to_string(&root)?.into_bytes();
    // Pad to 8-byte alignment like the reference writer does.
    while header.len() % 8 != 0 {
        header.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        out.extend_from_slice(t.bytes);
    }
    Ok(out)
}

/// Compression flags recorded in a blob's metadata section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobFlags {
    pub codec: Option<CodecId>,
    pub base: Option<TensorDigest>,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub raw_len: u64,
}

impl BlobFlags {
    pub fn new(codec: CodecId, base: Option<TensorDigest>, dtype: DType, shape: Vec<u64>) -> Result<Self> {
        let raw_len = expected_len(BLOB_TENSOR_NAME, dtype, &shape)? as u64;
        Ok(BlobFlags {
            codec: Some(codec),
            base,
            dtype,
            shape,
            raw_len,
        })
    }
}

/// Wraps a payload in a single-entry safetensors container carrying `flags`.
///
/// For `RAW` the payload is the tensor itself; for compressed codecs it is a
/// `U8` vector holding the encoded bytes.
pub fn write_blob(payload: &TensorView<'_>, flags: &BlobFlags) -> Result<Vec<u8>> {
    let codec = flags
        .codec
        .ok_or_else(|| Error::format(Some(&payload.name), "blob flags carry no codec id"))?;
    let mut meta = Metadata::new();
    meta.insert(KEY_CODEC.into(), codec.as_str().into());
    if let Some(base) = flags.base {
        meta.insert(KEY_BASE.into(), base.to_string());
    }
    meta.insert(KEY_DTYPE.into(), flags.dtype.as_str().into());
    meta.insert(KEY_SHAPE.into(), serde_json::to_string(&flags.shape)?);
    meta.insert(KEY_RAW_LEN.into(), flags.raw_len.to_string());
    let view = TensorView {
        name: BLOB_TENSOR_NAME.to_owned(),
        ..payload.clone()
    };
    write_model_with_metadata(std::slice::from_ref(&view), Some(&meta))
}

/// Inverse of [`write_blob`]: the flags and the payload view.
pub fn read_blob(bytes: &[u8]) -> Result<(BlobFlags, TensorView<'_>)> {
    let (mut tensors, meta) = parse_model_with_metadata(bytes)?;
    if tensors.len() != 1 {
        return Err(Error::format(
            None,
            format!("blob holds {} tensors, expected 1", tensors.len()),
        ));
    }
    let payload = tensors.pop().unwrap();
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::format(None, format!("blob metadata lacks {k}")))
    };
    let codec: CodecId = get(KEY_CODEC)?.parse()?;
    let base = meta.get(KEY_BASE).map(|s| s.parse()).transpose()?;
    let dtype: DType = get(KEY_DTYPE)?.parse()?;
    let shape: Vec<u64> = serde_json::from_str(get(KEY_SHAPE)?)?;
    let raw_len: u64 = get(KEY_RAW_LEN)?
        .parse()
        .map_err(|_| Error::format(None, "th.raw_len is not an integer"))?;
    let flags = BlobFlags {
        codec: Some(codec),
        base,
        dtype,
        shape,
        raw_len,
    };
    Ok((flags, payload))
}

/// A memory-mapped model file.
pub struct ModelFile {
    map: Mmap,
}

impl ModelFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        // SAFETY: the map is read-only; callers must not truncate the file while it is open.
        let map = unsafe { Mmap::map(&file)? };
        Ok(ModelFile { map })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.map
    }

    pub fn tensors(&self) -> Result<Vec<TensorView<'_>>> {
        parse_model(&self.map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file_with_header(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn single_f32_entry() {
        let bytes = file_with_header(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
            &[7u8; 16],
        );
        let t = parse_model(&bytes).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].element_count(), 4);
        assert_eq!(t[0].bytes.len(), 16);
        assert_eq!(t[0].dtype, DType::F32);
    }

    #[test]
    fn empty_header() {
        assert!(parse_model(&file_with_header("{}", &[])).unwrap().is_empty());
        let out = write_model(&[]).unwrap();
        assert_eq!(std::str::from_utf8(&out[8..]).unwrap().trim_end(), "{}");
        assert!(parse_model(&out).unwrap().is_empty());
    }

    #[test]
    fn scalar_shape_has_one_element() {
        let b = [1u8, 2];
        let v = TensorView::new("s", DType::BF16, vec![], &b).unwrap();
        assert_eq!(v.element_count(), 1);
    }

    #[test]
    fn errors_name_the_tensor() {
        let oob = file_with_header(
            r#"{"a":{"dtype":"U8","shape":[4],"data_offsets":[0,4]},"b":{"dtype":"U8","shape":[4],"data_offsets":[4,8]}}"#,
            &[0u8; 6],
        );
        match parse_model(&oob) {
            Err(Error::Format { tensor: Some(t), .. }) => assert_eq!(t, "b"),
            other => panic!("{other:?}"),
        }

        let overlap = file_with_header(
            r#"{"a":{"dtype":"U8","shape":[4],"data_offsets":[0,4]},"b":{"dtype":"U8","shape":[4],"data_offsets":[2,6]}}"#,
            &[0u8; 8],
        );
        assert!(matches!(
            parse_model(&overlap),
            Err(Error::Format { tensor: Some(_), .. })
        ));

        let fp8 = file_with_header(
            r#"{"q":{"dtype":"F8_E4M3","shape":[4],"data_offsets":[0,4]}}"#,
            &[0u8; 4],
        );
        match parse_model(&fp8) {
            Err(Error::Format { tensor: Some(t), msg }) => {
                assert_eq!(t, "q");
                assert!(msg.contains("F8_E4M3"));
            }
            other => panic!("{other:?}"),
        }

        let wrong_len = file_with_header(r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#, &[0u8; 8]);
        assert!(parse_model(&wrong_len).is_err());
    }

    #[test]
    fn bad_header_length_and_json() {
        assert!(parse_model(&[1, 2, 3]).is_err());
        let mut huge = u64::MAX.to_le_bytes().to_vec();
        huge.extend_from_slice(b"{}");
        assert!(parse_model(&huge).is_err());
        assert!(parse_model(&file_with_header("{not json", &[])).is_err());
        assert!(parse_model(&file_with_header("[]", &[])).is_err());
    }

    #[test]
    fn write_rejects_duplicates_and_bad_lengths() {
        let b = [0u8; 4];
        let a = TensorView::new("x", DType::U8, vec![4], &b).unwrap();
        assert!(matches!(
            write_model(&[a.clone(), a.clone()]),
            Err(Error::DuplicateName(_))
        ));
        let bad = TensorView { shape: vec![5], ..a };
        assert!(matches!(write_model(&[bad]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn metadata_round_trip() {
        let b = [9u8; 2];
        let t = TensorView::new("h", DType::F16, vec![1], &b).unwrap();
        let mut meta = Metadata::new();
        meta.insert("format".into(), "pt".into());
        let out = write_model_with_metadata(std::slice::from_ref(&t), Some(&meta)).unwrap();
        let (back, m) = parse_model_with_metadata(&out).unwrap();
        assert_eq!(back, vec![t]);
        assert_eq!(m, meta);
    }

    #[test]
    fn raw_blob_payload_is_tensor_bytes() {
        let b: Vec<u8> = (0..24).collect();
        let t = TensorView::new("w", DType::F32, vec![2, 3], &b).unwrap();
        let flags = BlobFlags::new(CodecId::Raw, None, DType::F32, vec![2, 3]).unwrap();
        let blob = write_blob(&t, &flags).unwrap();
        let (f, payload) = read_blob(&blob).unwrap();
        assert_eq!(f, flags);
        assert_eq!(payload.bytes, &b[..]);
        assert_eq!(payload.dtype, DType::F32);
    }

    #[test]
    fn tensorx_blob_records_codec_and_base() {
        let enc = [1u8, 2, 3];
        let v = TensorView::new("enc", DType::U8, vec![3], &enc).unwrap();
        let base = TensorDigest::of(b"base tensor");
        let flags = BlobFlags::new(CodecId::TensorX, Some(base), DType::BF16, vec![8]).unwrap();
        let blob = write_blob(&v, &flags).unwrap();
        let (_, meta) = parse_model_with_metadata(&blob).unwrap();
        assert_eq!(meta[KEY_CODEC], "tensorx");
        assert_eq!(meta[KEY_BASE], base.to_string());
        assert_eq!(meta[KEY_RAW_LEN], "16");
        let (f, p) = read_blob(&blob).unwrap();
        assert_eq!(f.base, Some(base));
        assert_eq!(p.bytes, &enc);
    }

    #[test]
    fn blob_requires_codec() {
        let enc = [1u8];
        let v = TensorView::new("enc", DType::U8, vec![1], &enc).unwrap();
        let mut flags = BlobFlags::new(CodecId::Raw, None, DType::U8, vec![1]).unwrap();
        flags.codec = None;
        assert!(write_blob(&v, &flags).is_err());
    }
}
