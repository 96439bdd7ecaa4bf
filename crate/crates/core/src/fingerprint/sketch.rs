//! Bit-level CountSketch over the raw bit pattern of a tensor.
//!
//! Every set bit `k` of every nonzero element `i` is hashed, once per row `r`,
//! to a bucket and a sign. The difference of two sketches built with the same
//! parameters is the sketch of the XOR of the two bit strings, so its squared
//! norm estimates their Hamming distance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{DType, TensorView};

pub const SKETCH_MAGIC: &[u8; 4] = b"THSK";
pub const SKETCH_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 8 + 8 + 1;

/// Elements handled per parallel work item.
const PAR_CHUNK_ELEMENTS: usize = 1 << 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SketchParams {
    pub depth: u8,
    pub width: u32,
    pub seed: u64,
}

impl Default for SketchParams {
    fn default() -> Self {
        SketchParams {
            depth: 2,
            width: 1024,
            seed: 0x5445_4e53_4f52_4844,
        }
    }
}

impl SketchParams {
    pub fn new(depth: u8, width: u32, seed: u64) -> Result<Self> {
        let p = SketchParams { depth, width, seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::SketchMismatch("depth must be at least 1".into()));
        }
        if self.width < 2 || !self.width.is_power_of_two() {
            return Err(Error::SketchMismatch(format!(
                "width {} must be a power of two >= 2",
                self.width
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.depth as usize * self.width as usize
    }

    /// Bytes of the serialized counter matrix (`d * w * 4`).
    pub fn counter_bytes(&self) -> usize {
        self.cells() * 4
    }

    fn row_keys(&self) -> Vec<u64> {
        (0..self.depth as u64)
            .map(|r| fmix64(self.seed ^ fmix64(r.wrapping_add(0x9e37_79b9_7f4a_7c15))))
            .collect()
    }
}

/// MurmurHash3's 64-bit finalizer.
#[inline(always)]
pub fn fmix64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^= x >> 33;
    x
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sketch {
    pub params: SketchParams,
    /// Row-major `d x w` counters.
    pub counters: Vec<i64>,
    /// Element count `n`.
    pub n: u64,
    /// Bits per element `p`.
    pub p: u8,
}

/// Sketches a tensor view.
pub fn sketch(tensor: &TensorView<'_>, params: &SketchParams) -> Result<Sketch> {
    sketch_bytes(tensor.bytes, tensor.dtype, params)
}

/// Sketches raw little-endian element bytes of the given dtype.
pub fn sketch_bytes(bytes: &[u8], dtype: DType, params: &SketchParams) -> Result<Sketch> {
    params.validate()?;
    let size = dtype.size();
    if !bytes.len().is_multiple_of(size) {
        return Err(Error::format(
            None,
            format!("{} bytes is not a whole number of {dtype} elements", bytes.len()),
        ));
    }
    let n = bytes.len() / size;
    let keys = params.row_keys();
    let cells = params.cells();

    let counters = if n <= PAR_CHUNK_ELEMENTS {
        let mut acc = vec![0i64; cells];
        accumulate(bytes, size, 0, &keys, params.width, &mut acc);
        acc
    } else {
        // Integer sums commute, so the result does not depend on the split.
        bytes
            .par_chunks(PAR_CHUNK_ELEMENTS * size)
            .enumerate()
            .map(|(c, chunk)| {
                let mut acc = vec![0i64; cells];
                accumulate(
                    chunk,
                    size,
                    (c * PAR_CHUNK_ELEMENTS) as u64,
                    &keys,
                    params.width,
                    &mut acc,
                );
                acc
            })
            .reduce(
                || vec![0i64; cells],
                |mut a, b| {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    a
                },
            )
    };

    Ok(Sketch {
        params: *params,
        counters,
        n: n as u64,
        p: dtype.bits() as u8,
    })
}

fn accumulate(bytes: &[u8], size: usize, first: u64, keys: &[u64], width: u32, acc: &mut [i64]) {
    match size {
        1 => accumulate_as::<1>(bytes, first, keys, width, acc),
        2 => accumulate_as::<2>(bytes, first, keys, width, acc),
        4 => accumulate_as::<4>(bytes, first, keys, width, acc),
        8 => accumulate_as::<8>(bytes, first, keys, width, acc),
        _ => unreachable!("dtype sizes are 1, 2, 4 or 8"),
    }
}

#[inline(always)]
fn accumulate_as<const N: usize>(bytes: &[u8], first: u64, keys: &[u64], width: u32, acc: &mut [i64]) {
    let p = (N * 8) as u64;
    let mask = width as u64 - 1;
    let w = width as usize;
    for (i, chunk) in bytes.chunks_exact(N).enumerate() {
        let mut raw = [0u8; 8];
        raw[..N].copy_from_slice(chunk);
        let e = u64::from_le_bytes(raw);
        if e == 0 {
            continue;
        }
        let bit_base = (first + i as u64) * p;
        for (r, &key) in keys.iter().enumerate() {
            let row = &mut acc[r * w..(r + 1) * w];
            let mut bits = e;
            while bits != 0 {
                let k = bits.trailing_zeros() as u64;
                let h = fmix64(key ^ (bit_base + k));
                // Sign from the top bit, bucket from the low bits.
                let sign = 1 - (((h >> 63) as i64) << 1);
                row[(h & mask) as usize] += sign;
                bits &= bits - 1;
            }
        }
    }
}

fn check_comparable(a: &Sketch, b: &Sketch) -> Result<()> {
    if a.params != b.params {
        return Err(Error::SketchMismatch(format!("{:?} vs {:?}", a.params, b.params)));
    }
    if a.n != b.n || a.p != b.p {
        return Err(Error::SketchMismatch(format!(
            "shape mismatch: n={} p={} vs n={} p={}",
            a.n, a.p, b.n, b.p
        )));
    }
    if a.counters.len() != a.params.cells() || b.counters.len() != b.params.cells() {
        return Err(Error::SketchMismatch("counter matrix has the wrong size".into()));
    }
    Ok(())
}

/// Per-row squared distance `||F^a_r - F^b_r||^2`.
pub fn row_estimates(a: &Sketch, b: &Sketch) -> Result<Vec<f64>> {
    check_comparable(a, b)?;
    let w = a.params.width as usize;
    Ok(a.counters
        .chunks_exact(w)
        .zip(b.counters.chunks_exact(w))
        .map(|(ra, rb)| {
            ra.iter()
                .zip(rb)
                .map(|(&x, &y)| {
                    let d = (x - y) as f64;
                    d * d
                })
                .sum()
        })
        .collect())
}

/// Estimated number of differing bits: the median of the per-row estimates.
/// With an even depth the median is the mean of the two middle rows.
pub fn hamming_estimate(a: &Sketch, b: &Sketch) -> Result<f64> {
    let mut rows = row_estimates(a, b)?;
    rows.sort_by(f64::total_cmp);
    let m = rows.len();
    Ok(if m % 2 == 1 {
        rows[m / 2]
    } else {
        (rows[m / 2 - 1] + rows[m / 2]) / 2.0
    })
}

/// Normalized Hamming distance `p_hat`, clamped to `[0, 1]`.
pub fn normalized_distance(a: &Sketch, b: &Sketch) -> Result<f64> {
    let h = hamming_estimate(a, b)?;
    let bits = a.p as f64 * a.n as f64;
    if bits == 0.0 {
        return Ok(0.0);
    }
    Ok((h / bits).clamp(0.0, 1.0))
}

impl Sketch {
    /// Counters flattened row after row, as stored on disk.
    pub fn flat_vector(&self) -> Vec<f32> {
        self.counters.iter().map(|&c| c as f32).collect()
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_LEN + self.params.counter_bytes()
    }

    /// `THSK | u8 version | u8 d | u16 log2(w) | u64 seed | u64 n | u8 p | d*w f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(SKETCH_MAGIC);
        out.push(SKETCH_VERSION);
        out.push(self.params.depth);
        out.extend_from_slice(&(self.params.width.trailing_zeros() as u16).to_le_bytes());
        out.extend_from_slice(&self.params.seed.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.push(self.p);
        for &c in &self.counters {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Sketch> {
        let bad = |m: &str| Error::format(None, format!("sketch: {m}"));
        if bytes.len() < HEADER_LEN || &bytes[..4] != SKETCH_MAGIC {
            return Err(bad("bad magic or truncated header"));
        }
        if bytes[4] != SKETCH_VERSION {
            return Err(bad("unsupported version"));
        }
        let depth = bytes[5];
        let log_w = u16::from_le_bytes([bytes[6], bytes[7]]);
        if log_w == 0 || log_w > 31 {
            return Err(bad("width out of range"));
        }
        let seed = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let p = bytes[24];
        let params = SketchParams::new(depth, 1 << log_w, seed)?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != params.counter_bytes() {
            return Err(bad("counter matrix length mismatch"));
        }
        let counters = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()).round() as i64)
            .collect();
        Ok(Sketch { params, counters, n, p })
    }
}
