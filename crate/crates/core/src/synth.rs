//! Synthetic weight tensors and model families.
//!
//! Used for predictor fitting, benchmarks and the acceptance suite. Base
//! tensors look like trained weights (normally distributed floats). Variants
//! come from either independent bit flips or a fine-tune simulation that
//! moves a fraction of elements by a few units in the last place.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::codec::{encode_with, CodecId, DEFAULT_CHUNK_ELEMENTS};
use crate::error::Result;
use crate::fingerprint::{normalized_distance, sketch_bytes, SketchParams};
use crate::format::DType;
use crate::predictor::TrainingPair;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Round-to-nearest-even f32 -> bf16 bit pattern.
pub fn f32_to_bf16(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return ((bits >> 16) | 0x40) as u16;
    }
    let round = 0x7fff + ((bits >> 16) & 1);
    (bits.wrapping_add(round) >> 16) as u16
}

/// IEEE half from f32 (round toward zero; adequate for synthetic data).
fn f32_to_f16(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32 - 127 + 15;
    let mant = (bits >> 13) & 0x3ff;
    if exp <= 0 {
        sign
    } else if exp >= 31 {
        sign | 0x7c00
    } else {
        sign | ((exp as u16) << 10) | mant as u16
    }
}

/// Weight-like tensor bytes: N(0, std) values in the given dtype.
///
/// Large tensors are generated in independently seeded blocks in parallel.
pub fn weights(dtype: DType, n: usize, std: f32, seed: u64) -> Vec<u8> {
    const BLOCK: usize = 1 << 16;
    let size = dtype.size();
    let mut out = vec![0u8; n * size];
    out.par_chunks_mut(BLOCK * size).enumerate().for_each(|(b, chunk)| {
        let mut rng = rng(seed ^ (b as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let normal = Normal::new(0.0f32, std).unwrap();
        for elem in chunk.chunks_exact_mut(size) {
            let v = normal.sample(&mut rng);
            match dtype {
                DType::BF16 => elem.copy_from_slice(&f32_to_bf16(v).to_le_bytes()),
                DType::F16 => elem.copy_from_slice(&f32_to_f16(v).to_le_bytes()),
                DType::F32 => elem.copy_from_slice(&v.to_le_bytes()),
                DType::F64 => elem.copy_from_slice(&(v as f64).to_le_bytes()),
                _ => {
                    let scaled = (v / std * 16.0) as i64;
                    elem.copy_from_slice(&scaled.to_le_bytes()[..size]);
                }
            }
        }
    });
    out
}

/// Uniformly random bytes.
pub fn random_bytes(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = rng(seed);
    let mut out = vec![0u8; len];
    rng.fill(&mut out[..]);
    out
}

/// Visits positions `0..len` independently with probability `fraction`,
/// using geometric skips so sparse selections cost O(selected).
fn for_each_selected(len: u64, fraction: f64, rng: &mut ChaCha8Rng, mut f: impl FnMut(u64, &mut ChaCha8Rng)) {
    if fraction <= 0.0 || len == 0 {
        return;
    }
    if fraction >= 1.0 {
        (0..len).for_each(|i| f(i, rng));
        return;
    }
    let log_q = (1.0 - fraction).ln();
    let mut pos: u64 = 0;
    loop {
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let skip = (u.ln() / log_q).floor();
        if !skip.is_finite() || skip >= (len - pos) as f64 {
            return;
        }
        pos += skip as u64;
        f(pos, rng);
        pos += 1;
        if pos >= len {
            return;
        }
    }
}

/// Flips each non-sign bit independently with probability `fraction`.
pub fn flip_bits(base: &[u8], dtype: DType, fraction: f64, seed: u64) -> Vec<u8> {
    let mut out = base.to_vec();
    let size = dtype.size();
    let per_elem = (dtype.bits() - 1) as u64;
    let n = (base.len() / size) as u64;
    let mut rng = rng(seed);
    for_each_selected(n * per_elem, fraction, &mut rng, |pos, _| {
        let elem = (pos / per_elem) as usize;
        let bit = (pos % per_elem) as usize;
        out[elem * size + bit / 8] ^= 1 << (bit % 8);
    });
    out
}

/// Fine-tune simulation: each element moves with probability `fraction` by
/// `1..=max_ulps` units in the last place, sign preserved.
pub fn finetune(base: &[u8], dtype: DType, fraction: f64, max_ulps: u32, seed: u64) -> Vec<u8> {
    let mut out = base.to_vec();
    let size = dtype.size();
    let n = (base.len() / size) as u64;
    let mut rng = rng(seed);
    let float = matches!(dtype, DType::F64 | DType::F32 | DType::F16 | DType::BF16);
    let bits = dtype.bits();
    for_each_selected(n, fraction, &mut rng, |i, rng| {
        let at = i as usize * size;
        let mut raw = [0u8; 8];
        raw[..size].copy_from_slice(&out[at..at + size]);
        let v = u64::from_le_bytes(raw);
        let step = rng.random_range(1..=max_ulps.max(1)) as u64;
        let up = rng.random::<bool>();
        let new = if float {
            let sign_bit = 1u64 << (bits - 1);
            let mag_mask = sign_bit - 1;
            let (sign, mag) = (v & sign_bit, v & mag_mask);
            // Reflect at the ends so the magnitude stays in range.
            let mag = if up && mag + step <= mag_mask || !up && mag < step {
                mag + step
            } else {
                mag - step
            };
            sign | (mag & mag_mask)
        } else if up {
            v.wrapping_add(step)
        } else {
            v.wrapping_sub(step)
        };
        out[at..at + size].copy_from_slice(&new.to_le_bytes()[..size]);
    });
    out
}

/// Exact number of differing bits.
pub fn hamming(a: &[u8], b: &[u8]) -> u64 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones() as u64).sum()
}

/// Exact normalized Hamming distance.
pub fn exact_distance(a: &[u8], b: &[u8]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    hamming(a, b) as f64 / (8 * a.len()) as f64
}

/// Measured reduction ratio of `codec` on one pair, floored at zero since
/// the engine falls back to raw storage when a blob would expand.
pub fn measured_ratio(codec: CodecId, target: &[u8], base: &[u8], dtype: DType) -> Result<f64> {
    let base = codec.is_delta().then_some(base);
    let blob = encode_with(codec, target, base, dtype, DEFAULT_CHUNK_ELEMENTS)?;
    Ok((1.0 - blob.encoded_len() as f64 / target.len() as f64).max(0.0))
}

/// Bit-flip fractions the training corpus is anchored on.
pub const FLIP_FRACTIONS: [f64; 8] = [0.0, 1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.25, 0.5];

/// How a training variant was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    BitFlip(f64),
    FineTune { fraction: f64, max_ulps: u32 },
}

impl Perturbation {
    pub fn apply(&self, base: &[u8], dtype: DType, seed: u64) -> Vec<u8> {
        match *self {
            Perturbation::BitFlip(f) => flip_bits(base, dtype, f, seed),
            Perturbation::FineTune { fraction, max_ulps } => finetune(base, dtype, fraction, max_ulps, seed),
        }
    }
}

/// The `i`-th perturbation of the training corpus. Even indices walk the
/// anchored bit-flip fractions with a log-uniform jitter; odd indices are
/// fine-tune simulations with log-uniform element fractions.
pub fn training_perturbation(i: usize, rng: &mut ChaCha8Rng) -> Perturbation {
    if i.is_multiple_of(2) {
        let anchor = FLIP_FRACTIONS[(i / 2) % FLIP_FRACTIONS.len()];
        let jitter = 2f64.powf(rng.random_range(-1.0..1.0));
        Perturbation::BitFlip((anchor * jitter).min(0.5))
    } else {
        let fraction = 10f64.powf(rng.random_range(-4.0..-2.0));
        let max_ulps = [1, 2, 4, 8][rng.random_range(0..4)];
        Perturbation::FineTune { fraction, max_ulps }
    }
}

/// Generates `count` training pairs measured with `codec`.
///
/// Each pair is a fresh BF16 base of `elements` elements and a perturbed
/// variant; `p_hat` comes from the sketches, the ratio from a real encode.
pub fn training_pairs(
    codec: CodecId,
    count: usize,
    elements: usize,
    params: &SketchParams,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let mut rng = rng(seed);
    let plan: Vec<(Perturbation, u64)> = (0..count)
        .map(|i| (training_perturbation(i, &mut rng), rng.random()))
        .collect();
    plan.into_par_iter()
        .map(|(pert, s)| {
            let dtype = DType::BF16;
            let base = weights(dtype, elements, 0.02, s);
            let target = pert.apply(&base, dtype, s ^ 1);
            let a = sketch_bytes(&target, dtype, params)?;
            let b = sketch_bytes(&base, dtype, params)?;
            Ok(TrainingPair {
                p_hat: normalized_distance(&a, &b)?,
                measured_ratio: measured_ratio(codec, &target, &base, dtype)?,
                bytes: target.len() as u64,
            })
        })
        .collect()
}

/// A lineage tree of `count` tensors in breadth-first order: node 0 is a
/// fresh weight tensor and node `i` flips `fraction` of the bits of its
/// parent `(i - 1) / branching`.
pub fn lineage(
    dtype: DType,
    elements: usize,
    count: usize,
    branching: usize,
    fraction: f64,
    seed: u64,
) -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = Vec::with_capacity(count);
    if count == 0 {
        return out;
    }
    out.push(weights(dtype, elements, 0.02, seed));
    for i in 1..count {
        let parent = (i - 1) / branching.max(1);
        let child = flip_bits(
            &out[parent],
            dtype,
            fraction,
            seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        out.push(child);
    }
    out
}
