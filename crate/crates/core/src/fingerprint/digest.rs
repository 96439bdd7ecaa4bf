use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use xxhash_rust::xxh3::xxh3_128;

use crate::error::Error;

/// 128-bit content digest of raw tensor bytes (XXH3-128, canonical big-endian).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TensorDigest(pub [u8; 16]);

impl TensorDigest {
    pub const ZERO: TensorDigest = TensorDigest([0; 16]);

    pub fn of(bytes: &[u8]) -> Self {
        TensorDigest(xxh3_128(bytes).to_be_bytes())
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0; 16]
    }
}

/// Digest of a tensor's raw bytes. Name and shape do not participate.
pub fn tensor_digest(bytes: &[u8]) -> TensorDigest {
    TensorDigest::of(bytes)
}

impl fmt::Display for TensorDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for TensorDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TensorDigest({self})")
    }
}

impl FromStr for TensorDigest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::format(None, format!("invalid digest {s:?}"));
        if s.len() != 32 || !s.is_ascii() {
            return Err(bad());
        }
        let mut out = [0u8; 16];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        Ok(TensorDigest(out))
    }
}

impl Serialize for TensorDigest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TensorDigest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    // Reference vectors cross-checked against an independent XXH3-128
    // implementation (python-xxhash 3.x, `xxh3_128_hexdigest`).
    #[test]
    fn reference_vectors() {
        assert_eq!(tensor_digest(b"").to_string(), "99aa06d3014798d86001c324468d497f");
        assert_eq!(tensor_digest(b"a").to_string(), "a96faf705af16834e6c632b61e964e1f");
        assert_eq!(tensor_digest(b"abc").to_string(), "06b05ab6733a618578af5f94892f3950");
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(tensor_digest(&all).to_string(), "f1f8a93f50849ac39408a4433b952d71");
    }

    #[test]
    fn identical_bytes_identical_digest() {
        let a = vec![3u8; 4097];
        assert_eq!(tensor_digest(&a), tensor_digest(&a.clone()));
    }

    #[test]
    fn single_byte_flip_changes_digest() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let len = rng.random_range(1..5000);
            let mut data: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let before = tensor_digest(&data);
            let at = rng.random_range(0..len);
            data[at] ^= 1 << rng.random_range(0..8);
            assert_ne!(before, tensor_digest(&data));
        }
    }

    #[test]
    fn hex_round_trip() {
        let d = tensor_digest(b"xyz");
        assert_eq!(d.to_string().parse::<TensorDigest>().unwrap(), d);
        assert!("zz".parse::<TensorDigest>().is_err());
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<TensorDigest>(&json).unwrap(), d);
    }
}
