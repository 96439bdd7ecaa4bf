//! Per-chunk element transforms and byte-plane (de)interleaving.

use super::CodecId;

macro_rules! zigzag_impl {
    ($name:ident, $inv:ident, $u:ty, $i:ty) => {
        #[inline(always)]
        fn $name(t: $u, b: $u) -> $u {
            let s = t.wrapping_sub(b) as $i;
            ((s << 1) ^ (s >> (<$u>::BITS - 1))) as $u
        }

        #[inline(always)]
        fn $inv(code: $u, b: $u) -> $u {
            let s = ((code >> 1) as $i) ^ -((code & 1) as $i);
            b.wrapping_add(s as $u)
        }
    };
}

zigzag_impl!(zz8, unzz8, u8, i8);
zigzag_impl!(zz16, unzz16, u16, i16);
zigzag_impl!(zz32, unzz32, u32, i32);
zigzag_impl!(zz64, unzz64, u64, i64);

/// Splits `bytes` (elements of `size` bytes) into `size` planes.
fn split_planes(bytes: &[u8], size: usize) -> Vec<Vec<u8>> {
    let n = bytes.len() / size;
    let mut planes = vec![vec![0u8; n]; size];
    for (i, elem) in bytes.chunks_exact(size).enumerate() {
        for (k, &byte) in elem.iter().enumerate() {
            planes[k][i] = byte;
        }
    }
    planes
}

/// Transforms one chunk and returns its byte planes, plane 0 first.
pub(super) fn forward(codec: CodecId, target: &[u8], base: Option<&[u8]>, size: usize) -> Vec<Vec<u8>> {
    match (codec, base) {
        (CodecId::TensorX, Some(base)) => {
            let delta: Vec<u8> = target.iter().zip(base).map(|(t, b)| t ^ b).collect();
            split_planes(&delta, size)
        }
        (CodecId::Fmpp, Some(base)) => split_planes(&subtract(target, base, size), size),
        _ => split_planes(target, size),
    }
}

fn subtract(target: &[u8], base: &[u8], size: usize) -> Vec<u8> {
    let mut out = vec![0u8; target.len()];
    macro_rules! run {
        ($u:ty, $f:ident) => {{
            const N: usize = std::mem::size_of::<$u>();
            for ((o, t), b) in out
                .chunks_exact_mut(N)
                .zip(target.chunks_exact(N))
                .zip(base.chunks_exact(N))
            {
                let t = <$u>::from_le_bytes(t.try_into().unwrap());
                let b = <$u>::from_le_bytes(b.try_into().unwrap());
                o.copy_from_slice(&$f(t, b).to_le_bytes());
            }
        }};
    }
    match size {
        1 => run!(u8, zz8),
        2 => run!(u16, zz16),
        4 => run!(u32, zz32),
        8 => run!(u64, zz64),
        _ => unreachable!(),
    }
    out
}

/// Reassembles planes into `dst` and undoes the element transform.
pub(super) fn inverse(codec: CodecId, planes: &[Vec<u8>], base: Option<&[u8]>, size: usize, dst: &mut [u8]) {
    for (i, elem) in dst.chunks_exact_mut(size).enumerate() {
        for (k, byte) in elem.iter_mut().enumerate() {
            *byte = planes[k][i];
        }
    }
    match (codec, base) {
        (CodecId::TensorX, Some(base)) => dst.iter_mut().zip(base).for_each(|(d, b)| *d ^= b),
        (CodecId::Fmpp, Some(base)) => {
            macro_rules! run {
                ($u:ty, $f:ident) => {{
                    const N: usize = std::mem::size_of::<$u>();
                    for (d, b) in dst.chunks_exact_mut(N).zip(base.chunks_exact(N)) {
                        let c = <$u>::from_le_bytes((&*d).try_into().unwrap());
                        let b = <$u>::from_le_bytes(b.try_into().unwrap());
                        d.copy_from_slice(&$f(c, b).to_le_bytes());
                    }
                }};
            }
            match size {
                1 => run!(u8, unzz8),
                2 => run!(u16, unzz16),
                4 => run!(u32, unzz32),
                8 => run!(u64, unzz64),
                _ => unreachable!(),
            }
        }
        _ => {}
    }
}
