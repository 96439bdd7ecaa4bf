//! Content digests for exact deduplication and bit-level sketches for
//! estimating how far apart two same-shaped tensors are.

mod digest;
mod sketch;

pub use digest::{tensor_digest, TensorDigest};
pub use sketch::{
    fmix64, hamming_estimate, normalized_distance, row_estimates, sketch, sketch_bytes, Sketch, SketchParams,
    SKETCH_MAGIC, SKETCH_VERSION,
};
