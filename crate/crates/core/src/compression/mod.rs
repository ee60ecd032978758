//! Repository compression: product quantization and tight-frame binarization.

pub mod binary;
pub mod kmeans;
pub mod pq;

pub use binary::{
    hamming, make_tight_frame, score_binary, BinaryCode, BinaryCodec, BinaryCodes,
    BinaryScoreLut, TightFrame,
};
pub use pq::{build_score_lut, learn_pq_codebook, PqCodebook, PqCodes, ScoreLut};
