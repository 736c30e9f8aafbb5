//! Target-speaker transducer speech recognition, end to end: mixture
//! synthesis, feature extraction, enrollment-conditioned transducer models,
//! exact transducer loss on an autodiff tape, streaming greedy decoding, and
//! interference-sweep evaluation.
//!
//! All numerics are f64. Training runs on the tape in [`tensor`]; decoding
//! runs on a tapeless path that shares the same kernels, so streaming output
//! is bit-identical to batch output.

pub mod checkpoint;
pub mod eval;
pub mod mixture;
pub mod model;
pub mod seeds;
pub mod signal;
pub mod tensor;
pub mod training;
pub mod transducer;
