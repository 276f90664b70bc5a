//! MEG phoneme decoding toolkit.
//!
//! A self-contained pipeline for decoding phoneme classes from multichannel
//! MEG-like recordings: a scalar-generic tensor/autodiff core, a dilated
//! convolutional decoder with attention pooling, session-aware sample
//! averaging rules, a weighted-loss AdamW training loop, and macro-averaged
//! evaluation metrics. Everything is deterministic given one `u64` seed.
//!
//! The core is generic over the element type via [`Scalar`]: training runs
//! at `f32`, numeric verification at `f64`.

pub mod cli;
pub mod data;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, TensorError, Var};

/// `f32` tensor: the training configuration.
pub type Tensor32 = Tensor<f32>;
/// `f64` tensor: the verification configuration.
pub type Tensor64 = Tensor<f64>;

/// Build the global rayon pool honoring the `MEBM_THREADS` cap, if set.
/// Call once at process start; later calls are no-ops.
pub fn init_thread_pool_from_env() {
    if let Ok(v) = std::env::var("MEBM_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}
