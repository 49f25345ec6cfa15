//! Text-to-audio generation toolkit: a spectrogram VQ-GAN codebook, a
//! text-conditioned autoregressive transformer prior over codebook indices,
//! a DSP frontend/backend, a synthetic sound-event corpus, and objective
//! evaluation metrics — all CPU-only and seed-reproducible.

pub mod array;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod prior;
pub mod rng;
pub mod specvqgan;
pub mod tape;
pub mod text;

pub use array::Array;
pub use config::Config;
pub use error::{Result, SvqaError};
pub use rng::Rng;
