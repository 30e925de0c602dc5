//! Limited-channel ECG classification.
//!
//! Stage 1 trains a sequence-to-sequence LSTM to reconstruct every channel
//! of a frame from a configured subset. Stage 2 pools the encoder's latent
//! sequence by dense interpolation and classifies it with a random forest.
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f64`, which the pipeline uses.

pub mod baseline;
pub mod checkpoint;
pub mod embed;
pub mod error;
pub mod forest;
pub mod gradcheck;
pub mod ingest;
pub mod lstm;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod seq2seq;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use rng::SeededRng;
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type FrameTensor64 = ingest::FrameTensor<f64>;
pub type Seq2Seq = seq2seq::Seq2SeqModel<f64>;
pub type Seq2Seq32 = seq2seq::Seq2SeqModel<f32>;
pub type Lstm = lstm::StackedLstm<f64>;
pub type RnnClassifier = baseline::RnnClassifier<f64>;
