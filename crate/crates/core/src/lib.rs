//! Online, self-supervised stereo video matching.
//!
//! A convolutional feature extractor, a feature volume over candidate
//! disparities, a 3D encoder-decoder with convolutional LSTM memory and a
//! soft-argmin projection are trained frame by frame from a photometric
//! warping loss. Parameters adapt continuously; there is no separate training
//! phase.

pub mod clstm;
pub mod error;
pub mod feature_net;
pub mod feature_volume;
pub mod gradcheck;
pub mod layers;
pub mod match_net;
pub mod metrics;
pub mod online_adapt;
pub mod ops;
pub mod stereo_io;
pub mod tape;
pub mod tensor;
pub mod warp_loss;

pub use error::{Error, Result};
pub use ops::{Activation, Padding};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
