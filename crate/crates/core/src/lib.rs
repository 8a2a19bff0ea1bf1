//! Latent masked image modeling at desk scale.
//!
//! An online ViT encoder sees a few visible patches and predicts the latents
//! a target encoder assigns to the masked ones. Everything runs on the CPU
//! in `f32` for training and `f64` for gradient checks.
//!
//! * [`ndtensor`]: dense tensors with a reverse-mode tape.
//! * [`patching`]: patch grids, visible/target splits, position embeddings.
//! * [`data`]: synthetic shape corpus and PPM/PGM folders.
//! * [`model`]: encoders, projector, self- and cross-attention decoders.
//! * [`losses`]: reconstruction objectives and the similarity regularizer.
//! * [`trainer`]: AdamW, schedules, target strategies, presets.
//! * [`eval`]: pooling, nearest neighbour, linear probe, segmentation.
//! * [`gradsuite`]: finite-difference checks over every op and loss.
//! * [`io`]: checkpoints and plain-text configs.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod model;
pub mod ndtensor;
pub mod patching;
pub mod trainer;

pub use error::{Error, Result};
pub use ndtensor::{Element, Graph, Tensor, Var};
