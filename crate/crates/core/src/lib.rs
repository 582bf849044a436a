//! Adversarial patch attacks against a small convolutional classifier, and
//! defenses that project images through truncated SVD or a t-SNE tile
//! embedding before classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`prng`], [`image`], [`ppm`], [`shapes`], [`manifest`]: deterministic
//!   randomness, image/dataset types and file formats.
//! - [`classifier`]: a two-layer CNN with hand-written backpropagation.
//! - [`attacks`]: the patch blend, EOT transforms and the two patch trainers.
//! - [`svd`] and [`tsne`]: the dimensionality-reduction defenses.
//! - [`defense`]: a common front over both defenses.
//! - [`tuning`]: the information-fraction sweep.
//! - [`harness`] and [`report`]: experiment orchestration and rendering.

pub mod attacks;
pub mod classifier;
pub mod defense;
pub mod error;
pub mod harness;
pub mod image;
pub mod manifest;
pub mod matrix;
pub mod ppm;
pub mod prng;
pub mod report;
pub mod shapes;
pub mod svd;
pub mod tsne;
pub mod tuning;

pub use error::{Error, Result};
pub use image::{ImageTensor, LabeledDataset};
pub use prng::Prng;
