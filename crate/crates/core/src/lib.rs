//! Volumetric segmentation with slice-shift UNets.
//!
//! A 3D volume is treated as a stack of 2D slices. Planar (1x3x3)
//! convolutions do the in-plane work and a zero-parameter slice shift moves
//! a fraction of the channels one slice forward or backward, so successive
//! blocks exchange information along the stacking axis without 3D kernels.
//! Optionally the same weights process three axis permutations of the volume
//! at once (batched multi-view) and a small fusion head merges them back
//! into one prediction.
//!
//! Everything runs on a minimal dense f32 tensor engine with reverse-mode
//! autodiff; no external ML framework is involved. Heavy kernels split work
//! over disjoint output regions, so results are bitwise identical with the
//! `parallel` feature on or off.

pub mod complexity;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod parallel;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
