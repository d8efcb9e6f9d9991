//! Few-shot bearing fault diagnosis via meta-learned initializations.
//!
//! The crate stacks five layers:
//!
//! * [`tensor`] — dense tensors with tape-based reverse-mode autodiff,
//!   including gradients of gradients for meta-updates.
//! * [`model`] — the 4-block convolutional classifier over 64x64 segment
//!   images.
//! * [`data`] — vibration-signal segmentation, spectra, episodic N-way
//!   K-shot sampling, a synthetic fault generator, and the on-disk corpus
//!   container.
//! * [`meta`] — inner-loop adaptation with fixed or learnable per-layer,
//!   per-step rates, the meta-gradient outer loop, and meta-testing.
//! * [`harness`] — experiment plans, protocol runners, and result tables.

pub mod data;
pub mod gradcheck;
pub mod harness;
pub mod meta;
pub mod model;
pub mod seeds;
pub mod tensor;
