//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor created through it; a [`Tensor`] is a cheap
//! handle into that tape. Backward passes emit their vector-Jacobian
//! products as ordinary tape operations, so a gradient produced with
//! `create_graph = true` can itself be differentiated — that is what makes
//! meta-gradients through an inner gradient step possible.

mod kernels;
mod params;
mod tape;

pub use params::{ParamEntry, ParamSet, TapeParams};
pub use tape::{Tape, Tensor};

use thiserror::Error;

/// Element type of the engine: `f32` for training speed, `f64` for the
/// tight finite-difference tolerances in the oracle suites.
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    /// Bytes per value in the checkpoint container.
    const WIDTH: u8;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte value"))
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte value"))
    }
}

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: parameter #{index} did not participate in the recorded graph")]
    UnusedParameter { index: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Computes (df/dx, d²f/dx²) of a scalar-input scalar-output function built
/// from tape primitives, via two nested backward passes.
pub fn grad_of_grad_check<S, F>(f: F, at: S) -> Result<(S, S)>
where
    S: Scalar,
    F: FnOnce(&mut Tape<S>, Tensor) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(vec![at], vec![], true);
    let y = f(&mut tape, x)?;
    let g = tape.backward(y, &[x], true, false)?[0];
    let gg = tape.backward(g, &[x], false, true)?[0];
    Ok((tape.values(g)[0], tape.values(gg)[0]))
}
