//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] owns every node of one forward pass. Build a fresh tape (or
//! [`Tape::clear`] an old one) per batch; nodes never outlive their tape.

mod array;
mod tape;

pub use array::Array;
pub use tape::{Axis, Binary, NodeId, Reduce, Tape, Unary, EPS_LOG};

#[cfg(test)]
mod tests;
