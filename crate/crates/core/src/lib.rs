//! Multimodal open-set test-time adaptation.
//!
//! A pretrained late-fusion classifier is adapted online on an unlabeled
//! target stream that mixes known-class samples with unknown-class ones. The
//! adaptive entropy objective sharpens confident predictions while pushing
//! uncertain samples, likely unknown, towards higher entropy, so a score
//! threshold keeps separating the two as the model adapts.

pub mod adapt;
pub mod diffcore;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod streams;

pub use diffcore::Array;
pub use error::{Error, Result};
