//! Synthetic electromagnetic fingerprinting of embedded firmware.
//!
//! The crate parses AVR assembly into execution paths ([`isa`]), simulates
//! the EM emission of a device running them ([`sim`]), harvests a library
//! of instruction-pair signal blocks ([`library`]), stitches those blocks
//! into synthetic traces ([`synth`]) and detects code injection with a
//! transductive k-NN test ([`detector`]). [`eval`] wires everything into
//! cross-validated experiments; [`archive`] holds the on-disk formats.

pub mod archive;
pub mod corpus;
pub mod detector;
pub mod error;
pub mod eval;
pub mod isa;
pub mod library;
pub mod sim;
pub mod synth;

pub use error::{Error, Result};
