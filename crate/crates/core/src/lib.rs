//! Desk-scale toolkit for incremental multilingual translation.
//!
//! Per-language encoder and decoder modules are trained jointly with an
//! interlingua distance loss so that any encoder can feed any decoder. New
//! languages are added against frozen modules, enabling zero-shot
//! composition of pairs that were never trained together.

pub mod corpus;
pub mod dvq;
pub mod error;
pub mod evaluation;
pub mod interlingua;
pub mod registry;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod transformer;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{IdMatrix, Mask, Tape, Tensor};
