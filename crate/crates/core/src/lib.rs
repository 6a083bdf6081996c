//! Zero-resource neural machine translation through a pivot language.
//!
//! A pivot-to-target "teacher" model supervises a source-to-target "student"
//! on a source-pivot corpus, either at the sentence level (the student fits
//! the teacher's decoded mode or k-best list) or at the word level (the
//! student matches the teacher's next-word distributions along a decoded
//! or sampled target). The crate also contains the two-step pivot baseline,
//! BLEU and KL measurements, a synthetic trilingual corpus generator and the
//! experiment runner behind the `pivot-distill` binary.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod pivot_baseline;
pub mod tensor;
pub mod transfer;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
