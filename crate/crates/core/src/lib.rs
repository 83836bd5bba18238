//! Skeleton-based sign recognition with multi-positive contrastive alignment
//! against generated sign descriptions.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense `f64` tensors, a reverse-mode computation record and a
//!   central-difference gradient checker.
//! - [`skeleton`]: the 87-joint layout, normalized graph convolutions, the
//!   part-pooled encoder and the bone/motion stream transforms.
//! - [`describe`]: retrieval-grounded description generation (primary, synonym,
//!   refined and part-tagged texts) over a pluggable generator backend.
//! - [`text_encoder`]: a frozen, deterministic hashed bag-of-tokens encoder.
//! - [`contrastive`]: bidirectional softmax matching, the multi-positive target
//!   distribution, the symmetric KL loss and the multipart objective.
//! - [`train`]: synthetic corpus, training loop, evaluation, stream fusion,
//!   ablations and persistence.

pub mod contrastive;
pub mod describe;
pub mod error;
pub mod instrument;
pub mod numerics;
pub mod skeleton;
pub mod text_encoder;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
pub use skeleton::{PartId, SkeletonLayout, SkeletonSequence};
