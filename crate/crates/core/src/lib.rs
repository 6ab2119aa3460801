//! Context-aware zero-shot recognition of image regions.
//!
//! A unary classifier over seen and unseen classes is combined with pairwise
//! potentials produced by a geometry relation network gated by a class-level
//! relation graph. Mean-field inference over a top-K pruned CRF reranks the
//! unary candidates of every region in a scene.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod crf;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod kgraph;
pub mod par;
pub mod pipeline;
pub mod relnet;
pub mod scene;
pub mod synthworld;
pub mod zsl;

pub use error::{Error, Result};
pub use par::Exec;
