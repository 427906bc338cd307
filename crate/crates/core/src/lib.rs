//! Contextual deep structured models for semantic segmentation.
//!
//! A CRF is built over the positions of a convolutional feature map. Unary
//! and pairwise potentials are the (negated) outputs of small networks fed
//! with node and edge features; pairwise potentials are typed by spatial
//! relation ("surrounding", "above/below") and may be asymmetric. Models are
//! trained with the piecewise likelihood and predict by mean-field inference
//! followed by bilinear upsampling and a windowed boundary refinement.

pub mod config;
pub mod data;
pub mod error;
pub mod featmap;
pub mod gradsuite;
pub mod graph;
pub mod inference;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod potentials;
pub mod refine;
pub mod training;

pub use error::{Error, Result};
pub use featmap::{FeatMapConfig, FeatureMap};
pub use graph::{CrfGraph, RangeBoxSpec, RelationKind};
pub use inference::{ExactResult, MarginalField};
pub use model::ModelParams;
pub use nn::{GradBuffer, Tensor};
pub use potentials::PotentialTable;
