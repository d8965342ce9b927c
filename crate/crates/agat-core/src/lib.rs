//! Attribute-guided adversarial training toolkit.
//!
//! Compact classifiers are hardened against natural perturbations by
//! adversarially steering human-meaningful attributes (affine pose, blur
//! and noise levels, object shape/size/position) through differentiable
//! surrogate image manipulators, then training on the generated samples.
//! A benchmark harness measures the robustness gains under geometric
//! perturbations and synthetic corruption suites.

pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod models;
pub mod ops;
pub mod rng;
pub mod surrogates;
pub mod tensor;
pub mod trainer;

pub use error::{AgatError, Result};
pub use graph::{GradientMap, Graph, NodeId};
pub use rng::Rng;
pub use tensor::Tensor;
