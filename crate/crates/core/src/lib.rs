//! Feature-space testbed for counterfactual generative zero-shot classification.
//!
//! A generator maps class embeddings to fake features, a GCN can impute
//! unseen-class features from similar classes, and a twin-branch classifier
//! removes the indirect effect of real features on the generated-feature branch
//! before fusing the two branches.

pub mod counterfactual;
pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod graph;
pub mod harness;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
