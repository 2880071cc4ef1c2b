//! Local-action guided hierarchical latent diffusion for text-to-motion.
//!
//! A motion description is parsed into a three-level semantic graph
//! (motion, action, specific nodes). A relational graph-attention layer turns
//! the graph into conditioning tokens and into per-action guiding weights.
//! Three latent denoisers (motion → action → specific) then synthesize a
//! motion, and the action stage is pulled towards reference local-action
//! latents with an energy-gradient correction.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod gat;
pub mod graph;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use graph::{EdgeType, SemanticGraph};
pub use motion::{MotionSequence, SkeletonSpec};
pub use tensor::Mat;
