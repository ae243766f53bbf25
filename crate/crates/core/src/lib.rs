//! Concept-harmonized hierarchical inference for small convolutional
//! networks.
//!
//! The pipeline aligns each layer's units with visual concepts through
//! sparse regression ([`harmonize`]), measures how shallow units drive a
//! deep concept by gating channels and fitting a weighted lasso
//! ([`perturb`], [`inference`]), decomposes deep concepts into shallow ones
//! with an L0 bound, and assembles instance- and class-level explanation
//! trees ([`chain`]) with distance analytics ([`analytics`]).
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64`, which is what the command line tool
//! uses.

pub mod analytics;
pub mod chain;
pub mod error;
pub mod harmonize;
pub mod inference;
pub mod linalg;
pub mod netcore;
pub mod perturb;
pub mod provenance;
pub mod scalar;
pub mod solvers;
pub mod synthetic;

pub use error::{ChainError, Result};
pub use netcore::{GateVector, Level};
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type Tensor = netcore::Tensor<f64>;
pub type NetworkSpec = netcore::NetworkSpec<f64>;
pub type ActivationMap = netcore::ActivationMap<f64>;
pub type Activations = netcore::Activations<f64>;
pub type AdmmConfig = solvers::AdmmConfig<f64>;
pub type SolveResult = solvers::SolveResult<f64>;
pub type WeightedLassoProblem = solvers::WeightedLassoProblem<f64>;
pub type HarmonizingDataset = harmonize::HarmonizingDataset<f64>;
pub type HarmonizingWeights = harmonize::HarmonizingWeights<f64>;
pub type ConceptBank = harmonize::ConceptBank<f64>;
pub type PerturbationRecord = perturb::PerturbationRecord<f64>;
pub type PerturbationDataset = perturb::PerturbationDataset<f64>;
pub type InferenceWeights = inference::InferenceWeights<f64>;
pub type ContributionVector = inference::ContributionVector<f64>;
pub type ChainNode = chain::ChainNode<f64>;
pub type ChainTree = chain::ChainTree<f64>;
pub type ClassChain = chain::ClassChain<f64>;
pub type WeightSet = analytics::WeightSet<f64>;
pub type DistanceTable = analytics::DistanceTable<f64>;
