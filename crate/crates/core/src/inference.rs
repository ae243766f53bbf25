//! Hierarchical inference: weights of shallow units for a deep concept,
//! their decomposition over the shallow concept bank, and concept
//! directional derivatives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ChainError, Result};
use crate::harmonize::{ConceptBank, ConceptSpec, HarmonizingWeights};
use crate::linalg::{spectral_norm, Matrix};
use crate::perturb::PerturbationDataset;
use crate::scalar::{dot, Scalar};
use crate::solvers::{
    admm_weighted_lasso, omp_sparse_decompose, AdmmConfig, SolveResult, WeightedLassoProblem,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct SolverStats<T> {
    pub iterations: usize,
    pub primal_residual: T,
    pub dual_residual: T,
    pub converged: bool,
}

impl<T: Scalar> From<&SolveResult<T>> for SolverStats<T> {
    fn from(r: &SolveResult<T>) -> Self {
        SolverStats {
            iterations: r.iterations,
            primal_residual: r.primal_residual,
            dual_residual: r.dual_residual,
            converged: r.converged,
        }
    }
}

/// Importance of each shallow unit for one deep concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct InferenceWeights<T> {
    pub deep_concept: ConceptSpec,
    pub shallow_layer: String,
    pub lambda: T,
    pub weights: Vec<T>,
    pub solver: SolverStats<T>,
}

/// `0.01 · σ_max(√h ∘ X)² / N`, the weighted analogue of the harmonizing
/// default.
pub fn default_inference_lambda<T: Scalar>(dataset: &PerturbationDataset<T>) -> Result<T> {
    let mut x = dataset.features()?;
    for (i, r) in dataset.records.iter().enumerate() {
        let s = r.proximity.sqrt();
        x.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    let s = spectral_norm(&x);
    Ok(T::lit(0.01) * s * s / T::from_count(dataset.len().max(1)))
}

/// The weighted lasso problem `½Σ h(e_n)(w·x_n − y_n)² + λ‖w‖₁` for one
/// deep concept.
pub fn inference_problem<T: Scalar>(
    dataset: &PerturbationDataset<T>,
    concept_id: &str,
    lambda: T,
) -> Result<WeightedLassoProblem<T>> {
    WeightedLassoProblem::new(
        dataset.features()?,
        dataset.responses(concept_id)?,
        dataset.proximities(),
        lambda,
    )
}

pub fn fit_hierarchical_inference<T: Scalar>(
    dataset: &PerturbationDataset<T>,
    deep_concept: &ConceptSpec,
    lambda: Option<T>,
    config: &AdmmConfig<T>,
) -> Result<InferenceWeights<T>> {
    if deep_concept.layer != dataset.deep_layer {
        return Err(ChainError::InvalidArgument(format!(
            "concept `{}` is on layer `{}`, dataset deep layer is `{}`",
            deep_concept.concept_id, deep_concept.layer, dataset.deep_layer
        )));
    }
    if !dataset.concepts.iter().any(|c| c == &deep_concept.concept_id) {
        return Err(ChainError::UnknownConcept(deep_concept.concept_id.clone()));
    }
    if dataset.distinct_gate_vectors() < 2 {
        return Err(ChainError::InvalidDataset(
            "inference fit needs at least two distinct gate vectors".into(),
        ));
    }
    let lambda = match lambda {
        Some(l) => l,
        None => default_inference_lambda(dataset)?,
    };
    let problem = inference_problem(dataset, &deep_concept.concept_id, lambda)?;
    let res = admm_weighted_lasso(&problem, config)?.into_converged()?;
    Ok(InferenceWeights {
        deep_concept: deep_concept.clone(),
        shallow_layer: dataset.shallow_layer.clone(),
        lambda,
        solver: SolverStats::from(&res),
        weights: res.weights,
    })
}

/// Whether atoms enter the decomposition as stored or scaled to unit norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomNorm {
    #[default]
    Raw,
    UnitNorm,
}

/// Sparse coefficients of a deep concept over the shallow concept bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ContributionVector<T> {
    pub deep_concept: ConceptSpec,
    pub shallow_layer: String,
    /// Nonzero coefficients keyed by shallow concept id.
    pub entries: BTreeMap<String, T>,
    /// Concept ids in OMP selection order.
    pub selection_order: Vec<String>,
    pub sparsity_bound: usize,
    pub residual_norm: T,
    pub atom_norm: AtomNorm,
}

impl<T: Scalar> ContributionVector<T> {
    pub fn nonzeros(&self) -> usize {
        self.entries.values().filter(|&&a| a != T::zero()).count()
    }

    /// Entries sorted by descending coefficient, ties by concept id.
    pub fn ranked(&self) -> Vec<(String, T)> {
        let mut v: Vec<(String, T)> = self
            .entries
            .iter()
            .map(|(k, &a)| (k.clone(), a))
            .collect();
        v.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        v
    }
}

fn check_bank<T: Scalar>(inference: &InferenceWeights<T>, bank: &ConceptBank<T>) -> Result<()> {
    if bank.is_empty() {
        return Err(ChainError::InvalidArgument("concept bank is empty".into()));
    }
    if bank.layer != inference.shallow_layer {
        return Err(ChainError::InvalidArgument(format!(
            "bank is for layer `{}`, inference weights are over `{}`",
            bank.layer, inference.shallow_layer
        )));
    }
    if bank.units() != inference.weights.len() {
        return Err(ChainError::ShapeMismatch(format!(
            "bank atoms have {} entries, inference weights have {}",
            bank.units(),
            inference.weights.len()
        )));
    }
    Ok(())
}

/// `min ‖Φα − w‖² s.t. ‖α‖₀ ≤ ε` over the bank's raw harmonizing weights.
pub fn decompose_concept<T: Scalar>(
    inference: &InferenceWeights<T>,
    bank: &ConceptBank<T>,
    epsilon: usize,
) -> Result<ContributionVector<T>> {
    decompose_concept_with(inference, bank, epsilon, AtomNorm::Raw)
}

pub fn decompose_concept_with<T: Scalar>(
    inference: &InferenceWeights<T>,
    bank: &ConceptBank<T>,
    epsilon: usize,
    atom_norm: AtomNorm,
) -> Result<ContributionVector<T>> {
    check_bank(inference, bank)?;
    let dictionary = match atom_norm {
        AtomNorm::Raw => bank.matrix(),
        AtomNorm::UnitNorm => bank.unit_norm_matrix(),
    };
    let omp = omp_sparse_decompose(&dictionary, &inference.weights, epsilon)?;
    let ids = bank.concept_ids();
    let entries = omp
        .support
        .iter()
        .filter(|&&k| omp.coefficients[k] != T::zero())
        .map(|&k| (ids[k].to_string(), omp.coefficients[k]))
        .collect();
    Ok(ContributionVector {
        deep_concept: inference.deep_concept.clone(),
        shallow_layer: inference.shallow_layer.clone(),
        entries,
        selection_order: omp.support.iter().map(|&k| ids[k].to_string()).collect(),
        sparsity_bound: epsilon,
        residual_norm: omp.residual_norm,
        atom_norm,
    })
}

/// `w · t`: rate of change of the deep concept along a shallow concept.
pub fn directional_derivative<T: Scalar>(
    inference: &InferenceWeights<T>,
    entry: &HarmonizingWeights<T>,
) -> Result<T> {
    if entry.layer != inference.shallow_layer {
        return Err(ChainError::InvalidArgument(format!(
            "concept `{}` is on layer `{}`, inference weights are over `{}`",
            entry.concept_id, entry.layer, inference.shallow_layer
        )));
    }
    if entry.weights.len() != inference.weights.len() {
        return Err(ChainError::ShapeMismatch(format!(
            "harmonizing weights have {} entries, inference weights have {}",
            entry.weights.len(),
            inference.weights.len()
        )));
    }
    Ok(dot(&inference.weights, &entry.weights))
}

pub fn directional_derivatives<T: Scalar>(
    inference: &InferenceWeights<T>,
    bank: &ConceptBank<T>,
) -> Result<Vec<T>> {
    check_bank(inference, bank)?;
    bank.concepts
        .iter()
        .map(|c| directional_derivative(inference, c))
        .collect()
}

/// Concept with the largest signed directional derivative; ties go to the
/// earliest concept in bank order. Returns the id and its derivative.
pub fn top_concept<T: Scalar>(
    inference: &InferenceWeights<T>,
    bank: &ConceptBank<T>,
) -> Result<(String, T)> {
    let d = directional_derivatives(inference, bank)?;
    let best = crate::netcore::argmax(&d);
    Ok((bank.concepts[best].concept_id.clone(), d[best]))
}

/// Dense `I × K` view used by the oracle tests.
pub fn bank_dictionary<T: Scalar>(bank: &ConceptBank<T>, atom_norm: AtomNorm) -> Matrix<T> {
    match atom_norm {
        AtomNorm::Raw => bank.matrix(),
        AtomNorm::UnitNorm => bank.unit_norm_matrix(),
    }
}
