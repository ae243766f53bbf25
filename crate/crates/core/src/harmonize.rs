//! Concept harmonizing: per-concept sparse weights over a layer's units,
//! fitted by lasso regression of binary concept labels on unit features.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ChainError, Result};
use crate::linalg::{spectral_norm, Matrix};
use crate::netcore::{gap, load_tensor, ActivationMap, Level, NetworkSpec, Tensor};
use crate::provenance::Provenance;
use crate::scalar::{dot, norm2, Scalar};
use crate::solvers::{admm_weighted_lasso, AdmmConfig, WeightedLassoProblem};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub concept_id: String,
    pub level: Level,
    pub layer: String,
}

// ---------------------------------------------------------------------------
// Concept manifest

/// One `sample_id,level,concept_id,label,source` row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    pub level: Level,
    pub concept_id: String,
    pub label: u8,
    /// Tensor file for the sample, relative to the manifest directory.
    /// Empty means `tensors/<sample_id>.json`.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptManifest {
    base_dir: PathBuf,
    rows: Vec<ManifestRow>,
}

impl ConceptManifest {
    pub fn new(base_dir: impl Into<PathBuf>, rows: Vec<ManifestRow>) -> Result<Self> {
        for r in &rows {
            if r.label > 1 {
                return Err(ChainError::InvalidDataset(format!(
                    "sample `{}` concept `{}`: label must be 0 or 1, got {}",
                    r.sample_id, r.concept_id, r.label
                )));
            }
        }
        Ok(ConceptManifest {
            base_dir: base_dir.into(),
            rows,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| ChainError::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader
            .headers()
            .map_err(|e| ChainError::parse(path.display().to_string(), e))?
            .clone();
        let expected = ["sample_id", "level", "concept_id", "label", "source"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(ChainError::parse(
                path.display().to_string(),
                format!("expected header `{}`", expected.join(",")),
            ));
        }
        let mut rows = Vec::new();
        for rec in reader.deserialize::<ManifestRow>() {
            rows.push(rec.map_err(|e| ChainError::parse(path.display().to_string(), e))?);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(base, rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| ChainError::io(path, std::io::Error::other(e)))?;
        for r in &self.rows {
            w.serialize(r)
                .map_err(|e| ChainError::io(path, std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| ChainError::io(path, e))
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Distinct sample ids in first-appearance order.
    pub fn sample_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.sample_id.as_str()))
            .map(|r| r.sample_id.clone())
            .collect()
    }

    pub fn contains_sample(&self, sample_id: &str) -> bool {
        self.rows.iter().any(|r| r.sample_id == sample_id)
    }

    /// Sorted concept ids listed at `level`.
    pub fn concepts_at(&self, level: Level) -> Vec<String> {
        self.rows
            .iter()
            .filter(|r| r.level == level)
            .map(|r| r.concept_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// `(sample_id, label)` pairs for one concept, in manifest order.
    pub fn labels(&self, level: Level, concept_id: &str) -> Vec<(String, u8)> {
        self.rows
            .iter()
            .filter(|r| r.level == level && r.concept_id == concept_id)
            .map(|r| (r.sample_id.clone(), r.label))
            .collect()
    }

    /// Concepts labelled present for a sample, by level.
    pub fn present_concepts(&self, sample_id: &str) -> BTreeMap<Level, Vec<String>> {
        let mut out: BTreeMap<Level, Vec<String>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.sample_id == sample_id && r.label == 1) {
            out.entry(r.level).or_default().push(r.concept_id.clone());
        }
        out
    }

    pub fn tensor_path(&self, sample_id: &str) -> Result<PathBuf> {
        let row = self
            .rows
            .iter()
            .find(|r| r.sample_id == sample_id)
            .ok_or_else(|| ChainError::UnknownSample(sample_id.to_string()))?;
        Ok(if row.source.is_empty() {
            self.base_dir.join("tensors").join(format!("{sample_id}.json"))
        } else {
            self.base_dir.join(&row.source)
        })
    }

    pub fn load_input<T: Scalar>(&self, sample_id: &str) -> Result<Tensor<T>> {
        load_tensor(self.tensor_path(sample_id)?)
    }
}

/// GAP features of one layer for a set of samples.
pub fn layer_features<T: Scalar>(
    net: &NetworkSpec<T>,
    manifest: &ConceptManifest,
    layer: &str,
    sample_ids: &[String],
) -> Result<HashMap<String, Vec<T>>> {
    net.layer_index(layer)?;
    sample_ids
        .par_iter()
        .map(|id| {
            let input = manifest.load_input::<T>(id)?;
            let acts = net.forward(&input)?;
            Ok((id.clone(), gap(acts.require(layer)?)))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Datasets and fitting

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonizingDataset<T> {
    pub concept: ConceptSpec,
    pub sample_ids: Vec<String>,
    /// `N × I` per-sample layer features.
    pub features: Matrix<T>,
    pub labels: Vec<T>,
}

impl<T: Scalar> HarmonizingDataset<T> {
    pub fn new(
        concept: ConceptSpec,
        sample_ids: Vec<String>,
        features: Matrix<T>,
        labels: Vec<T>,
    ) -> Result<Self> {
        if features.rows() != labels.len() || sample_ids.len() != labels.len() {
            return Err(ChainError::ShapeMismatch(format!(
                "{} samples, {} feature rows, {} labels",
                sample_ids.len(),
                features.rows(),
                labels.len()
            )));
        }
        if labels.iter().any(|&z| z != T::zero() && z != T::one()) {
            return Err(ChainError::InvalidDataset(format!(
                "concept `{}`: labels must be 0 or 1",
                concept.concept_id
            )));
        }
        let positives = labels.iter().filter(|&&z| z == T::one()).count();
        if positives == 0 {
            return Err(ChainError::InvalidDataset(format!(
                "concept `{}` has no positive samples",
                concept.concept_id
            )));
        }
        if positives == labels.len() {
            return Err(ChainError::InvalidDataset(format!(
                "concept `{}` has no negative samples",
                concept.concept_id
            )));
        }
        Ok(HarmonizingDataset {
            concept,
            sample_ids,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&z| z == T::one()).count()
    }

    /// Scale-aware default: `0.01 · σ_max(features)² / N`.
    pub fn default_lambda(&self) -> T {
        let s = spectral_norm(&self.features);
        T::lit(0.01) * s * s / T::from_count(self.len())
    }

    pub fn problem(&self, lambda: T) -> Result<WeightedLassoProblem<T>> {
        WeightedLassoProblem::uniform(self.features.clone(), self.labels.clone(), lambda)
    }
}

fn dataset_from_features<T: Scalar>(
    concept: ConceptSpec,
    manifest: &ConceptManifest,
    features: &HashMap<String, Vec<T>>,
) -> Result<HarmonizingDataset<T>> {
    let labelled = manifest.labels(concept.level, &concept.concept_id);
    if labelled.is_empty() {
        return Err(ChainError::UnknownConcept(concept.concept_id.clone()));
    }
    let mut rows = Vec::with_capacity(labelled.len());
    let mut ids = Vec::with_capacity(labelled.len());
    let mut labels = Vec::with_capacity(labelled.len());
    for (id, z) in labelled {
        let f = features
            .get(&id)
            .ok_or_else(|| ChainError::UnknownSample(id.clone()))?;
        rows.push(f.clone());
        ids.push(id);
        labels.push(if z == 1 { T::one() } else { T::zero() });
    }
    HarmonizingDataset::new(concept, ids, Matrix::from_rows(&rows)?, labels)
}

/// Labelled GAP features of the concept's layer for every manifest sample
/// that carries a label for the concept.
pub fn build_harmonizing_dataset<T: Scalar>(
    net: &NetworkSpec<T>,
    manifest: &ConceptManifest,
    concept: &ConceptSpec,
) -> Result<HarmonizingDataset<T>> {
    let ids: Vec<String> = manifest
        .labels(concept.level, &concept.concept_id)
        .into_iter()
        .map(|(id, _)| id)
        .collect();
    if ids.is_empty() {
        return Err(ChainError::UnknownConcept(concept.concept_id.clone()));
    }
    let features = layer_features(net, manifest, &concept.layer, &ids)?;
    dataset_from_features(concept.clone(), manifest, &features)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct FitStats<T> {
    pub loss: T,
    pub nonzeros: usize,
    pub iterations: usize,
    pub primal_residual: T,
    pub dual_residual: T,
    pub converged: bool,
}

/// Harmonizing weight vector `t` of one concept over its layer's units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct HarmonizingWeights<T> {
    pub concept_id: String,
    pub level: Level,
    pub layer: String,
    pub lambda: T,
    pub weights: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitStats<T>>,
}

impl<T: Scalar> HarmonizingWeights<T> {
    pub fn concept(&self) -> ConceptSpec {
        ConceptSpec {
            concept_id: self.concept_id.clone(),
            level: self.level,
            layer: self.layer.clone(),
        }
    }

    pub fn unit_norm(&self) -> Vec<T> {
        let n = norm2(&self.weights);
        if n == T::zero() {
            self.weights.clone()
        } else {
            self.weights.iter().map(|&w| w / n).collect()
        }
    }
}

/// Solves `min ½Σ(t·a_n − z_n)² + λ‖t‖₁`; `lambda = None` uses the
/// dataset's scale-aware default.
pub fn fit_concept_harmonizer<T: Scalar>(
    dataset: &HarmonizingDataset<T>,
    lambda: Option<T>,
    config: &AdmmConfig<T>,
) -> Result<HarmonizingWeights<T>> {
    let lambda = lambda.unwrap_or_else(|| dataset.default_lambda());
    let problem = dataset.problem(lambda)?;
    let res = admm_weighted_lasso(&problem, config)?.into_converged()?;
    let fit = FitStats {
        loss: problem.loss(&res.weights),
        nonzeros: res.nonzeros(),
        iterations: res.iterations,
        primal_residual: res.primal_residual,
        dual_residual: res.dual_residual,
        converged: res.converged,
    };
    Ok(HarmonizingWeights {
        concept_id: dataset.concept.concept_id.clone(),
        level: dataset.concept.level,
        layer: dataset.concept.layer.clone(),
        lambda,
        weights: res.weights,
        fit: Some(fit),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptFailure {
    pub concept_id: String,
    pub message: String,
}

/// Harmonizing weights of every concept at one layer; column `k` of
/// [`ConceptBank::matrix`] is `concepts[k].weights`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ConceptBank<T> {
    pub layer: String,
    pub level: Level,
    pub concepts: Vec<HarmonizingWeights<T>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<ConceptFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl<T: Scalar> ConceptBank<T> {
    pub fn new(layer: impl Into<String>, level: Level, concepts: Vec<HarmonizingWeights<T>>) -> Result<Self> {
        let layer = layer.into();
        let units = concepts.first().map(|c| c.weights.len());
        for c in &concepts {
            if c.layer != layer {
                return Err(ChainError::InvalidArgument(format!(
                    "concept `{}` belongs to layer `{}`, bank is for `{layer}`",
                    c.concept_id, c.layer
                )));
            }
            if Some(c.weights.len()) != units {
                return Err(ChainError::ShapeMismatch(format!(
                    "concept `{}` has {} weights, expected {}",
                    c.concept_id,
                    c.weights.len(),
                    units.unwrap_or(0)
                )));
            }
        }
        Ok(ConceptBank {
            layer,
            level,
            concepts,
            failures: Vec::new(),
            provenance: None,
        })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn units(&self) -> usize {
        self.concepts.first().map_or(0, |c| c.weights.len())
    }

    pub fn concept_ids(&self) -> Vec<&str> {
        self.concepts.iter().map(|c| c.concept_id.as_str()).collect()
    }

    pub fn get(&self, concept_id: &str) -> Option<&HarmonizingWeights<T>> {
        self.concepts.iter().find(|c| c.concept_id == concept_id)
    }

    pub fn index_of(&self, concept_id: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.concept_id == concept_id)
    }

    /// `I × K` matrix with one column per concept.
    pub fn matrix(&self) -> Matrix<T> {
        Matrix::from_columns(&self.concepts.iter().map(|c| c.weights.clone()).collect::<Vec<_>>())
            .unwrap_or_else(|_| Matrix::zeros(self.units(), 0))
    }

    /// Same as [`ConceptBank::matrix`] with each nonzero column scaled to unit norm.
    pub fn unit_norm_matrix(&self) -> Matrix<T> {
        Matrix::from_columns(&self.concepts.iter().map(|c| c.unit_norm()).collect::<Vec<_>>())
            .unwrap_or_else(|_| Matrix::zeros(self.units(), 0))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("bank serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let bank: ConceptBank<T> =
            serde_json::from_str(text).map_err(|e| ChainError::parse("concept bank", e))?;
        let mut checked = ConceptBank::new(bank.layer, bank.level, bank.concepts)?;
        checked.failures = bank.failures;
        checked.provenance = bank.provenance;
        Ok(checked)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ChainError::io(path, e))?;
        Self::from_json_str(&text)
    }
}

/// Which level a layer is mapped to.
pub fn level_of_layer<T: Scalar>(net: &NetworkSpec<T>, layer: &str) -> Result<Level> {
    net.level_map()
        .iter()
        .find(|(_, l)| l.as_str() == layer)
        .map(|(&lv, _)| lv)
        .ok_or_else(|| {
            ChainError::InvalidArgument(format!("layer `{layer}` is not mapped to a semantic level"))
        })
}

/// Fits every manifest concept at the layer's level. Concepts are ordered by
/// id; individual failures are collected in `failures` rather than aborting.
pub fn fit_layer_concepts<T: Scalar>(
    net: &NetworkSpec<T>,
    manifest: &ConceptManifest,
    layer: &str,
    lambda: Option<T>,
    config: &AdmmConfig<T>,
) -> Result<ConceptBank<T>> {
    let level = level_of_layer(net, layer)?;
    let samples = level_samples(manifest, level);
    let features = layer_features(net, manifest, layer, &samples)?;
    fit_from_features(manifest, layer, level, &features, lambda, config)
}

fn level_samples(manifest: &ConceptManifest, level: Level) -> Vec<String> {
    manifest
        .rows()
        .iter()
        .filter(|r| r.level == level)
        .map(|r| r.sample_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn fit_from_features<T: Scalar>(
    manifest: &ConceptManifest,
    layer: &str,
    level: Level,
    features: &HashMap<String, Vec<T>>,
    lambda: Option<T>,
    config: &AdmmConfig<T>,
) -> Result<ConceptBank<T>> {
    let concept_ids = manifest.concepts_at(level);
    if concept_ids.is_empty() {
        return Err(ChainError::InvalidDataset(format!(
            "manifest has no concepts at level `{level}`"
        )));
    }
    let results: Vec<(String, Result<HarmonizingWeights<T>>)> = concept_ids
        .par_iter()
        .map(|id| {
            let spec = ConceptSpec {
                concept_id: id.clone(),
                level,
                layer: layer.to_string(),
            };
            let fitted = dataset_from_features(spec, manifest, features)
                .and_then(|ds| fit_concept_harmonizer(&ds, lambda, config));
            (id.clone(), fitted)
        })
        .collect();
    let mut concepts = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(w) => concepts.push(w),
            Err(e) => {
                log::warn!("harmonizing `{id}` failed: {e}");
                failures.push(ConceptFailure {
                    concept_id: id,
                    message: e.to_string(),
                });
            }
        }
    }
    let mut bank = ConceptBank::new(layer, level, concepts)?;
    bank.failures = failures;
    Ok(bank)
}

/// One bank per level in the network's level map. Each sample is run
/// through the network once.
pub fn fit_all_levels<T: Scalar>(
    net: &NetworkSpec<T>,
    manifest: &ConceptManifest,
    lambda: Option<T>,
    config: &AdmmConfig<T>,
) -> Result<BTreeMap<Level, ConceptBank<T>>> {
    let samples = manifest.sample_ids();
    let pooled: Vec<(String, BTreeMap<Level, Vec<T>>)> = samples
        .par_iter()
        .map(|id| {
            let acts = net.forward(&manifest.load_input::<T>(id)?)?;
            let per_level = net
                .level_map()
                .iter()
                .map(|(&level, layer)| Ok((level, gap(acts.require(layer)?))))
                .collect::<Result<_>>()?;
            Ok((id.clone(), per_level))
        })
        .collect::<Result<_>>()?;
    let mut banks = BTreeMap::new();
    for (&level, layer) in net.level_map() {
        let features: HashMap<String, Vec<T>> = pooled
            .iter()
            .map(|(id, m)| (id.clone(), m[&level].clone()))
            .collect();
        banks.insert(level, fit_from_features(manifest, layer, level, &features, lambda, config)?);
    }
    Ok(banks)
}

/// `Σ_j t_j A_j`: the concept-weighted channel sum, one value per spatial
/// position.
pub fn concept_harmonized_unit<T: Scalar>(
    entry: &HarmonizingWeights<T>,
    activations: &ActivationMap<T>,
) -> Result<Vec<T>> {
    if activations.layer_name != entry.layer {
        return Err(ChainError::InvalidArgument(format!(
            "concept `{}` is harmonized with layer `{}`, activations are from `{}`",
            entry.concept_id, entry.layer, activations.layer_name
        )));
    }
    let t = &activations.data;
    if t.channels() != entry.weights.len() {
        return Err(ChainError::ShapeMismatch(format!(
            "concept `{}` has {} weights, layer has {} units",
            entry.concept_id,
            entry.weights.len(),
            t.channels()
        )));
    }
    let mut out = vec![T::zero(); t.spatial_len()];
    for (j, &w) in entry.weights.iter().enumerate() {
        if w == T::zero() {
            continue;
        }
        for (o, &a) in out.iter_mut().zip(t.channel(j)) {
            *o += w * a;
        }
    }
    Ok(out)
}

/// GAP of the concept-harmonized unit.
pub fn concept_saliency<T: Scalar>(
    entry: &HarmonizingWeights<T>,
    activations: &ActivationMap<T>,
) -> Result<T> {
    let map = concept_harmonized_unit(entry, activations)?;
    Ok(map.iter().copied().sum::<T>() / T::from_count(map.len()))
}

/// `t · gap(A)`, equal to [`concept_saliency`] by linearity.
pub fn concept_score<T: Scalar>(entry: &HarmonizingWeights<T>, pooled: &[T]) -> T {
    dot(&entry.weights, pooled)
}
