//! Perturbation datasets: sample binary channel gates for a shallow layer,
//! run the gated network, and record the shallow GAP features together with
//! every deep concept's pooled response.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ChainError, Result};
use crate::harmonize::{concept_saliency, ConceptBank, HarmonizingWeights};
use crate::linalg::Matrix;
use crate::netcore::{gap, GateVector, GatedRunner, NetworkSpec, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSamplerConfig {
    pub num_samples: usize,
    pub keep_probability: f64,
    pub seed: u64,
    pub include_all_ones: bool,
}

impl GateSamplerConfig {
    /// `max(10·units, 200)` samples, keep probability 0.5, all-ones first.
    pub fn for_units(units: usize, seed: u64) -> Self {
        GateSamplerConfig {
            num_samples: default_num_samples(units),
            keep_probability: 0.5,
            seed,
            include_all_ones: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(ChainError::InvalidArgument(
                "gate sampler needs at least one sample".into(),
            ));
        }
        if !(self.keep_probability > 0.0 && self.keep_probability <= 1.0) {
            return Err(ChainError::InvalidArgument(format!(
                "keep probability must lie in (0, 1], got {}",
                self.keep_probability
            )));
        }
        Ok(())
    }
}

pub fn default_num_samples(units: usize) -> usize {
    (10 * units).max(200)
}

/// `sqrt(units) / 2`
pub fn default_sigma<T: Scalar>(units: usize) -> T {
    T::from_count(units).sqrt() / T::lit(2.0)
}

/// Independent Bernoulli(p) gates per unit, deterministic in the seed.
pub fn sample_gates(config: &GateSamplerConfig, num_units: usize) -> Result<Vec<GateVector>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.num_samples);
    if config.include_all_ones {
        out.push(GateVector::all_open(num_units));
    }
    while out.len() < config.num_samples {
        let g = (0..num_units)
            .map(|_| rng.gen_bool(config.keep_probability))
            .collect();
        out.push(GateVector(g));
    }
    Ok(out)
}

/// `exp(−‖e − 1‖² / σ²)`
pub fn proximity_weight<T: Scalar>(gates: &GateVector, sigma: T) -> T {
    let closed = T::from_count(gates.closed_count());
    (-closed / (sigma * sigma)).exp()
}

/// Pooled response of a deep concept with the shallow layer gated.
pub fn concept_response<T: Scalar>(
    net: &NetworkSpec<T>,
    input: &Tensor<T>,
    gates: &GateVector,
    gate_layer: &str,
    entry: &HarmonizingWeights<T>,
    deep_layer: &str,
) -> Result<T> {
    if entry.layer != deep_layer {
        return Err(ChainError::InvalidArgument(format!(
            "concept `{}` belongs to layer `{}`, not `{deep_layer}`",
            entry.concept_id, entry.layer
        )));
    }
    let acts = net.forward_with_gates(input, gate_layer, gates)?;
    concept_saliency(entry, acts.require(deep_layer)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct PerturbationRecord<T> {
    pub gates: GateVector,
    #[serde(rename = "x")]
    pub shallow_gap: Vec<T>,
    #[serde(rename = "y")]
    pub concept_responses: BTreeMap<String, T>,
    #[serde(rename = "h")]
    pub proximity: T,
}

/// Header line of the JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct PerturbationHeader<T> {
    pub shallow_layer: String,
    pub deep_layer: String,
    pub sigma: T,
    pub sampler: GateSamplerConfig,
    pub seed: u64,
    pub concepts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDataset<T> {
    pub shallow_layer: String,
    pub deep_layer: String,
    pub sigma: T,
    pub sampler: GateSamplerConfig,
    /// Deep concepts with a response in every record, in bank order.
    pub concepts: Vec<String>,
    pub records: Vec<PerturbationRecord<T>>,
}

impl<T: Scalar> PerturbationDataset<T> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn units(&self) -> usize {
        self.records.first().map_or(0, |r| r.gates.len())
    }

    /// `N × I` matrix of shallow GAP features.
    pub fn features(&self) -> Result<Matrix<T>> {
        Matrix::from_rows(&self.records.iter().map(|r| r.shallow_gap.clone()).collect::<Vec<_>>())
    }

    pub fn responses(&self, concept_id: &str) -> Result<Vec<T>> {
        self.records
            .iter()
            .map(|r| {
                r.concept_responses
                    .get(concept_id)
                    .copied()
                    .ok_or_else(|| ChainError::UnknownConcept(concept_id.to_string()))
            })
            .collect()
    }

    pub fn proximities(&self) -> Vec<T> {
        self.records.iter().map(|r| r.proximity).collect()
    }

    pub fn distinct_gate_vectors(&self) -> usize {
        self.records
            .iter()
            .map(|r| &r.gates)
            .collect::<std::collections::HashSet<_>>()
            .len()
    }

    pub fn header(&self) -> PerturbationHeader<T> {
        PerturbationHeader {
            shallow_layer: self.shallow_layer.clone(),
            deep_layer: self.deep_layer.clone(),
            sigma: self.sigma,
            sampler: self.sampler.clone(),
            seed: self.sampler.seed,
            concepts: self.concepts.clone(),
        }
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &self.header())?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| ChainError::parse("perturbation dataset", "empty file"))?
            .map_err(|e| ChainError::parse("perturbation dataset", e))?;
        let header: PerturbationHeader<T> = serde_json::from_str(&header_line)
            .map_err(|e| ChainError::parse("perturbation header", e))?;
        let mut records: Vec<PerturbationRecord<T>> = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| ChainError::parse("perturbation dataset", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PerturbationRecord<T> = serde_json::from_str(&line)
                .map_err(|e| ChainError::parse(format!("perturbation record {}", i + 1), e))?;
            if let Some(first) = records.first() {
                if first.gates.len() != rec.gates.len() {
                    return Err(ChainError::InvalidDataset(format!(
                        "record {} has {} gates, expected {}",
                        i + 1,
                        rec.gates.len(),
                        first.gates.len()
                    )));
                }
            }
            records.push(rec);
        }
        Ok(PerturbationDataset {
            shallow_layer: header.shallow_layer,
            deep_layer: header.deep_layer,
            sigma: header.sigma,
            sampler: header.sampler,
            concepts: header.concepts,
            records,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| ChainError::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}

/// Builds the dataset `{e_n, x_n, y_n, h(e_n)}` for one input. One shared
/// gate sample set serves every concept in `bank`; record order follows
/// sample order.
pub fn generate_perturbation_dataset<T: Scalar>(
    net: &NetworkSpec<T>,
    input: &Tensor<T>,
    shallow_layer: &str,
    deep_layer: &str,
    bank: &ConceptBank<T>,
    sampler: &GateSamplerConfig,
    sigma: Option<T>,
) -> Result<PerturbationDataset<T>> {
    let shallow_idx = net.layer_index(shallow_layer)?;
    let deep_idx = net.layer_index(deep_layer)?;
    if deep_idx <= shallow_idx {
        return Err(ChainError::InvalidArgument(format!(
            "deep layer `{deep_layer}` must come after shallow layer `{shallow_layer}`"
        )));
    }
    if bank.layer != deep_layer {
        return Err(ChainError::InvalidArgument(format!(
            "bank is for layer `{}`, deep layer is `{deep_layer}`",
            bank.layer
        )));
    }
    let runner = GatedRunner::new(net, input, shallow_layer)?;
    let units = runner.gate_units();
    let sigma = sigma.unwrap_or_else(|| default_sigma(units));
    if !(sigma > T::zero()) {
        return Err(ChainError::InvalidArgument(format!(
            "proximity bandwidth must be positive, got {sigma}"
        )));
    }
    let gates = sample_gates(sampler, units)?;
    let records = gates
        .into_par_iter()
        .map(|g| {
            let acts = runner.run(&g)?;
            let shallow_gap = gap(acts.require(shallow_layer)?);
            let deep = acts.require(deep_layer)?;
            let concept_responses = bank
                .concepts
                .iter()
                .map(|c| Ok((c.concept_id.clone(), concept_saliency(c, deep)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let proximity = proximity_weight(&g, sigma);
            Ok(PerturbationRecord {
                gates: g,
                shallow_gap,
                concept_responses,
                proximity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbationDataset {
        shallow_layer: shallow_layer.to_string(),
        deep_layer: deep_layer.to_string(),
        sigma,
        sampler: sampler.clone(),
        concepts: bank.concept_ids().into_iter().map(String::from).collect(),
        records,
    })
}
