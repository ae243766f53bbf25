//! Explanation trees. An instance tree starts at the predicted scene concept
//! and descends one semantic level at a time: scene→object and object→part
//! use the ε-sparse decomposition, part→material and material→color keep
//! only the concept with the largest directional derivative. Class chains
//! merge instance trees, keeping concepts shared by enough members.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ChainError, Result};
use crate::harmonize::{concept_saliency, ConceptBank};
use crate::inference::{
    decompose_concept, fit_hierarchical_inference, top_concept, ContributionVector,
    InferenceWeights,
};
use crate::netcore::{Activations, Level, NetworkSpec, Tensor};
use crate::perturb::{default_num_samples, generate_perturbation_dataset, GateSamplerConfig, PerturbationDataset};
use crate::scalar::Scalar;
use crate::solvers::AdmmConfig;

pub const CHAIN_SCHEMA: &str = "chain.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ChainConfig<T> {
    /// Inference λ; `None` uses the scale-aware default per dataset.
    pub lambda: Option<T>,
    pub epsilon: usize,
    /// Proximity bandwidth; `None` uses `sqrt(I)/2`.
    pub sigma: Option<T>,
    pub keep_probability: f64,
    /// Gate samples per dataset; `None` uses `max(10·I, 200)`.
    pub num_samples: Option<usize>,
    pub seed: u64,
    pub admm: AdmmConfig<T>,
    /// Object nodes expanded below the scene root.
    pub expand_objects: usize,
    /// Part nodes expanded below each object.
    pub expand_parts: usize,
    /// Only positive decomposition entries reaching this fraction of the
    /// largest one are attached to the tree.
    pub min_relative_contribution: f64,
}

impl<T: Scalar> Default for ChainConfig<T> {
    fn default() -> Self {
        ChainConfig {
            lambda: None,
            epsilon: 5,
            sigma: None,
            keep_probability: 0.5,
            num_samples: None,
            seed: 0,
            admm: AdmmConfig::default(),
            expand_objects: 3,
            expand_parts: 2,
            min_relative_contribution: 0.1,
        }
    }
}

impl<T: Scalar> ChainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon == 0 {
            return Err(ChainError::InvalidArgument("epsilon must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.min_relative_contribution) {
            return Err(ChainError::InvalidArgument(format!(
                "min_relative_contribution must lie in [0, 1), got {}",
                self.min_relative_contribution
            )));
        }
        self.admm.validate()
    }

    fn sampler(&self, units: usize, shallow_layer: &str) -> GateSamplerConfig {
        GateSamplerConfig {
            num_samples: self.num_samples.unwrap_or_else(|| default_num_samples(units)),
            keep_probability: self.keep_probability,
            seed: layer_seed(self.seed, shallow_layer),
            include_all_ones: true,
        }
    }

    fn budget(&self, level: Level) -> usize {
        match level {
            Level::Scene => self.expand_objects,
            Level::Object => self.expand_parts,
            _ => usize::MAX,
        }
    }
}

/// Deterministic per-layer seed: FNV-1a of the layer name mixed into the
/// run seed with a splitmix64 finaliser.
pub fn layer_seed(seed: u64, layer: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in layer.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Levels whose children come from the ε-sparse decomposition; the rest
/// keep a single top concept.
pub fn uses_decomposition(level: Level) -> bool {
    matches!(level, Level::Scene | Level::Object)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ChainNode<T> {
    pub concept_id: String,
    pub level: Level,
    /// α from the parent's decomposition, or the directional derivative at
    /// single-selection levels. The root carries its saliency.
    pub contribution: T,
    pub saliency: T,
    pub children: Vec<ChainNode<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl<T: Scalar> ChainNode<T> {
    fn leaf(concept_id: String, level: Level, contribution: T, saliency: T) -> Self {
        ChainNode {
            concept_id,
            level,
            contribution,
            saliency,
            children: Vec::new(),
            note: None,
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(ChainNode::node_count).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(ChainNode::depth).max().unwrap_or(0)
    }

    fn check(&self) -> Result<()> {
        if !self.contribution.is_finite() {
            return Err(ChainError::InvalidArgument(format!(
                "node `{}` has a non-finite contribution",
                self.concept_id
            )));
        }
        for c in &self.children {
            if Some(c.level) != self.level.shallower() {
                return Err(ChainError::InvalidArgument(format!(
                    "edge `{}`({}) → `{}`({}) skips a level",
                    self.concept_id, self.level, c.concept_id, c.level
                )));
            }
            c.check()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ChainTree<T> {
    pub schema: String,
    pub instance_id: String,
    pub predicted_class: String,
    pub root: ChainNode<T>,
    pub config: ChainConfig<T>,
}

impl<T: Scalar> ChainTree<T> {
    /// Root is a scene node, depth is at most five, every edge joins
    /// adjacent levels and contributions are finite.
    pub fn validate(&self) -> Result<()> {
        if self.schema != CHAIN_SCHEMA {
            return Err(ChainError::parse("chain tree", format!("unknown schema `{}`", self.schema)));
        }
        if self.root.level != Level::Scene {
            return Err(ChainError::InvalidArgument("tree root must be a scene concept".into()));
        }
        if self.root.depth() > 5 {
            return Err(ChainError::InvalidArgument("tree deeper than five levels".into()));
        }
        self.root.check()
    }

    /// Follows the child with the largest contribution from the root.
    pub fn max_contribution_path(&self) -> Vec<(Level, String)> {
        let mut out = vec![(self.root.level, self.root.concept_id.clone())];
        let mut node = &self.root;
        while let Some(next) = node.children.iter().fold(None::<&ChainNode<T>>, |best, c| match best {
            Some(b) if b.contribution >= c.contribution => Some(b),
            _ => Some(c),
        }) {
            out.push((next.level, next.concept_id.clone()));
            node = next;
        }
        out
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let tree: ChainTree<T> =
            serde_json::from_str(text).map_err(|e| ChainError::parse("chain tree", e))?;
        tree.validate()?;
        Ok(tree)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ChainError::io(path, e))?;
        Self::from_json_str(&text)
    }
}

/// Inference fitted while expanding one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct NodeInference<T> {
    /// Concept ids from the root to the expanded node.
    pub path: Vec<String>,
    pub level: Level,
    pub weights: InferenceWeights<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contributions: Option<ContributionVector<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derivatives: Option<BTreeMap<String, T>>,
}

/// A tree plus the intermediate artifacts used to build it.
#[derive(Debug, Clone)]
pub struct InstanceExplanation<T> {
    pub tree: ChainTree<T>,
    pub inferences: Vec<NodeInference<T>>,
    /// One dataset per (deep, shallow) level pair, deepest first.
    pub datasets: Vec<(Level, PerturbationDataset<T>)>,
}

struct Context<'a, T> {
    banks: &'a BTreeMap<Level, ConceptBank<T>>,
    config: &'a ChainConfig<T>,
    saliency: BTreeMap<Level, BTreeMap<String, T>>,
    datasets: BTreeMap<Level, std::result::Result<PerturbationDataset<T>, String>>,
}

impl<T: Scalar> Context<'_, T> {
    fn saliency(&self, level: Level, id: &str) -> T {
        self.saliency
            .get(&level)
            .and_then(|m| m.get(id))
            .copied()
            .unwrap_or_else(T::zero)
    }

    fn expand(
        &self,
        level: Level,
        concept_id: String,
        contribution: T,
        path: &[String],
    ) -> (ChainNode<T>, Vec<NodeInference<T>>) {
        let saliency = self.saliency(level, &concept_id);
        let mut node = ChainNode::leaf(concept_id, level, contribution, saliency);
        let mut path = path.to_vec();
        path.push(node.concept_id.clone());
        let Some(shallow) = level.shallower() else {
            return (node, Vec::new());
        };
        let (Some(deep_bank), Some(shallow_bank)) = (self.banks.get(&level), self.banks.get(&shallow))
        else {
            return (node, Vec::new());
        };
        let dataset = match self.datasets.get(&level) {
            Some(Ok(d)) => d,
            Some(Err(e)) => {
                node.note = Some(format!("perturbation failed: {e}"));
                return (node, Vec::new());
            }
            None => return (node, Vec::new()),
        };
        let Some(entry) = deep_bank.get(&node.concept_id) else {
            node.note = Some(format!("concept not in `{level}` bank"));
            return (node, Vec::new());
        };
        let weights = match fit_hierarchical_inference(
            dataset,
            &entry.concept(),
            self.config.lambda,
            &self.config.admm,
        ) {
            Ok(w) => w,
            Err(e) => {
                node.note = Some(format!("inference failed: {e}"));
                return (node, Vec::new());
            }
        };

        let mut record = NodeInference {
            path: path.clone(),
            level,
            weights,
            contributions: None,
            derivatives: None,
        };
        let selected: Vec<(String, T)> = if uses_decomposition(level) {
            match decompose_concept(&record.weights, shallow_bank, self.config.epsilon) {
                Ok(cv) => {
                    let ranked = cv.ranked();
                    record.contributions = Some(cv);
                    prune(ranked, self.config.min_relative_contribution)
                }
                Err(e) => {
                    node.note = Some(format!("decomposition failed: {e}"));
                    return (node, vec![record]);
                }
            }
        } else {
            match (
                top_concept(&record.weights, shallow_bank),
                crate::inference::directional_derivatives(&record.weights, shallow_bank),
            ) {
                (Ok((id, d)), Ok(all)) => {
                    record.derivatives = Some(
                        shallow_bank
                            .concept_ids()
                            .into_iter()
                            .map(String::from)
                            .zip(all)
                            .collect(),
                    );
                    vec![(id, d)]
                }
                (Err(e), _) | (_, Err(e)) => {
                    node.note = Some(format!("concept selection failed: {e}"));
                    return (node, vec![record]);
                }
            }
        };

        let budget = self.config.budget(level);
        let expanded: Vec<(ChainNode<T>, Vec<NodeInference<T>>)> = selected
            .into_par_iter()
            .enumerate()
            .map(|(rank, (id, c))| {
                if rank < budget {
                    self.expand(shallow, id, c, &path)
                } else {
                    let s = self.saliency(shallow, &id);
                    (ChainNode::leaf(id, shallow, c, s), Vec::new())
                }
            })
            .collect();
        let mut records = vec![record];
        for (child, recs) in expanded {
            node.children.push(child);
            records.extend(recs);
        }
        (node, records)
    }
}

// Only supporting concepts become children; inhibitory (negative) entries
// stay in the stored contribution vector but are not expanded.
fn prune<T: Scalar>(ranked: Vec<(String, T)>, min_rel: f64) -> Vec<(String, T)> {
    let max = ranked.iter().fold(T::zero(), |m, (_, a)| m.max(*a));
    if max <= T::zero() {
        return Vec::new();
    }
    let cutoff = max * T::lit(min_rel);
    ranked.into_iter().filter(|(_, a)| *a > T::zero() && *a >= cutoff).collect()
}

fn level_saliencies<T: Scalar>(
    banks: &BTreeMap<Level, ConceptBank<T>>,
    acts: &Activations<T>,
) -> Result<BTreeMap<Level, BTreeMap<String, T>>> {
    let mut out = BTreeMap::new();
    for (&level, bank) in banks {
        let act = acts.require(&bank.layer)?;
        let mut m = BTreeMap::new();
        for c in &bank.concepts {
            m.insert(c.concept_id.clone(), concept_saliency(c, act)?);
        }
        out.insert(level, m);
    }
    Ok(out)
}

/// Builds the instance tree together with every fitted inference and the
/// perturbation datasets behind them.
pub fn explain_instance<T: Scalar>(
    net: &NetworkSpec<T>,
    input: &Tensor<T>,
    instance_id: &str,
    banks: &BTreeMap<Level, ConceptBank<T>>,
    config: &ChainConfig<T>,
) -> Result<InstanceExplanation<T>> {
    config.validate()?;
    let scene_bank = banks
        .get(&Level::Scene)
        .ok_or_else(|| ChainError::InvalidArgument("no scene-level concept bank".into()))?;
    if scene_bank.is_empty() {
        return Err(ChainError::InvalidArgument("scene-level concept bank is empty".into()));
    }
    for (&level, bank) in banks {
        if bank.level != level {
            return Err(ChainError::InvalidArgument(format!(
                "bank for layer `{}` is labelled `{}`, supplied as `{level}`",
                bank.layer, bank.level
            )));
        }
    }
    let acts = net.forward(input)?;
    let predicted_class = net.class_name(net.predict(&acts));
    let saliency = level_saliencies(banks, &acts)?;

    let root_id = if scene_bank.get(&predicted_class).is_some() {
        predicted_class.clone()
    } else {
        let scores = &saliency[&Level::Scene];
        let best = scene_bank
            .concepts
            .iter()
            .map(|c| (c.concept_id.clone(), scores[&c.concept_id]))
            .fold(None::<(String, T)>, |best, (id, s)| match best {
                Some((bid, bs)) if bs >= s => Some((bid, bs)),
                _ => Some((id, s)),
            })
            .expect("nonempty bank");
        best.0
    };

    let pairs: Vec<(Level, Level)> = Level::TOP_DOWN
        .iter()
        .filter_map(|&deep| deep.shallower().map(|s| (deep, s)))
        .filter(|(d, s)| banks.contains_key(d) && banks.contains_key(s))
        .collect();
    let datasets: BTreeMap<Level, std::result::Result<PerturbationDataset<T>, String>> = pairs
        .par_iter()
        .map(|&(deep, shallow)| {
            let deep_bank = &banks[&deep];
            let shallow_layer = &banks[&shallow].layer;
            let ds = net
                .units(shallow_layer)
                .and_then(|units| {
                    generate_perturbation_dataset(
                        net,
                        input,
                        shallow_layer,
                        &deep_bank.layer,
                        deep_bank,
                        &config.sampler(units, shallow_layer),
                        config.sigma,
                    )
                })
                .map_err(|e| e.to_string());
            (deep, ds)
        })
        .collect();

    let ctx = Context {
        banks,
        config,
        saliency,
        datasets,
    };
    let root_saliency = ctx.saliency(Level::Scene, &root_id);
    let (root, inferences) = ctx.expand(Level::Scene, root_id, root_saliency, &[]);
    let tree = ChainTree {
        schema: CHAIN_SCHEMA.to_string(),
        instance_id: instance_id.to_string(),
        predicted_class,
        root,
        config: config.clone(),
    };
    tree.validate()?;
    let datasets = ctx
        .datasets
        .into_iter()
        .rev()
        .filter_map(|(l, d)| d.ok().map(|d| (l, d)))
        .collect();
    Ok(InstanceExplanation {
        tree,
        inferences,
        datasets,
    })
}

pub fn build_instance_chain<T: Scalar>(
    net: &NetworkSpec<T>,
    input: &Tensor<T>,
    instance_id: &str,
    banks: &BTreeMap<Level, ConceptBank<T>>,
    config: &ChainConfig<T>,
) -> Result<ChainTree<T>> {
    explain_instance(net, input, instance_id, banks, config).map(|e| e.tree)
}

// ---------------------------------------------------------------------------
// Class level

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ClassNode<T> {
    pub concept_id: String,
    pub level: Level,
    /// Mean contribution over all member trees, counting absence as zero.
    pub contribution: T,
    /// Fraction of member trees containing the concept at this position.
    pub support: f64,
    /// Mean saliency over the trees that contain the concept.
    pub saliency: T,
    pub children: Vec<ClassNode<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ClassChain<T> {
    pub schema: String,
    pub class_id: String,
    pub members: Vec<String>,
    pub share_fraction: f64,
    pub roots: Vec<ClassNode<T>>,
}

impl<T: Scalar> ClassChain<T> {
    /// Shared concepts per level with their class contributions. A concept
    /// reached through several branches is listed once, with its largest
    /// contribution.
    pub fn concepts_by_level(&self) -> BTreeMap<Level, BTreeMap<String, T>> {
        fn walk<T: Scalar>(n: &ClassNode<T>, out: &mut BTreeMap<Level, BTreeMap<String, T>>) {
            let slot = out.entry(n.level).or_default();
            let e = slot.entry(n.concept_id.clone()).or_insert(n.contribution);
            if n.contribution > *e {
                *e = n.contribution;
            }
            for c in &n.children {
                walk(c, out);
            }
        }
        let mut out = BTreeMap::new();
        for r in &self.roots {
            walk(r, &mut out);
        }
        out
    }

    /// From the strongest root, follows the child with the largest class
    /// contribution.
    pub fn max_contribution_path(&self) -> Vec<(Level, String)> {
        fn strongest<T: Scalar>(nodes: &[ClassNode<T>]) -> Option<&ClassNode<T>> {
            nodes.iter().fold(None, |best, c| match best {
                Some(b) if b.contribution >= c.contribution => Some(b),
                _ => Some(c),
            })
        }
        let mut out = Vec::new();
        let mut next = strongest(&self.roots);
        while let Some(n) = next {
            out.push((n.level, n.concept_id.clone()));
            next = strongest(&n.children);
        }
        out
    }

    pub fn concept_set(&self) -> BTreeSet<(Level, String)> {
        self.concepts_by_level()
            .into_iter()
            .flat_map(|(l, m)| m.into_keys().map(move |id| (l, id)))
            .collect()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("class chain serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ChainError::parse("class chain", e))
    }
}

fn merge_level<T: Scalar>(
    nodes: Vec<(usize, &ChainNode<T>)>,
    total: usize,
    share_fraction: f64,
) -> Vec<ClassNode<T>> {
    let mut groups: BTreeMap<&str, Vec<(usize, &ChainNode<T>)>> = BTreeMap::new();
    for (tree, node) in nodes {
        groups.entry(node.concept_id.as_str()).or_default().push((tree, node));
    }
    let denom = T::from_count(total);
    let mut out: Vec<ClassNode<T>> = groups
        .into_iter()
        .filter_map(|(id, members)| {
            let trees: BTreeSet<usize> = members.iter().map(|(t, _)| *t).collect();
            let support = trees.len() as f64 / total as f64;
            if (trees.len() as f64) < share_fraction * total as f64 - 1e-9 {
                return None;
            }
            let contribution = members.iter().map(|(_, n)| n.contribution).sum::<T>() / denom;
            let saliency = members.iter().map(|(_, n)| n.saliency).sum::<T>()
                / T::from_count(members.len());
            let children_in: Vec<(usize, &ChainNode<T>)> = members
                .iter()
                .flat_map(|&(t, n)| n.children.iter().map(move |c| (t, c)))
                .collect();
            Some(ClassNode {
                concept_id: id.to_string(),
                level: members[0].1.level,
                contribution,
                support,
                saliency,
                children: merge_level(children_in, total, share_fraction),
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.contribution
            .partial_cmp(&a.contribution)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.concept_id.cmp(&b.concept_id))
    });
    out
}

/// Keeps, position by position, the concepts present in at least
/// `share_fraction` of the trees. A child is only considered under a kept
/// parent, so raising the fraction never adds concepts.
pub fn aggregate_class_chain<T: Scalar>(
    trees: &[ChainTree<T>],
    share_fraction: f64,
) -> Result<ClassChain<T>> {
    let first = trees
        .first()
        .ok_or_else(|| ChainError::InvalidArgument("class chain needs at least one tree".into()))?;
    if !(share_fraction > 0.0 && share_fraction <= 1.0) {
        return Err(ChainError::InvalidArgument(format!(
            "share fraction must lie in (0, 1], got {share_fraction}"
        )));
    }
    if let Some(other) = trees.iter().find(|t| t.predicted_class != first.predicted_class) {
        return Err(ChainError::InvalidArgument(format!(
            "mixed classes: `{}` predicted `{}`, `{}` predicted `{}`",
            first.instance_id, first.predicted_class, other.instance_id, other.predicted_class
        )));
    }
    let roots = merge_level(
        trees.iter().enumerate().map(|(i, t)| (i, &t.root)).collect(),
        trees.len(),
        share_fraction,
    );
    Ok(ClassChain {
        schema: CHAIN_SCHEMA.to_string(),
        class_id: first.predicted_class.clone(),
        members: trees.iter().map(|t| t.instance_id.clone()).collect(),
        share_fraction,
        roots,
    })
}
