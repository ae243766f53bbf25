//! Toy five-level network with a planted concept hierarchy.
//!
//! Every concept owns one unit in the layer of its level and reads only its
//! own children one level down. Each parent has one planted child with the
//! dominant incoming weight, so following planted children from a scene
//! gives the chain an explanation should recover. Two noise channels run
//! alongside the concepts at every level.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ChainError, Result};
use crate::harmonize::{ConceptManifest, ManifestRow};
use crate::netcore::{Conv2d, LayerOp, LayerSpec, Level, NetworkSpec, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub scenes: usize,
    /// Children per object, part, material and color parent, top-down.
    pub branching: [usize; 4],
    pub noise_channels: usize,
    /// Each noise channel is switched on per sample with this probability.
    pub noise_probability: f64,
    pub height: usize,
    pub width: usize,
    pub harmonizing_samples: usize,
    pub child_probability: f64,
    pub class_instances: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            scenes: 2,
            branching: [3, 2, 2, 2],
            noise_channels: 2,
            noise_probability: 0.3,
            height: 6,
            width: 6,
            harmonizing_samples: 240,
            child_probability: 0.7,
            class_instances: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub level: Level,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub planted_child: Option<String>,
}

/// Ground truth written next to the generated files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub config: SyntheticConfig,
    pub concepts: BTreeMap<String, Concept>,
    pub demo_instance: String,
    pub demo_scene: String,
    pub class_instances: Vec<String>,
    pub class_scene: String,
}

impl PlantedTruth {
    /// Planted children followed from `scene` down to a color.
    pub fn planted_chain(&self, scene: &str) -> Vec<(Level, String)> {
        let mut out = Vec::new();
        let mut cur = self.concepts.get(scene);
        while let Some(c) = cur {
            out.push((c.level, c.id.clone()));
            cur = c.planted_child.as_ref().and_then(|id| self.concepts.get(id));
        }
        out
    }

    pub fn concepts_at(&self, level: Level) -> Vec<&Concept> {
        self.concepts.values().filter(|c| c.level == level).collect()
    }
}

pub struct SyntheticWorkspace {
    pub truth: PlantedTruth,
    pub net: NetworkSpec<f64>,
    pub rows: Vec<ManifestRow>,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

const LEVEL_LAYERS: [(Level, &str, &str); 5] = [
    (Level::Color, "conv_color", "color"),
    (Level::Material, "conv_material", "material"),
    (Level::Part, "conv_part", "part"),
    (Level::Object, "conv_object", "object"),
    (Level::Scene, "conv_scene", "scene"),
];

fn concept_id(level: Level, idx: usize) -> String {
    format!("{}_{idx:02}", level.as_str())
}

impl SyntheticWorkspace {
    pub fn generate(config: &SyntheticConfig) -> Result<Self> {
        if config.scenes < 2 || config.branching.iter().any(|&b| b == 0) {
            return Err(ChainError::InvalidArgument(
                "need at least two scenes and nonzero branching".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        // Concept tree, ids indexed per level.
        let mut ids: BTreeMap<Level, Vec<String>> = BTreeMap::new();
        let mut concepts: BTreeMap<String, Concept> = BTreeMap::new();
        let scenes: Vec<String> = (0..config.scenes).map(|i| concept_id(Level::Scene, i)).collect();
        for s in &scenes {
            concepts.insert(
                s.clone(),
                Concept {
                    id: s.clone(),
                    level: Level::Scene,
                    parent: None,
                    children: Vec::new(),
                    planted_child: None,
                },
            );
        }
        ids.insert(Level::Scene, scenes);
        let mut level = Level::Scene;
        for &b in &config.branching {
            let child_level = level.shallower().expect("branching covers four levels");
            let parents = ids[&level].clone();
            let mut level_ids = Vec::new();
            for p in &parents {
                let kids: Vec<String> = (0..b).map(|j| concept_id(child_level, level_ids.len() + j)).collect();
                for k in &kids {
                    concepts.insert(
                        k.clone(),
                        Concept {
                            id: k.clone(),
                            level: child_level,
                            parent: Some(p.clone()),
                            children: Vec::new(),
                            planted_child: None,
                        },
                    );
                }
                let planted = kids[rng.gen_range(0..b)].clone();
                let pc = concepts.get_mut(p).expect("parent exists");
                pc.children = kids.clone();
                pc.planted_child = Some(planted);
                level_ids.extend(kids);
            }
            ids.insert(child_level, level_ids);
            level = child_level;
        }

        let net = build_network(config, &ids, &concepts, &mut rng)?;

        // Samples.
        let mut samples: Vec<(String, BTreeSet<String>)> = Vec::new();
        for n in 0..config.harmonizing_samples {
            let scene = ids[&Level::Scene][n % config.scenes].clone();
            samples.push((format!("h{n:04}"), draw_present(&scene, &concepts, config.child_probability, &mut rng)));
        }
        let demo_scene = ids[&Level::Scene][rng.gen_range(0..config.scenes)].clone();
        samples.push(("demo".into(), subtree(&demo_scene, &concepts)));
        let class_scene = ids[&Level::Scene][rng.gen_range(0..config.scenes)].clone();
        let mut class_instances = Vec::new();
        for i in 0..config.class_instances {
            let id = format!("class_{i:02}");
            samples.push((id.clone(), class_member(&class_scene, i, &concepts)));
            class_instances.push(id);
        }

        let mut rows = Vec::new();
        let mut tensors = Vec::new();
        for (id, present) in &samples {
            for (&lvl, level_ids) in &ids {
                for c in level_ids {
                    rows.push(ManifestRow {
                        sample_id: id.clone(),
                        level: lvl,
                        concept_id: c.clone(),
                        label: u8::from(present.contains(c)),
                        source: String::new(),
                    });
                }
            }
            tensors.push((id.clone(), render(config, &ids[&Level::Color], present, &mut rng)));
        }

        Ok(SyntheticWorkspace {
            truth: PlantedTruth {
                config: config.clone(),
                concepts,
                demo_instance: "demo".into(),
                demo_scene,
                class_instances,
                class_scene,
            },
            net,
            rows,
            tensors,
        })
    }

    pub fn manifest(&self, base_dir: &Path) -> Result<ConceptManifest> {
        ConceptManifest::new(base_dir, self.rows.clone())
    }

    /// Writes `net.json`, `manifest.csv`, `planted.json` and `tensors/`.
    pub fn write_to(&self, dir: &Path) -> Result<ConceptManifest> {
        let tdir = dir.join("tensors");
        std::fs::create_dir_all(&tdir).map_err(|e| ChainError::io(&tdir, e))?;
        let write = |path: &Path, text: String| {
            std::fs::write(path, text).map_err(|e| ChainError::io(path, e))
        };
        write(&dir.join("net.json"), self.net.to_json_string())?;
        write(
            &dir.join("planted.json"),
            serde_json::to_string_pretty(&self.truth).expect("truth serializes"),
        )?;
        for (id, t) in &self.tensors {
            write(
                &tdir.join(format!("{id}.json")),
                serde_json::to_string(t).expect("tensor serializes"),
            )?;
        }
        let manifest = self.manifest(dir)?;
        manifest.write_csv(dir.join("manifest.csv"))?;
        Ok(manifest)
    }
}

fn subtree(root: &str, concepts: &BTreeMap<String, Concept>) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_string()];
    while let Some(id) = stack.pop() {
        stack.extend(concepts[&id].children.iter().cloned());
        out.insert(id);
    }
    out
}

fn planted_path(root: &str, concepts: &BTreeMap<String, Concept>) -> Vec<String> {
    let mut out = vec![root.to_string()];
    while let Some(next) = &concepts[out.last().expect("nonempty")].planted_child {
        out.push(next.clone());
    }
    out
}

/// Top-down draw: each child of a present concept is present with
/// probability `p`, and at least one child always is.
fn draw_present(
    scene: &str,
    concepts: &BTreeMap<String, Concept>,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![scene.to_string()];
    while let Some(id) = stack.pop() {
        let kids = &concepts[&id].children;
        if !kids.is_empty() {
            let mut chosen: Vec<&String> = kids.iter().filter(|_| rng.gen_bool(p)).collect();
            if chosen.is_empty() {
                chosen.push(kids.choose(rng).expect("nonempty"));
            }
            stack.extend(chosen.into_iter().cloned());
        }
        out.insert(id);
    }
    out
}

/// The planted backbone plus, at each level, one sibling distractor in two
/// out of every five members. A distractor brings its own planted path.
fn class_member(scene: &str, i: usize, concepts: &BTreeMap<String, Concept>) -> BTreeSet<String> {
    let backbone = planted_path(scene, concepts);
    let mut out: BTreeSet<String> = backbone.iter().cloned().collect();
    for (depth, id) in backbone.iter().enumerate().skip(1) {
        if (i + depth) % 5 >= 2 {
            continue;
        }
        let parent = concepts[id].parent.as_ref().expect("non-root");
        let siblings: Vec<&String> = concepts[parent].children.iter().filter(|c| *c != id).collect();
        if let Some(s) = siblings.get(i % siblings.len().max(1)) {
            out.extend(planted_path(s, concepts));
        }
    }
    out
}

fn render(
    config: &SyntheticConfig,
    colors: &[String],
    present: &BTreeSet<String>,
    rng: &mut ChaCha8Rng,
) -> Tensor<f64> {
    let hw = config.height * config.width;
    let channels = colors.len() + config.noise_channels;
    let mut data = vec![0.0; channels * hw];
    for (c, id) in colors.iter().enumerate() {
        if !present.contains(id) {
            continue;
        }
        let amp = rng.gen_range(0.8..1.2);
        for v in &mut data[c * hw..(c + 1) * hw] {
            *v = amp * rng.gen_range(0.9..1.1);
        }
    }
    for c in colors.len()..channels {
        if !rng.gen_bool(config.noise_probability) {
            continue;
        }
        let amp = rng.gen_range(0.5..1.0);
        for v in &mut data[c * hw..(c + 1) * hw] {
            *v = amp * rng.gen_range(0.0..1.0);
        }
    }
    Tensor::from_vec([channels, config.height, config.width], data).expect("shape matches")
}

fn conv1x1(in_channels: usize, out_channels: usize, weights: Vec<f64>) -> Conv2d<f64> {
    Conv2d {
        in_channels,
        out_channels,
        kernel: 1,
        stride: 1,
        padding: 0,
        weights,
        bias: vec![0.0; out_channels],
    }
}

fn build_network(
    config: &SyntheticConfig,
    ids: &BTreeMap<Level, Vec<String>>,
    concepts: &BTreeMap<String, Concept>,
    rng: &mut ChaCha8Rng,
) -> Result<NetworkSpec<f64>> {
    let noise = config.noise_channels;
    let n_colors = ids[&Level::Color].len();
    let mut layers = Vec::new();

    // Colors: per-channel 3x3 smoothing.
    let c = n_colors + noise;
    let mut w = vec![0.0; c * c * 9];
    for ch in 0..c {
        for k in 0..9 {
            w[(ch * c + ch) * 9 + k] = if k == 4 { 0.6 } else { 0.05 };
        }
    }
    layers.push(LayerSpec {
        name: "conv_color".into(),
        op: LayerOp::Conv(Conv2d {
            in_channels: c,
            out_channels: c,
            kernel: 3,
            stride: 1,
            padding: 1,
            weights: w,
            bias: vec![0.0; c],
        }),
    });
    layers.push(LayerSpec { name: "color".into(), op: LayerOp::Relu });

    for &(level, conv, act) in &LEVEL_LAYERS[1..] {
        let child_level = level.shallower().expect("not color");
        let child_ids = &ids[&child_level];
        let index: BTreeMap<&str, usize> =
            child_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let in_c = child_ids.len() + noise;
        let units = &ids[&level];
        let out_c = units.len() + if level == Level::Scene { 0 } else { noise };
        let mut w = vec![0.0; out_c * in_c];
        for (o, id) in units.iter().enumerate() {
            let concept = &concepts[id];
            let planted = concept.planted_child.as_deref();
            let raw: Vec<f64> = concept
                .children
                .iter()
                .map(|k| if Some(k.as_str()) == planted { 1.0 } else { rng.gen_range(0.3..0.5) })
                .collect();
            let total: f64 = raw.iter().sum();
            for (k, r) in concept.children.iter().zip(raw) {
                w[o * in_c + index[k.as_str()]] = r / total;
            }
        }
        if level != Level::Scene {
            let cross = 0.05 / child_ids.len() as f64;
            for j in 0..noise {
                let row = &mut w[(units.len() + j) * in_c..(units.len() + j + 1) * in_c];
                row[..child_ids.len()].iter_mut().for_each(|v| *v = cross);
                row[child_ids.len() + j] = 1.0;
            }
        }
        layers.push(LayerSpec {
            name: conv.into(),
            op: LayerOp::Conv(conv1x1(in_c, out_c, w)),
        });
        layers.push(LayerSpec {
            name: act.into(),
            op: if level == Level::Scene { LayerOp::Gap } else { LayerOp::Relu },
        });
    }

    let level_map = LEVEL_LAYERS
        .iter()
        .map(|&(l, _, act)| (l, act.to_string()))
        .collect();
    NetworkSpec::new(
        [n_colors + noise, config.height, config.width],
        layers,
        level_map,
        ids[&Level::Scene].clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_truth() {
        let ws = SyntheticWorkspace::generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(ws.net.units("color").unwrap(), 50);
        assert_eq!(ws.net.units("object").unwrap(), 8);
        assert_eq!(ws.net.units("scene").unwrap(), 2);
        let chain = ws.truth.planted_chain(&ws.truth.demo_scene);
        assert_eq!(chain.len(), 5);
        assert_eq!(chain[4].0, Level::Color);
    }

    #[test]
    fn demo_instance_predicts_its_scene() {
        let ws = SyntheticWorkspace::generate(&SyntheticConfig::default()).unwrap();
        let (_, t) = ws.tensors.iter().find(|(id, _)| id == "demo").unwrap();
        let acts = ws.net.forward(t).unwrap();
        assert_eq!(ws.net.class_name(ws.net.predict(&acts)), ws.truth.demo_scene);
    }

    #[test]
    fn generation_is_seeded() {
        let a = SyntheticWorkspace::generate(&SyntheticConfig::default()).unwrap();
        let b = SyntheticWorkspace::generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(a.tensors, b.tensors);
        let c = SyntheticWorkspace::generate(&SyntheticConfig { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.tensors, c.tensors);
    }

    #[test]
    fn class_distractors_are_minority() {
        let ws = SyntheticWorkspace::generate(&SyntheticConfig::default()).unwrap();
        let backbone: BTreeSet<String> = ws
            .truth
            .planted_chain(&ws.truth.class_scene)
            .into_iter()
            .map(|(_, id)| id)
            .collect();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for id in &ws.truth.class_instances {
            for r in ws.rows.iter().filter(|r| &r.sample_id == id && r.label == 1) {
                *counts.entry(r.concept_id.clone()).or_default() += 1;
            }
        }
        for (c, n) in counts {
            if backbone.contains(&c) {
                assert_eq!(n, 5);
            } else {
                assert!(n <= 2, "{c} in {n} members");
            }
        }
    }
}
