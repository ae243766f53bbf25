use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use chain_core::analytics::{emit_sunburst_class, emit_sunburst_tree, pca3_project, DistanceTable, WeightSet};
use chain_core::chain::{aggregate_class_chain, explain_instance, InstanceExplanation};
use chain_core::harmonize::{fit_all_levels, fit_layer_concepts, level_of_layer, ConceptManifest};
use chain_core::provenance::{sha256_bytes, sha256_file, Provenance};
use chain_core::synthetic::{SyntheticConfig, SyntheticWorkspace};
use chain_core::{ChainTree, ConceptBank, InferenceWeights, Level, NetworkSpec};

use crate::config::RunConfig;
use crate::CliError;

/// JSON document with a provenance block next to its own fields.
#[derive(Serialize)]
struct Stamped<'a, X: Serialize> {
    #[serde(flatten)]
    inner: &'a X,
    provenance: &'a Provenance,
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("outputs serialize");
    text.push('\n');
    write_text(path, &text)
}

fn write_stamped(path: &Path, value: &impl Serialize, prov: &Provenance) -> Result<(), CliError> {
    write_json(path, &Stamped { inner: value, provenance: prov })
}

fn load_net(cfg: &RunConfig) -> Result<(NetworkSpec, PathBuf), CliError> {
    let path = cfg.net_path()?.to_path_buf();
    Ok((chain_core::netcore::load_network(&path)?, path))
}

fn load_manifest(cfg: &RunConfig) -> Result<(ConceptManifest, PathBuf), CliError> {
    let path = cfg.manifest_path()?.to_path_buf();
    Ok((ConceptManifest::load(&path)?, path))
}

/// Digest over every tensor the manifest references, in sample order.
fn tensors_digest(manifest: &ConceptManifest) -> Result<String, CliError> {
    let mut all = String::new();
    for id in manifest.sample_ids() {
        let path = manifest.tensor_path(&id)?;
        if !path.is_file() {
            return Err(CliError::missing_input(format!(
                "tensor for sample `{id}` not found at {}",
                path.display()
            )));
        }
        all.push_str(&sha256_file(&path)?);
    }
    Ok(sha256_bytes(all.as_bytes()))
}

fn base_provenance(cfg: &RunConfig, net: &Path, manifest: &Path) -> Result<Provenance, CliError> {
    Ok(Provenance::new(&cfg.hyper)
        .with_file("net", net)?
        .with_file("manifest", manifest)?)
}

fn banks_dir(out: &Path) -> PathBuf {
    out.join("banks")
}

fn bank_path(out: &Path, level: Level) -> PathBuf {
    banks_dir(out).join(format!("{level}.json"))
}

// ---------------------------------------------------------------------------

pub fn harmonize(cfg: &RunConfig) -> Result<(), CliError> {
    let (net, net_path) = load_net(cfg)?;
    let (manifest, manifest_path) = load_manifest(cfg)?;
    let out = cfg.out_dir()?;
    let prov = base_provenance(cfg, &net_path, &manifest_path)?
        .with_digest("tensors", tensors_digest(&manifest)?);
    let admm = cfg.hyper.admm();
    let banks: BTreeMap<Level, ConceptBank> = match &cfg.layer {
        Some(layer) => {
            let level = level_of_layer(&net, layer)?;
            let bank = fit_layer_concepts(&net, &manifest, layer, cfg.hyper.lambda, &admm)?;
            BTreeMap::from([(level, bank)])
        }
        None => fit_all_levels(&net, &manifest, cfg.hyper.lambda, &admm)?,
    };
    let mut failures = Vec::new();
    for (level, mut bank) in banks.into_iter().rev() {
        println!("{level} ({}): {} concepts", bank.layer, bank.len());
        for c in &bank.concepts {
            let nz = c.weights.iter().filter(|&&w| w != 0.0).count();
            let loss = c.fit.as_ref().map_or(f64::NAN, |f| f.loss);
            println!("  {:<24} nonzeros {:>3}  loss {:.6}", c.concept_id, nz, loss);
        }
        for f in &bank.failures {
            failures.push(format!("{level}/{}: {}", f.concept_id, f.message));
        }
        bank.provenance = Some(prov.clone());
        write_json(&bank_path(out, level), &bank)?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::internal(format!(
            "harmonizing failed for {} concept(s):\n  {}",
            failures.len(),
            failures.join("\n  ")
        )))
    }
}

fn load_banks(out: &Path, net: &NetworkSpec) -> Result<(BTreeMap<Level, ConceptBank>, BTreeMap<String, String>), CliError> {
    let mut banks = BTreeMap::new();
    let mut digests = BTreeMap::new();
    for &level in net.level_map().keys() {
        let path = bank_path(out, level);
        if path.is_file() {
            digests.insert(format!("bank.{level}"), sha256_file(&path)?);
            banks.insert(level, ConceptBank::load(&path)?);
        }
    }
    if !banks.contains_key(&Level::Scene) {
        return Err(CliError::missing_prerequisite(format!(
            "no scene-level concept bank at {}; run `chain harmonize` first",
            bank_path(out, Level::Scene).display()
        )));
    }
    Ok((banks, digests))
}

struct InstanceContext {
    net: NetworkSpec,
    manifest: ConceptManifest,
    banks: BTreeMap<Level, ConceptBank>,
    provenance: Provenance,
}

impl InstanceContext {
    fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let (net, net_path) = load_net(cfg)?;
        let (manifest, manifest_path) = load_manifest(cfg)?;
        let (banks, digests) = load_banks(cfg.out_dir()?, &net)?;
        let mut provenance = base_provenance(cfg, &net_path, &manifest_path)?;
        provenance.inputs.extend(digests);
        Ok(InstanceContext { net, manifest, banks, provenance })
    }

    fn explain(&self, cfg: &RunConfig, sample_id: &str) -> Result<(InstanceExplanation<f64>, Provenance), CliError> {
        if !self.manifest.contains_sample(sample_id) {
            return Err(CliError::unknown_id(format!("sample `{sample_id}` is not in the manifest")));
        }
        let tensor_path = self.manifest.tensor_path(sample_id)?;
        if !tensor_path.is_file() {
            return Err(CliError::missing_input(format!(
                "tensor for `{sample_id}` not found at {}",
                tensor_path.display()
            )));
        }
        let input = self.manifest.load_input(sample_id)?;
        let prov = self.provenance.clone().with_file("input", &tensor_path)?;
        let ex = explain_instance(&self.net, &input, sample_id, &self.banks, &cfg.hyper.chain())?;
        Ok((ex, prov))
    }
}

fn write_instance(dir: &Path, ex: &InstanceExplanation<f64>, prov: &Provenance) -> Result<(), CliError> {
    write_stamped(&dir.join("tree.json"), &ex.tree, prov)?;
    write_stamped(&dir.join("sunburst.json"), &emit_sunburst_tree(&ex.tree)?, prov)?;
    write_stamped(&dir.join("inference.json"), &serde_json::json!({ "inferences": &ex.inferences }), prov)?;
    for inf in &ex.inferences {
        let c = &inf.weights.deep_concept;
        write_stamped(
            &dir.join("weights").join(format!("{}__{}.json", c.level, c.concept_id)),
            &inf.weights,
            prov,
        )?;
    }
    for (level, ds) in &ex.datasets {
        let mut text = format!("{}\n", serde_json::to_string(&Stamped { inner: &ds.header(), provenance: prov }).expect("header serializes"));
        let body = ds.to_jsonl_string();
        text.push_str(body.split_once('\n').map_or("", |(_, rest)| rest));
        write_text(&dir.join(format!("perturbation_{level}.jsonl")), &text)?;
    }
    Ok(())
}

fn echo_tree(tree: &ChainTree) {
    println!("instance {}: predicted `{}`", tree.instance_id, tree.predicted_class);
    let mut by_level: BTreeMap<Level, Vec<String>> = BTreeMap::new();
    fn walk(n: &chain_core::ChainNode, out: &mut BTreeMap<Level, Vec<String>>) {
        let label = match &n.note {
            Some(note) => format!("{} ({:.4}; {note})", n.concept_id, n.contribution),
            None => format!("{} ({:.4})", n.concept_id, n.contribution),
        };
        out.entry(n.level).or_default().push(label);
        n.children.iter().for_each(|c| walk(c, out));
    }
    walk(&tree.root, &mut by_level);
    for (level, items) in by_level.iter().rev() {
        println!("  {level:<8} {}", items.join(", "));
    }
    let path: Vec<String> = tree.max_contribution_path().into_iter().map(|(_, id)| id).collect();
    println!("  path     {}", path.join(" → "));
}

pub fn explain_instance_cmd(cfg: &RunConfig, sample_id: &str) -> Result<ChainTree, CliError> {
    let ctx = InstanceContext::load(cfg)?;
    let (ex, prov) = ctx.explain(cfg, sample_id)?;
    write_instance(&cfg.out_dir()?.join("instances").join(sample_id), &ex, &prov)?;
    echo_tree(&ex.tree);
    Ok(ex.tree)
}

pub fn explain_class_cmd(cfg: &RunConfig, class_id: &str, sample_ids: &[String]) -> Result<chain_core::ClassChain, CliError> {
    if sample_ids.is_empty() {
        return Err(CliError::missing_input("explain-class needs at least one sample id".into()));
    }
    let ctx = InstanceContext::load(cfg)?;
    if !ctx.net.class_names().iter().any(|c| c == class_id) {
        return Err(CliError::unknown_id(format!("class `{class_id}` is not a network output")));
    }
    let out = cfg.out_dir()?.join("classes").join(class_id);
    let mut trees = Vec::with_capacity(sample_ids.len());
    let mut prov = ctx.provenance.clone();
    for id in sample_ids {
        let (ex, p) = ctx.explain(cfg, id)?;
        if ex.tree.predicted_class != class_id {
            return Err(CliError::invalid(format!(
                "sample `{id}` is predicted as `{}`, not `{class_id}`",
                ex.tree.predicted_class
            )));
        }
        if let Some(d) = p.inputs.get("input") {
            prov.inputs.insert(format!("input.{id}"), d.clone());
        }
        write_stamped(&out.join("members").join(format!("{id}.json")), &ex.tree, &p)?;
        trees.push(ex.tree);
    }
    let class = aggregate_class_chain(&trees, cfg.hyper.share_fraction)?;
    write_stamped(&out.join("class_chain.json"), &class, &prov)?;
    write_stamped(&out.join("sunburst.json"), &emit_sunburst_class(&class)?, &prov)?;
    println!("class `{class_id}` over {} instance(s), share ≥ {}", trees.len(), cfg.hyper.share_fraction);
    for (level, items) in class.concepts_by_level().iter().rev() {
        let list: Vec<String> = items.iter().map(|(id, c)| format!("{id} ({c:.4})")).collect();
        println!("  {level:<8} {}", list.join(", "));
    }
    Ok(class)
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DistanceDoc<'a> {
    table: &'a DistanceTable<f64>,
    sets: Vec<(&'a str, Vec<&'a str>)>,
}

pub fn distances(cfg: &RunConfig, grouping: &Path) -> Result<DistanceTable<f64>, CliError> {
    if !grouping.is_file() {
        return Err(CliError::missing_input(format!("no such grouping file {}", grouping.display())));
    }
    let out = cfg.out_dir()?;
    let base = grouping.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(grouping)
        .map_err(|e| CliError::invalid(format!("{}: {e}", grouping.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::invalid(format!("{}: {e}", grouping.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["set_id", "file"] {
        return Err(CliError::invalid(format!("{}: expected header `set_id,file`", grouping.display())));
    }
    let mut prov = Provenance::new(&cfg.hyper).with_file("grouping", grouping)?;
    let mut members: Vec<(String, Vec<(String, InferenceWeights)>)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::invalid(format!("{}: {e}", grouping.display())))?;
        let (set_id, file) = (rec[0].to_string(), rec[1].to_string());
        let path = base.join(&file);
        if !path.is_file() {
            return Err(CliError::missing_input(format!("set `{set_id}`: no such file {}", path.display())));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let w: InferenceWeights = serde_json::from_str(&text)
            .map_err(|e| CliError::invalid(format!("{}: not inference weights: {e}", path.display())))?;
        prov.inputs.insert(format!("{set_id}/{file}"), sha256_bytes(text.as_bytes()));
        match members.iter_mut().find(|(s, _)| *s == set_id) {
            Some((_, m)) => m.push((file, w)),
            None => members.push((set_id, vec![(file, w)])),
        }
    }
    let sets: Vec<WeightSet<f64>> = members
        .into_iter()
        .map(|(id, m)| WeightSet::from_inference(id, m))
        .collect::<Result<_, _>>()?;
    let table = DistanceTable::compute(&sets)?;
    write_text(&out.join("distances.csv"), &table.to_csv())?;
    let doc = DistanceDoc {
        table: &table,
        sets: sets
            .iter()
            .map(|s| (s.set_id.as_str(), s.members.iter().map(|(i, _)| i.as_str()).collect()))
            .collect(),
    };
    write_stamped(&out.join("distances.json"), &doc, &prov)?;
    print!("{}", table.to_csv());
    let total: usize = sets.iter().map(|s| s.len()).sum();
    if total >= 3 && sets[0].dim()? >= 3 {
        let pca = pca3_project(&sets)?;
        write_text(&out.join("pca.csv"), &pca.to_csv())?;
        write_stamped(&out.join("pca.json"), &pca, &prov)?;
        if pca.degenerate {
            eprintln!("warning: pooled weights have rank {} < 3; padded with zeros", pca.rank);
        }
    } else {
        eprintln!("note: 3D-PCA skipped (needs ≥ 3 members of dimension ≥ 3)");
    }
    Ok(table)
}

// ---------------------------------------------------------------------------

pub fn demo(cfg: &RunConfig) -> Result<bool, CliError> {
    let out = cfg.out_dir()?.to_path_buf();
    let stage = |name: &'static str| move |e: CliError| e.in_stage(name);

    let synth = SyntheticConfig { seed: cfg.hyper.seed, ..Default::default() };
    let ws = SyntheticWorkspace::generate(&synth).map_err(|e| CliError::from(e).in_stage("generate"))?;
    let data_dir = out.join("workspace");
    ws.write_to(&data_dir).map_err(|e| CliError::from(e).in_stage("generate"))?;

    let mut run = cfg.clone();
    run.net = Some(data_dir.join("net.json"));
    run.manifest = Some(data_dir.join("manifest.csv"));
    run.layer = None;
    harmonize(&run).map_err(stage("harmonize"))?;

    let truth = &ws.truth;
    let tree = explain_instance_cmd(&run, &truth.demo_instance).map_err(stage("explain-instance"))?;
    let class = explain_class_cmd(&run, &truth.class_scene, &truth.class_instances)
        .map_err(stage("explain-class"))?;

    // Distances: each class member's scene-concept weights, and the demo's.
    let mut grouping = String::from("set_id,file\n");
    let weights_file = |id: &str, scene: &str| format!("instances/{id}/weights/scene__{scene}.json");
    for id in &truth.class_instances {
        explain_instance_quiet(&run, id).map_err(stage("distances"))?;
        grouping.push_str(&format!("class,{}\n", weights_file(id, &truth.class_scene)));
    }
    grouping.push_str(&format!("demo,{}\n", weights_file(&truth.demo_instance, &truth.demo_scene)));
    let grouping_path = out.join("groups.csv");
    write_text(&grouping_path, &grouping).map_err(stage("distances"))?;
    distances(&run, &grouping_path).map_err(stage("distances"))?;

    let want = truth.planted_chain(&truth.demo_scene);
    let got = tree.max_contribution_path();
    let instance_ok = got == want;
    let want_class = truth.planted_chain(&truth.class_scene);
    let backbone: std::collections::BTreeSet<_> = want_class.iter().cloned().collect();
    let class_ok = class.concept_set() == backbone;
    let fmt = |p: &[(Level, String)]| p.iter().map(|(_, id)| id.as_str()).collect::<Vec<_>>().join(" → ");
    println!("planted chain     {}", fmt(&want));
    println!("recovered chain   {}", fmt(&got));
    println!("{} instance chain recovered", if instance_ok { "PASS" } else { "FAIL" });
    println!("planted backbone  {}", fmt(&want_class));
    let shared: Vec<_> = class.concept_set().into_iter().rev().map(|(_, id)| id).collect();
    println!("class concepts    {}", shared.join(", "));
    println!("{} class chain equals backbone", if class_ok { "PASS" } else { "FAIL" });
    Ok(instance_ok && class_ok)
}

fn explain_instance_quiet(cfg: &RunConfig, sample_id: &str) -> Result<(), CliError> {
    let ctx = InstanceContext::load(cfg)?;
    let (ex, prov) = ctx.explain(cfg, sample_id)?;
    write_instance(&cfg.out_dir()?.join("instances").join(sample_id), &ex, &prov)
}
