//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;

use chain_core::harmonize::build_harmonizing_dataset;
use chain_core::inference::{decompose_concept, fit_hierarchical_inference, top_concept};
use chain_core::linalg::Matrix;
use chain_core::perturb::{generate_perturbation_dataset, proximity_weight, GateSamplerConfig, PerturbationDataset};
use chain_core::analytics::{inter_set_distance, intra_set_distance, DistanceTable, WeightSet};
use chain_core::harmonize::concept_saliency;
use chain_core::netcore::gap;
use chain_core::solvers::{admm_weighted_lasso, omp_sparse_decompose, WeightedLassoProblem};
use chain_core::synthetic::{SyntheticConfig, SyntheticWorkspace};
use chain_core::AdmmConfig;
use common::*;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn solver_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut r = rng(7000 + seed);
        let n = r.gen_range(20..=100);
        let d = r.gen_range(5..=40);
        let lambda = 10f64.powf(r.gen_range(-3.0..0.0));
        let p = random_lasso(seed, n, d, lambda);
        let problem = WeightedLassoProblem::new(p.matrix(), p.y.clone(), p.h.clone(), lambda).map_err(|e| e.to_string())?;
        let w = admm_weighted_lasso(&problem, &AdmmConfig::default()).map_err(|e| e.to_string())?.weights;
        let oracle = p.objective(&coordinate_descent(&p));
        worst = worst.max((p.objective(&w) - oracle).abs() / oracle.abs().max(1e-12));
    }
    let elapsed = start.elapsed();
    check(
        worst <= 1e-6 && elapsed < Duration::from_secs(5),
        format!("worst relative gap {worst:.2e}, {elapsed:.2?}"),
        format!("worst relative gap {worst:.2e} (≤ 1e-6), {elapsed:.2?} (< 5 s)"),
    )
}

fn instance_of(ds: &PerturbationDataset<f64>, concept: &str, lambda: f64) -> LassoInstance {
    LassoInstance {
        x: ds.records.iter().map(|r| r.shallow_gap.clone()).collect(),
        y: ds.records.iter().map(|r| r.concept_responses[concept]).collect(),
        h: ds.records.iter().map(|r| r.proximity).collect(),
        lambda,
    }
}

fn certificates() -> Outcome {
    let run = DemoRun::new(0);
    let (mut models, mut worst) = (0usize, 0.0f64);
    let mut failures = Vec::new();
    for bank in run.banks.values() {
        for c in &bank.concepts {
            let ds = build_harmonizing_dataset(&run.workspace.net, &run.manifest, &c.concept()).map_err(|e| e.to_string())?;
            let inst = LassoInstance { x: rows_of(&ds.features), y: ds.labels.clone(), h: vec![1.0; ds.len()], lambda: c.lambda };
            let ratio = inst.violation(&c.weights) / inst.scale();
            worst = worst.max(ratio);
            models += 1;
            if ratio > 1e-5 {
                failures.push(format!("harmonize {}", c.concept_id));
            }
        }
    }
    let truth = &run.workspace.truth;
    let mut samples = truth.class_instances.clone();
    samples.push(truth.demo_instance.clone());
    for id in &samples {
        let ex = run.explain(id, 0);
        for inf in &ex.inferences {
            let w = &inf.weights;
            let ds = ex
                .datasets
                .iter()
                .map(|(_, d)| d)
                .find(|d| d.shallow_layer == w.shallow_layer && d.deep_layer == w.deep_concept.layer)
                .ok_or("inference without its dataset")?;
            let inst = instance_of(ds, &w.deep_concept.concept_id, w.lambda);
            let ratio = inst.violation(&w.weights) / inst.scale();
            worst = worst.max(ratio);
            models += 1;
            if ratio > 1e-5 {
                failures.push(format!("inference {id}/{}", inf.path.join("/")));
            }
        }
    }
    check(
        failures.is_empty(),
        format!("{models} fitted models, worst violation/scale {worst:.2e}"),
        format!("{} of {models} models violate: {}", failures.len(), failures.join(", ")),
    )
}

fn omp() -> Outcome {
    let mut problems = Vec::new();
    for seed in 0..20u64 {
        let mut r = rng(9000 + seed);
        let dim = r.gen_range(4..12);
        let k = r.gen_range(2..=dim);
        let q = nalgebra::DMatrix::from_fn(dim, dim, |_, _| r.gen_range(-1.0..1.0)).qr().q();
        let ortho: Vec<Vec<f64>> = (0..k).map(|j| q.column(j).iter().copied().collect()).collect();
        let coef: Vec<f64> = (0..k).map(|j| if j % 2 == 0 { r.gen_range(0.5..2.0) } else { 0.0 }).collect();
        let target: Vec<f64> = (0..dim).map(|i| (0..k).map(|j| coef[j] * ortho[j][i]).sum()).collect();
        let res = omp_sparse_decompose(&Matrix::from_columns(&ortho).unwrap(), &target, k).map_err(|e| e.to_string())?;
        if res.residual_norm >= 1e-10 {
            problems.push(format!("orthonormal seed {seed}: residual {:.2e}", res.residual_norm));
        }

        let atoms: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let target: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let dict = Matrix::from_columns(&atoms).unwrap();
        let mut last = f64::INFINITY;
        for eps in 1..=k {
            let res = omp_sparse_decompose(&dict, &target, eps).map_err(|e| e.to_string())?;
            if res.residual_norm > last {
                problems.push(format!("seed {seed}: residual rose at ε={eps}"));
            }
            last = res.residual_norm;
        }
        let (_, oracle) = least_squares(&atoms, &target);
        if (last - oracle).abs() > 1e-9 {
            problems.push(format!("seed {seed}: ε=K residual {last} vs LS {oracle}"));
        }
    }
    check(problems.is_empty(), "20 orthonormal + 20 general dictionaries".into(), problems.join("; "))
}

fn replay() -> Outcome {
    let mut records = 0;
    for seed in 0..5u64 {
        let lp = linear_path(seed, 6, 3);
        let sampler = GateSamplerConfig { num_samples: 300, keep_probability: 0.5, seed, include_all_ones: true };
        let ds = generate_perturbation_dataset(&lp.net, &lp.input, "shallow", "deep", &lp.bank, &sampler, None)
            .map_err(|e| e.to_string())?;
        for rec in &ds.records {
            let acts = lp.net.forward_with_gates(&lp.input, "shallow", &rec.gates).map_err(|e| e.to_string())?;
            if rec.shallow_gap != gap(acts.require("shallow").unwrap()) {
                return Err(format!("seed {seed}: stored x differs on replay"));
            }
            for c in &lp.bank.concepts {
                let y = concept_saliency(c, acts.require("deep").unwrap()).map_err(|e| e.to_string())?;
                if rec.concept_responses[&c.concept_id] != y {
                    return Err(format!("seed {seed}: stored y for {} differs on replay", c.concept_id));
                }
            }
            if rec.proximity != proximity_weight(&rec.gates, ds.sigma) {
                return Err(format!("seed {seed}: stored proximity differs"));
            }
            records += 1;
        }
        let first = &ds.records[0];
        let plain = lp.net.forward(&lp.input).map_err(|e| e.to_string())?;
        let same_x = first.gates.is_all_open() && first.shallow_gap == gap(plain.require("shallow").unwrap());
        let same_y = lp.bank.concepts.iter().all(|c| {
            concept_saliency(c, plain.require("deep").unwrap()).ok() == Some(first.concept_responses[&c.concept_id])
        });
        if !(same_x && same_y && first.proximity == 1.0) {
            return Err(format!("seed {seed}: all-ones record differs from the unperturbed pipeline"));
        }
    }
    Ok(format!("{records} records replayed bit-exactly, all-ones records exact"))
}

fn identifiability() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let lp = linear_path(500 + seed, 6, 3);
        let sampler = GateSamplerConfig { num_samples: 200, keep_probability: 0.5, seed, include_all_ones: true };
        let ds = generate_perturbation_dataset(&lp.net, &lp.input, "shallow", "deep", &lp.bank, &sampler, None)
            .map_err(|e| e.to_string())?;
        for (k, c) in lp.bank.concepts.iter().enumerate() {
            let w = fit_hierarchical_inference(&ds, &c.concept(), Some(1e-9), &AdmmConfig::default())
                .map_err(|e| e.to_string())?;
            for (a, b) in w.weights.iter().zip(lp.analytic(k)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    check(worst <= 1e-3, format!("max |w − mᵀt| = {worst:.2e}"), format!("max |w − mᵀt| = {worst:.2e} > 1e-3"))
}

fn planted_recovery() -> Outcome {
    let (mut hits, mut slowest) = (0, Duration::ZERO);
    let mut misses = Vec::new();
    for seed in 0..20u64 {
        let start = Instant::now();
        let run = DemoRun::new(seed);
        let truth = &run.workspace.truth;
        let ex = run.explain(&truth.demo_instance, seed);
        slowest = slowest.max(start.elapsed());
        if ex.tree.max_contribution_path() == truth.planted_chain(&truth.demo_scene) {
            hits += 1;
        } else {
            misses.push(seed.to_string());
        }
    }
    check(
        hits >= 18 && slowest < Duration::from_secs(60),
        format!("{hits}/20 recovered, slowest run {slowest:.2?}"),
        format!("{hits}/20 recovered (misses: {}), slowest run {slowest:.2?}", misses.join(",")),
    )
}

fn top_concept_special_case() -> Outcome {
    let mut agree = 0;
    for seed in 0..100u64 {
        let mut r = rng(20_000 + seed);
        let dim = r.gen_range(3..12);
        let k = r.gen_range(2..10);
        let atoms: Vec<Vec<f64>> = (0..k).map(|_| unit((0..dim).map(|_| r.gen_range(0.0..1.0)).collect())).collect();
        let w = inference_weights((0..dim).map(|_| r.gen_range(0.0..1.0)).collect(), "s");
        let bank = bank_from_columns(&atoms, "s", chain_core::Level::Part);
        let cv = decompose_concept(&w, &bank, 1).map_err(|e| e.to_string())?;
        let top = top_concept(&w, &bank).map_err(|e| e.to_string())?.0;
        if cv.selection_order == vec![top] {
            agree += 1;
        }
    }
    check(agree == 100, format!("{agree}/100 trials agree"), format!("only {agree}/100 trials agree"))
}

fn distances() -> Outcome {
    let mut worst: f64 = 0.0;
    let members = |r: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize, off: f64, spread: f64| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| off + spread * r.gen_range(-1.0..1.0)).collect()).collect()
    };
    let set = |id: &str, m: &[Vec<f64>]| {
        WeightSet::new(id, "c", "l", m.iter().enumerate().map(|(i, w)| (format!("{i}"), w.clone())).collect()).unwrap()
    };
    for seed in 0..50u64 {
        let mut r = rng(30_000 + seed);
        let d = r.gen_range(1..40);
        let (na, nb) = (r.gen_range(1..20), r.gen_range(1..20));
        let a = members(&mut r, na, d, 0.0, 3.0);
        let b = members(&mut r, nb, d, 1.0, 1.0);
        let (sa, sb) = (set("a", &a), set("b", &b));
        worst = worst.max((intra_set_distance(&sa).unwrap() - brute_intra(&a)).abs());
        worst = worst.max((inter_set_distance(&sa, &sb).unwrap() - brute_inter(&a, &b)).abs());
    }
    let mut r = rng(31_000);
    let a = members(&mut r, 12, 8, 0.0, 1.0);
    let zero = inter_set_distance(&set("a", &a), &set("b", &a)).unwrap();
    let c1 = members(&mut r, 25, 16, 0.0, 0.3);
    let c2 = members(&mut r, 25, 16, 1.0, 0.3);
    let t = DistanceTable::compute(&[set("one", &c1), set("two", &c2)]).unwrap();
    let (inter, i1, i2) = (t.get(0, 1), t.get(0, 0), t.get(1, 1));
    check(
        worst <= 1e-12 && zero == 0.0 && inter > 3.0 * i1 && inter > 3.0 * i2,
        format!("brute-force gap {worst:.1e}, identical sets {zero}, inter {inter:.3} vs intra {i1:.3}/{i2:.3}"),
        format!("brute-force gap {worst:.1e}, identical sets {zero}, inter {inter:.3} vs intra {i1:.3}/{i2:.3}"),
    )
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn compare(a: &Path, b: &Path) -> Result<usize, String> {
    let (fa, fb) = (files_under(a), files_under(b));
    if fa.keys().ne(fb.keys()) {
        return Err(format!("file lists differ under {} and {}", a.display(), b.display()));
    }
    if let Some((p, _)) = fa.iter().find(|(p, bytes)| fb[*p] != **bytes) {
        return Err(format!("{} differs between reruns", p.display()));
    }
    Ok(fa.len())
}

fn chain(args: &[&str], out: &Path) -> Result<std::process::Output, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_chain"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !output.status.success() {
        return Err(format!("`chain {}` exited {:?}: {}", args.join(" "), output.status.code(), String::from_utf8_lossy(&output.stderr)));
    }
    Ok(output)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let (a, b) = (root.join("demo_a"), root.join("demo_b"));
    let out_a = chain(&["demo", "--seed", "5"], &a)?;
    let out_b = chain(&["demo", "--seed", "5"], &b)?;
    if out_a.stdout != out_b.stdout {
        return Err("demo stdout differs between reruns".into());
    }
    let mut files = compare(&a, &b)?;

    let truth = SyntheticWorkspace::generate(&SyntheticConfig { seed: 5, ..Default::default() })
        .map_err(|e| e.to_string())?
        .truth;
    let net = a.join("workspace/net.json");
    let manifest = a.join("workspace/manifest.csv");
    let (net, manifest) = (net.to_str().unwrap(), manifest.to_str().unwrap());
    let common = ["--net", net, "--manifest", manifest, "--seed", "5"];
    let mut runs = Vec::new();
    for tag in ["x", "y"] {
        let out = root.join(format!("steps_{tag}"));
        let with = |cmd: &[&str]| -> Vec<String> { cmd.iter().chain(&common).map(|s| s.to_string()).collect() };
        let call = |args: Vec<String>| chain(&args.iter().map(String::as_str).collect::<Vec<_>>(), &out);
        let mut stdout = Vec::new();
        stdout.push(call(with(&["harmonize"]))?.stdout);
        stdout.push(call(with(&["explain-instance", &truth.demo_instance]))?.stdout);
        let mut class = vec!["explain-class", truth.class_scene.as_str()];
        class.extend(truth.class_instances.iter().map(String::as_str));
        stdout.push(call(with(&class))?.stdout);
        let mut grouping = String::from("set_id,file\n");
        for id in truth.class_instances.iter().take(3) {
            explain_member(&call, &with, id)?;
            grouping.push_str(&format!("class,instances/{id}/weights/scene__{}.json\n", truth.class_scene));
        }
        grouping.push_str(&format!(
            "demo,instances/{}/weights/scene__{}.json\n",
            truth.demo_instance, truth.demo_scene
        ));
        let groups = out.join("groups.csv");
        std::fs::write(&groups, grouping).map_err(|e| e.to_string())?;
        stdout.push(call(with(&["distances", groups.to_str().unwrap()]))?.stdout);
        runs.push((out, stdout));
    }
    if runs[0].1 != runs[1].1 {
        return Err("command stdout differs between reruns".into());
    }
    files += compare(&runs[0].0, &runs[1].0)?;
    Ok(format!("demo, harmonize, explain-instance, explain-class, distances: {files} files identical"))
}

fn explain_member(
    call: &dyn Fn(Vec<String>) -> Result<std::process::Output, String>,
    with: &dyn Fn(&[&str]) -> Vec<String>,
    id: &str,
) -> Result<(), String> {
    call(with(&["explain-instance", id])).map(drop)
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("ADMM matches the coordinate-descent oracle", solver_oracle),
        ("lasso certificate on every demo model", certificates),
        ("OMP recovery, monotone residual, LS agreement", omp),
        ("perturbation replay and all-ones record", replay),
        ("linear-path inference weights are analytic", identifiability),
        ("planted chain recovered end to end", planted_recovery),
        ("ε=1 decomposition equals top concept", top_concept_special_case),
        ("inference distances", distances),
        ("CLI reruns are byte-identical", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name} ({detail}; {secs:.1} s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({detail}; {secs:.1} s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
