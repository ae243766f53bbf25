//! Flag and config-file resolution. Values given on the command line win
//! over the config file, which wins over built-in defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use chain_core::chain::ChainConfig;
use chain_core::AdmmConfig;

use crate::CliError;

#[derive(Args, Debug, Clone, Default)]
pub struct Flags {
    /// TOML file with any of the options below; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Network description (JSON).
    #[arg(long, global = true)]
    pub net: Option<PathBuf>,
    /// Concept manifest (CSV).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Restrict harmonizing to one layer.
    #[arg(long, global = true)]
    pub layer: Option<String>,
    /// Harmonizing λ (default: scale-aware per concept).
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Inference λ (default: scale-aware per dataset).
    #[arg(long = "inference-lambda", global = true)]
    pub inference_lambda: Option<f64>,
    /// Sparsity bound of the concept decomposition.
    #[arg(long, global = true)]
    pub epsilon: Option<usize>,
    /// Proximity bandwidth (default: sqrt(units)/2).
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    /// Probability that a gate stays open.
    #[arg(long = "keep-prob", global = true)]
    pub keep_prob: Option<f64>,
    /// Gate vectors per perturbation dataset (default: max(10·units, 200)).
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// ADMM penalty parameter.
    #[arg(long, global = true)]
    pub rho: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    net: Option<PathBuf>,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    layer: Option<String>,
    lambda: Option<f64>,
    inference_lambda: Option<f64>,
    epsilon: Option<usize>,
    sigma: Option<f64>,
    keep_prob: Option<f64>,
    samples: Option<usize>,
    rho: Option<f64>,
    seed: Option<u64>,
    jobs: Option<usize>,
    tol_primal: Option<f64>,
    tol_dual: Option<f64>,
    max_iters: Option<usize>,
    share_fraction: Option<f64>,
    expand_objects: Option<usize>,
    expand_parts: Option<usize>,
    min_relative_contribution: Option<f64>,
}

/// Everything that can change an output file. Paths and thread count are
/// deliberately left out so reruns elsewhere stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hyper {
    pub lambda: Option<f64>,
    pub inference_lambda: Option<f64>,
    pub epsilon: usize,
    pub sigma: Option<f64>,
    pub keep_prob: f64,
    pub samples: Option<usize>,
    pub rho: f64,
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub share_fraction: f64,
    pub expand_objects: usize,
    pub expand_parts: usize,
    pub min_relative_contribution: f64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub net: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub layer: Option<String>,
    pub jobs: Option<usize>,
    pub hyper: Hyper,
}

impl RunConfig {
    pub fn resolve(flags: &Flags) -> Result<Self, CliError> {
        let file = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::missing_input(format!("cannot read config {}: {e}", path.display()))
                })?;
                toml::from_str::<FileConfig>(&text).map_err(|e| {
                    CliError::invalid(format!("bad config {}: {e}", path.display()))
                })?
            }
            None => FileConfig::default(),
        };
        let admm = AdmmConfig::default();
        let chain = ChainConfig::<f64>::default();
        let hyper = Hyper {
            lambda: flags.lambda.or(file.lambda),
            inference_lambda: flags.inference_lambda.or(file.inference_lambda),
            epsilon: flags.epsilon.or(file.epsilon).unwrap_or(chain.epsilon),
            sigma: flags.sigma.or(file.sigma),
            keep_prob: flags.keep_prob.or(file.keep_prob).unwrap_or(chain.keep_probability),
            samples: flags.samples.or(file.samples),
            rho: flags.rho.or(file.rho).unwrap_or(admm.rho),
            tol_primal: file.tol_primal.unwrap_or(admm.tol_primal),
            tol_dual: file.tol_dual.unwrap_or(admm.tol_dual),
            max_iters: file.max_iters.unwrap_or(admm.max_iters),
            seed: flags.seed.or(file.seed).unwrap_or(0),
            share_fraction: file.share_fraction.unwrap_or(0.5),
            expand_objects: file.expand_objects.unwrap_or(chain.expand_objects),
            expand_parts: file.expand_parts.unwrap_or(chain.expand_parts),
            min_relative_contribution: file
                .min_relative_contribution
                .unwrap_or(chain.min_relative_contribution),
        };
        hyper.validate()?;
        Ok(RunConfig {
            net: flags.net.clone().or(file.net),
            manifest: flags.manifest.clone().or(file.manifest),
            out: flags.out.clone().or(file.out),
            layer: flags.layer.clone().or(file.layer),
            jobs: flags.jobs.or(file.jobs),
            hyper,
        })
    }

    pub fn net_path(&self) -> Result<&Path, CliError> {
        existing(self.net.as_deref(), "--net")
    }

    pub fn manifest_path(&self) -> Result<&Path, CliError> {
        existing(self.manifest.as_deref(), "--manifest")
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::missing_input("--out is required".into()))
    }
}

fn existing<'a>(path: Option<&'a Path>, flag: &str) -> Result<&'a Path, CliError> {
    let path = path.ok_or_else(|| CliError::missing_input(format!("{flag} is required")))?;
    if !path.is_file() {
        return Err(CliError::missing_input(format!(
            "{flag}: no such file {}",
            path.display()
        )));
    }
    Ok(path)
}

impl Hyper {
    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::invalid(m));
        for (name, v) in [("lambda", self.lambda), ("inference-lambda", self.inference_lambda)] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return bad(format!("{name} must be a nonnegative number, got {v}"));
                }
            }
        }
        if self.epsilon == 0 {
            return bad("epsilon must be at least 1".into());
        }
        if let Some(s) = self.sigma {
            if !(s.is_finite() && s > 0.0) {
                return bad(format!("sigma must be positive, got {s}"));
            }
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("keep-prob must lie in (0, 1], got {}", self.keep_prob));
        }
        if self.samples == Some(0) {
            return bad("samples must be at least 1".into());
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.share_fraction > 0.0 && self.share_fraction <= 1.0) {
            return bad(format!("share_fraction must lie in (0, 1], got {}", self.share_fraction));
        }
        Ok(())
    }

    pub fn admm(&self) -> AdmmConfig {
        AdmmConfig {
            rho: self.rho,
            max_iters: self.max_iters,
            tol_primal: self.tol_primal,
            tol_dual: self.tol_dual,
            init_m: None,
            init_u: None,
        }
    }

    pub fn chain(&self) -> ChainConfig<f64> {
        ChainConfig {
            lambda: self.inference_lambda,
            epsilon: self.epsilon,
            sigma: self.sigma,
            keep_probability: self.keep_prob,
            num_samples: self.samples,
            seed: self.seed,
            admm: self.admm(),
            expand_objects: self.expand_objects,
            expand_parts: self.expand_parts,
            min_relative_contribution: self.min_relative_contribution,
        }
    }
}
