//! Independent reference computations used by the integration tests. Each
//! oracle works on plain `Vec`s or nalgebra types and shares no numerical
//! code with the library.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chain_core::chain::{explain_instance, ChainConfig, InstanceExplanation};
use chain_core::harmonize::{fit_all_levels, ConceptBank, ConceptManifest, ConceptSpec, HarmonizingWeights};
use chain_core::inference::{InferenceWeights, SolverStats};
use chain_core::linalg::Matrix;
use chain_core::netcore::{Conv2d, LayerOp, LayerSpec, NetworkSpec, Tensor};
use chain_core::synthetic::{SyntheticConfig, SyntheticWorkspace};
use chain_core::{AdmmConfig, Level};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rows_of(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

// ---------------------------------------------------------------------------
// Weighted lasso

/// A dense weighted lasso instance kept as plain rows.
#[derive(Debug, Clone)]
pub struct LassoInstance {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub h: Vec<f64>,
    pub lambda: f64,
}

impl LassoInstance {
    pub fn matrix(&self) -> Matrix<f64> {
        Matrix::from_rows(&self.x).unwrap()
    }

    pub fn objective(&self, w: &[f64]) -> f64 {
        let mut loss = 0.0;
        for ((row, &y), &h) in self.x.iter().zip(&self.y).zip(&self.h) {
            let r: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - y;
            loss += 0.5 * h * r * r;
        }
        loss + self.lambda * w.iter().map(|v| v.abs()).sum::<f64>()
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; w.len()];
        for ((row, &y), &h) in self.x.iter().zip(&self.y).zip(&self.h) {
            let r: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - y;
            for (gi, a) in g.iter_mut().zip(row) {
                *gi += h * r * a;
            }
        }
        g
    }

    /// Worst subgradient violation, recomputed from scratch.
    pub fn violation(&self, w: &[f64]) -> f64 {
        self.gradient(w)
            .iter()
            .zip(w)
            .map(|(&g, &wi)| {
                if wi != 0.0 {
                    (g + self.lambda * wi.signum()).abs()
                } else {
                    (g.abs() - self.lambda).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    /// `Σ h |y| ‖x‖₁`, floored at one.
    pub fn scale(&self) -> f64 {
        let s: f64 = self
            .x
            .iter()
            .zip(&self.y)
            .zip(&self.h)
            .map(|((row, &y), &h)| h * y.abs().max(1.0) * row.iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        s.max(1.0)
    }
}

/// Cyclic coordinate descent run to a tight fixed point.
pub fn coordinate_descent(p: &LassoInstance) -> Vec<f64> {
    let n = p.x.len();
    let d = p.x[0].len();
    let mut w = vec![0.0; d];
    let mut r = p.y.clone();
    let col_sq: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| p.h[i] * p.x[i][j] * p.x[i][j]).sum())
        .collect();
    for _ in 0..200_000 {
        let mut max_change: f64 = 0.0;
        for j in 0..d {
            if col_sq[j] == 0.0 {
                continue;
            }
            let rho: f64 = (0..n).map(|i| p.h[i] * p.x[i][j] * r[i]).sum::<f64>() + col_sq[j] * w[j];
            let new = rho.signum() * (rho.abs() - p.lambda).max(0.0) / col_sq[j];
            let delta = new - w[j];
            if delta != 0.0 {
                for i in 0..n {
                    r[i] -= p.x[i][j] * delta;
                }
                w[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < 1e-14 {
            break;
        }
    }
    w
}

/// Random instance with a sparse planted vector, noisy targets and
/// proximity-like weights in (0, 1].
pub fn random_lasso(seed: u64, n: usize, d: usize, lambda: f64) -> LassoInstance {
    let mut r = rng(seed);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut truth = vec![0.0; d];
    for t in truth.iter_mut().take(d.min(5)) {
        *t = r.gen_range(-2.0..2.0);
    }
    let y = x
        .iter()
        .map(|row| row.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + 0.1 * r.gen_range(-1.0..1.0))
        .collect();
    let h = (0..n).map(|_| r.gen_range(0.05..1.0)).collect();
    LassoInstance { x, y, h, lambda }
}

// ---------------------------------------------------------------------------
// Least squares via nalgebra

pub fn to_dmatrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, d, |i, j| rows[i][j])
}

/// Weighted normal equations `(XᵀHX) w = XᵀHy`, solved by LU.
pub fn normal_equations(x: &[Vec<f64>], y: &[f64], h: &[f64]) -> Vec<f64> {
    let a = to_dmatrix(x);
    let hm = DMatrix::from_diagonal(&DVector::from_column_slice(h));
    let lhs = a.transpose() * &hm * &a;
    let rhs = a.transpose() * &hm * DVector::from_column_slice(y);
    lhs.lu().solve(&rhs).expect("nonsingular system").iter().copied().collect()
}

/// Least-squares solution and residual norm by SVD.
pub fn least_squares(columns: &[Vec<f64>], b: &[f64]) -> (Vec<f64>, f64) {
    let rows = b.len();
    let a = DMatrix::from_fn(rows, columns.len(), |i, j| columns[j][i]);
    let bv = DVector::from_column_slice(b);
    let sol = a.clone().svd(true, true).solve(&bv, 1e-14).expect("svd solve");
    let res = (&a * &sol - bv).norm();
    (sol.iter().copied().collect(), res)
}

// ---------------------------------------------------------------------------
// Distances

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn brute_centroid(members: &[Vec<f64>]) -> Vec<f64> {
    let d = members[0].len();
    (0..d)
        .map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64)
        .collect()
}

pub fn brute_intra(members: &[Vec<f64>]) -> f64 {
    let c = brute_centroid(members);
    members.iter().map(|m| euclid(m, &c)).sum::<f64>() / members.len() as f64
}

pub fn brute_inter(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    euclid(&brute_centroid(a), &brute_centroid(b))
}

// ---------------------------------------------------------------------------
// Networks

/// Zero-padded cross-correlation computed pixel by pixel.
pub fn direct_conv(
    input: &[Vec<Vec<f64>>],
    weights: &[Vec<Vec<Vec<f64>>>],
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Vec<Vec<Vec<f64>>> {
    let h = input[0].len() as isize;
    let w = input[0][0].len() as isize;
    let k = weights[0][0].len() as isize;
    let p = padding as isize;
    let oh = ((h + 2 * p - k) / stride as isize + 1) as usize;
    let ow = ((w + 2 * p - k) / stride as isize + 1) as usize;
    let mut out = vec![vec![vec![0.0; ow]; oh]; weights.len()];
    for (o, kern) in weights.iter().enumerate() {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for (c, plane) in kern.iter().enumerate() {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride) as isize + ky - p;
                            let ix = (ox * stride) as isize + kx - p;
                            if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                acc += plane[ky as usize][kx as usize]
                                    * input[c][iy as usize][ix as usize];
                            }
                        }
                    }
                }
                out[o][oy][ox] = acc;
            }
        }
    }
    out
}

pub fn tensor_to_nested(t: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let [c, h, w] = t.shape();
    (0..c)
        .map(|ci| (0..h).map(|y| (0..w).map(|x| t.at(ci, y, x)).collect()).collect())
        .collect()
}

pub fn conv_layer(name: &str, weights: &[Vec<Vec<Vec<f64>>>], bias: Vec<f64>, padding: usize) -> LayerSpec<f64> {
    let out_channels = weights.len();
    let in_channels = weights[0].len();
    let kernel = weights[0][0].len();
    let flat = weights.iter().flatten().flatten().flatten().copied().collect();
    LayerSpec {
        name: name.into(),
        op: LayerOp::Conv(Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding,
            weights: flat,
            bias,
        }),
    }
}

/// `1×1` kernels from an `out × in` matrix.
pub fn pointwise(name: &str, m: &[Vec<f64>]) -> LayerSpec<f64> {
    let w: Vec<Vec<Vec<Vec<f64>>>> = m
        .iter()
        .map(|row| row.iter().map(|&v| vec![vec![v]]).collect())
        .collect();
    conv_layer(name, &w, vec![0.0; m.len()], 0)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: [usize; 3], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// A linear shallow→deep path: `shallow` is a 3×3 conv with relu on the
/// input, `deep` a bias-free pointwise conv `m` with no nonlinearity.
pub struct LinearPath {
    pub net: NetworkSpec<f64>,
    pub input: Tensor<f64>,
    pub deep_matrix: Vec<Vec<f64>>,
    pub bank: ConceptBank<f64>,
}

impl LinearPath {
    /// Analytic inference weights of bank concept `k`: `mᵀ t_k`.
    pub fn analytic(&self, k: usize) -> Vec<f64> {
        let t = &self.bank.concepts[k].weights;
        let units = self.deep_matrix[0].len();
        (0..units)
            .map(|i| self.deep_matrix.iter().zip(t).map(|(row, tj)| row[i] * tj).sum())
            .collect()
    }
}

pub fn linear_path(seed: u64, shallow_units: usize, deep_units: usize) -> LinearPath {
    let mut r = rng(seed);
    let in_ch = 2;
    let kern: Vec<Vec<Vec<Vec<f64>>>> = (0..shallow_units)
        .map(|_| {
            (0..in_ch)
                .map(|_| (0..3).map(|_| (0..3).map(|_| r.gen_range(-0.5..1.0)).collect()).collect())
                .collect()
        })
        .collect();
    let bias: Vec<f64> = (0..shallow_units).map(|_| r.gen_range(0.0..0.5)).collect();
    let m: Vec<Vec<f64>> = (0..deep_units)
        .map(|_| (0..shallow_units).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let layers = vec![
        conv_layer("conv_s", &kern, bias, 1),
        LayerSpec { name: "shallow".into(), op: LayerOp::Relu },
        pointwise("deep", &m),
    ];
    let mut levels = BTreeMap::new();
    levels.insert(Level::Part, "shallow".to_string());
    levels.insert(Level::Object, "deep".to_string());
    let net = NetworkSpec::new([in_ch, 5, 5], layers, levels, vec![]).unwrap();
    let input = random_tensor(&mut r, [in_ch, 5, 5], 0.0, 1.0);
    let concepts = (0..2)
        .map(|k| HarmonizingWeights {
            concept_id: format!("deep_{k}"),
            level: Level::Object,
            layer: "deep".into(),
            lambda: 0.0,
            weights: (0..deep_units).map(|_| r.gen_range(-1.0..1.0)).collect(),
            fit: None,
        })
        .collect();
    let bank = ConceptBank::new("deep", Level::Object, concepts).unwrap();
    LinearPath { net, input, deep_matrix: m, bank }
}

/// Bank whose atoms are `columns`, ids `c0, c1, …`, on layer `layer`.
pub fn bank_from_columns(columns: &[Vec<f64>], layer: &str, level: Level) -> ConceptBank<f64> {
    let concepts = columns
        .iter()
        .enumerate()
        .map(|(k, w)| HarmonizingWeights {
            concept_id: format!("c{k}"),
            level,
            layer: layer.into(),
            lambda: 0.0,
            weights: w.clone(),
            fit: None,
        })
        .collect();
    ConceptBank::new(layer, level, concepts).unwrap()
}

/// Hand-made inference weights of concept `deep` over layer `layer`.
pub fn inference_weights(weights: Vec<f64>, layer: &str) -> InferenceWeights<f64> {
    InferenceWeights {
        deep_concept: ConceptSpec { concept_id: "deep".into(), level: Level::Object, layer: "deep_layer".into() },
        shallow_layer: layer.into(),
        lambda: 0.0,
        weights,
        solver: SolverStats { iterations: 0, primal_residual: 0.0, dual_residual: 0.0, converged: true },
    }
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

// ---------------------------------------------------------------------------
// Synthetic workspace fixture

pub struct DemoRun {
    pub workspace: SyntheticWorkspace,
    pub manifest: ConceptManifest,
    pub banks: BTreeMap<Level, ConceptBank<f64>>,
    pub dir: PathBuf,
}

impl DemoRun {
    pub fn new(seed: u64) -> Self {
        let workspace = SyntheticWorkspace::generate(&SyntheticConfig { seed, ..Default::default() }).unwrap();
        let dir = std::env::temp_dir().join(format!("chain-test-{}-{seed}-{}", std::process::id(), unique()));
        let manifest = workspace.write_to(&dir).unwrap();
        let banks = fit_all_levels(&workspace.net, &manifest, None, &AdmmConfig::default()).unwrap();
        DemoRun { workspace, manifest, banks, dir }
    }

    pub fn explain(&self, sample_id: &str, seed: u64) -> InstanceExplanation<f64> {
        let input = self.manifest.load_input(sample_id).unwrap();
        let cfg = ChainConfig { seed, ..Default::default() };
        explain_instance(&self.workspace.net, &input, sample_id, &self.banks, &cfg).unwrap()
    }
}

impl Drop for DemoRun {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

fn unique() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(0);
    NEXT.fetch_add(1, Ordering::Relaxed)
}
