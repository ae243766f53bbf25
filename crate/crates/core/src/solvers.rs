//! Sparse regression kernels: weighted lasso by ADMM, weighted least
//! squares, and L0-bounded decomposition by orthogonal matching pursuit.

use serde::{Deserialize, Serialize};

use crate::error::{ChainError, Result};
use crate::linalg::{lstsq, Cholesky, Matrix};
use crate::scalar::{dot, norm2, Scalar};

/// OMP stops early once the residual norm falls below this.
pub const OMP_RESIDUAL_FLOOR: f64 = 1e-12;

/// `sign(x)·max(|x|−τ, 0)` per coordinate.
pub fn soft_threshold<T: Scalar>(x: &[T], tau: T) -> Vec<T> {
    x.iter().map(|&v| soft_threshold_scalar(v, tau)).collect()
}

#[inline]
pub fn soft_threshold_scalar<T: Scalar>(v: T, tau: T) -> T {
    let mag = v.abs() - tau;
    if mag > T::zero() {
        mag.copysign(v)
    } else {
        T::zero()
    }
}

/// `½ Σ h_n (w·x_n − y_n)² + λ‖w‖₁`
#[derive(Debug, Clone)]
pub struct WeightedLassoProblem<T> {
    features: Matrix<T>,
    targets: Vec<T>,
    sample_weights: Vec<T>,
    lambda: T,
}

impl<T: Scalar> WeightedLassoProblem<T> {
    pub fn new(
        features: Matrix<T>,
        targets: Vec<T>,
        sample_weights: Vec<T>,
        lambda: T,
    ) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(ChainError::InvalidArgument(
                "lasso problem needs at least one sample".into(),
            ));
        }
        if targets.len() != n || sample_weights.len() != n {
            return Err(ChainError::ShapeMismatch(format!(
                "{n} feature rows, {} targets, {} sample weights",
                targets.len(),
                sample_weights.len()
            )));
        }
        if sample_weights.iter().any(|&h| !(h >= T::zero()) || !h.is_finite()) {
            return Err(ChainError::InvalidArgument(
                "sample weights must be finite and nonnegative".into(),
            ));
        }
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(ChainError::InvalidArgument(format!(
                "lambda must be finite and nonnegative, got {lambda}"
            )));
        }
        Ok(WeightedLassoProblem {
            features,
            targets,
            sample_weights,
            lambda,
        })
    }

    /// Plain lasso: every sample weight is one.
    pub fn uniform(features: Matrix<T>, targets: Vec<T>, lambda: T) -> Result<Self> {
        let n = features.rows();
        Self::new(features, targets, vec![T::one(); n], lambda)
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn targets(&self) -> &[T] {
        &self.targets
    }

    pub fn sample_weights(&self) -> &[T] {
        &self.sample_weights
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn residuals(&self, w: &[T]) -> Vec<T> {
        self.features
            .matvec(w)
            .into_iter()
            .zip(&self.targets)
            .map(|(p, &y)| p - y)
            .collect()
    }

    pub fn loss(&self, w: &[T]) -> T {
        let r = self.residuals(w);
        T::lit(0.5)
            * r.iter()
                .zip(&self.sample_weights)
                .map(|(&ri, &h)| h * ri * ri)
                .sum::<T>()
    }

    pub fn objective(&self, w: &[T]) -> T {
        self.loss(w) + self.lambda * w.iter().map(|v| v.abs()).sum::<T>()
    }

    /// Gradient of the smooth part: `Σ h_n (w·x_n − y_n) x_n`.
    pub fn loss_gradient(&self, w: &[T]) -> Vec<T> {
        let hr: Vec<T> = self
            .residuals(w)
            .into_iter()
            .zip(&self.sample_weights)
            .map(|(r, &h)| h * r)
            .collect();
        self.features.matvec_t(&hr)
    }

    /// Largest violation of the lasso subgradient optimality conditions.
    ///
    /// For `w_i ≠ 0` this is `|g_i + λ sign(w_i)|`, for `w_i = 0` it is
    /// `max(|g_i| − λ, 0)`, where `g` is the loss gradient.
    pub fn optimality_violation(&self, w: &[T]) -> T {
        self.loss_gradient(w)
            .into_iter()
            .zip(w)
            .map(|(g, &wi)| {
                if wi != T::zero() {
                    (g + self.lambda * wi.signum()).abs()
                } else {
                    (g.abs() - self.lambda).max(T::zero())
                }
            })
            .fold(T::zero(), T::max)
    }

    /// Natural scale of the gradient: `Σ h_n |y_n| ‖x_n‖₁`, at least one.
    pub fn gradient_scale(&self) -> T {
        let s: T = (0..self.features.rows())
            .map(|n| {
                self.sample_weights[n]
                    * self.targets[n].abs().max(T::one())
                    * self.features.row(n).iter().map(|v| v.abs()).sum::<T>()
            })
            .sum();
        s.max(T::one())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct AdmmConfig<T> {
    pub rho: T,
    pub max_iters: usize,
    pub tol_primal: T,
    pub tol_dual: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_m: Option<Vec<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_u: Option<Vec<T>>,
}

impl<T: Scalar> Default for AdmmConfig<T> {
    fn default() -> Self {
        AdmmConfig {
            rho: T::one(),
            max_iters: 5000,
            tol_primal: T::lit(1e-7),
            tol_dual: T::lit(1e-7),
            init_m: None,
            init_u: None,
        }
    }
}

impl<T: Scalar> AdmmConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > T::zero()) || !self.rho.is_finite() {
            return Err(ChainError::InvalidArgument(format!(
                "ADMM penalty rho must be positive, got {}",
                self.rho
            )));
        }
        if self.max_iters == 0 {
            return Err(ChainError::InvalidArgument(
                "ADMM max_iters must be positive".into(),
            ));
        }
        if !(self.tol_primal > T::zero()) || !(self.tol_dual > T::zero()) {
            return Err(ChainError::InvalidArgument(
                "ADMM tolerances must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct SolveResult<T> {
    pub weights: Vec<T>,
    pub iterations: usize,
    pub primal_residual: T,
    pub dual_residual: T,
    pub converged: bool,
}

impl<T: Scalar> SolveResult<T> {
    pub fn nonzeros(&self) -> usize {
        self.weights.iter().filter(|&&w| w != T::zero()).count()
    }

    pub fn into_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(ChainError::NotConverged {
                iterations: self.iterations,
                primal_residual: self.primal_residual.to_f64_lossy(),
                dual_residual: self.dual_residual.to_f64_lossy(),
            })
        }
    }
}

/// Weighted lasso by scaled-form ADMM on the split `w = m`.
///
/// Each iteration:
/// ```text
/// w ← (Σ h x xᵀ + ρI)⁻¹ (Σ h y x + ρ(m + u))
/// m ← soft(w − u, λ/ρ)
/// u ← u − (w − m)
/// ```
/// The system matrix is factored once. The returned weights are the
/// thresholded iterate `m`, so exact zeros are preserved.
pub fn admm_weighted_lasso<T: Scalar>(
    problem: &WeightedLassoProblem<T>,
    config: &AdmmConfig<T>,
) -> Result<SolveResult<T>> {
    config.validate()?;
    let p = problem.num_features();
    let init = |v: &Option<Vec<T>>, what: &str| -> Result<Vec<T>> {
        match v {
            None => Ok(vec![T::zero(); p]),
            Some(v) if v.len() == p => Ok(v.clone()),
            Some(v) => Err(ChainError::ShapeMismatch(format!(
                "{what} has {} entries, expected {p}",
                v.len()
            ))),
        }
    };
    let mut m = init(&config.init_m, "init_m")?;
    let mut u = init(&config.init_u, "init_u")?;
    if p == 0 {
        return Ok(SolveResult {
            weights: m,
            iterations: 0,
            primal_residual: T::zero(),
            dual_residual: T::zero(),
            converged: true,
        });
    }

    let rho = config.rho;
    let mut system = problem.features.weighted_gram(&problem.sample_weights);
    system.add_diagonal(rho);
    let chol = Cholesky::factor(&system).ok_or_else(|| {
        ChainError::InvalidArgument("ADMM system matrix is not positive definite".into())
    })?;
    let hyx = problem
        .features
        .weighted_xty(&problem.sample_weights, &problem.targets);
    let tau = problem.lambda / rho;

    let mut rhs = vec![T::zero(); p];
    let mut primal = T::infinity();
    let mut dual = T::infinity();
    for iter in 1..=config.max_iters {
        for i in 0..p {
            rhs[i] = hyx[i] + rho * (m[i] + u[i]);
        }
        let w = chol.solve(&rhs);
        let m_next: Vec<T> = w
            .iter()
            .zip(&u)
            .map(|(&wi, &ui)| soft_threshold_scalar(wi - ui, tau))
            .collect();
        let mut r2 = T::zero();
        let mut s2 = T::zero();
        for i in 0..p {
            let r = w[i] - m_next[i];
            u[i] -= r;
            r2 += r * r;
            let s = rho * (m_next[i] - m[i]);
            s2 += s * s;
        }
        primal = r2.sqrt();
        dual = s2.sqrt();
        m = m_next;
        if !primal.is_finite() || !dual.is_finite() {
            break;
        }
        if primal <= config.tol_primal * T::one().max(norm2(&w)) && dual <= config.tol_dual {
            return Ok(SolveResult {
                weights: m,
                iterations: iter,
                primal_residual: primal,
                dual_residual: dual,
                converged: true,
            });
        }
    }
    Ok(SolveResult {
        weights: m,
        iterations: config.max_iters,
        primal_residual: primal,
        dual_residual: dual,
        converged: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLeastSquares<T> {
    pub solution: Vec<T>,
    /// Set when the weighted system was rank deficient; the solution is then
    /// the minimum-norm minimiser.
    pub rank_deficient: bool,
}

/// Minimises `Σ h_n (w·x_n − y_n)²`.
pub fn weighted_least_squares<T: Scalar>(
    features: &Matrix<T>,
    targets: &[T],
    sample_weights: &[T],
) -> Result<WeightedLeastSquares<T>> {
    let n = features.rows();
    if targets.len() != n || sample_weights.len() != n {
        return Err(ChainError::ShapeMismatch(format!(
            "{n} feature rows, {} targets, {} sample weights",
            targets.len(),
            sample_weights.len()
        )));
    }
    if sample_weights.iter().any(|&h| !(h >= T::zero())) {
        return Err(ChainError::InvalidArgument(
            "sample weights must be nonnegative".into(),
        ));
    }
    let mut scaled = features.clone();
    let mut rhs = Vec::with_capacity(n);
    for (i, (&h, &y)) in sample_weights.iter().zip(targets).enumerate() {
        let s = h.sqrt();
        scaled.row_mut(i).iter_mut().for_each(|v| *v *= s);
        rhs.push(s * y);
    }
    let ls = lstsq(&scaled, &rhs)?;
    if ls.rank_deficient {
        log::debug!(
            "weighted least squares: rank {} < {} columns, using minimum-norm solution",
            ls.rank,
            features.cols()
        );
    }
    Ok(WeightedLeastSquares {
        solution: ls.solution,
        rank_deficient: ls.rank_deficient,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct OmpResult<T> {
    /// Dense coefficient vector over all atoms.
    pub coefficients: Vec<T>,
    /// Selected atom indices, in selection order.
    pub support: Vec<usize>,
    pub residual_norm: T,
    /// Atoms skipped because they were identically zero.
    pub skipped_atoms: Vec<usize>,
}

impl<T: Scalar> OmpResult<T> {
    pub fn nonzeros(&self) -> usize {
        self.coefficients.iter().filter(|&&a| a != T::zero()).count()
    }
}

/// Greedy solution of `min ‖Φα − target‖₂² s.t. ‖α‖₀ ≤ sparsity`.
///
/// Columns of `dictionary` are the atoms. Each step picks the unselected
/// atom with the largest normalised absolute correlation with the residual
/// (lowest index on ties) and re-fits least squares on the whole support.
/// A sparsity larger than the number of atoms is clamped to it.
pub fn omp_sparse_decompose<T: Scalar>(
    dictionary: &Matrix<T>,
    target: &[T],
    sparsity: usize,
) -> Result<OmpResult<T>> {
    let (dim, k) = dictionary.shape();
    if target.len() != dim {
        return Err(ChainError::ShapeMismatch(format!(
            "target has {} entries, dictionary atoms have {dim}",
            target.len()
        )));
    }
    if sparsity == 0 {
        return Err(ChainError::InvalidArgument(
            "sparsity bound must be at least 1".into(),
        ));
    }
    let atoms: Vec<Vec<T>> = (0..k).map(|j| dictionary.column(j)).collect();
    let norms: Vec<T> = atoms.iter().map(|a| norm2(a)).collect();
    let skipped_atoms: Vec<usize> = (0..k).filter(|&j| norms[j] == T::zero()).collect();
    for &j in &skipped_atoms {
        log::warn!("OMP: atom {j} is identically zero and will never be selected");
    }

    let mut coefficients = vec![T::zero(); k];
    let mut residual = target.to_vec();
    let mut residual_norm = norm2(&residual);
    let floor = T::lit(OMP_RESIDUAL_FLOOR);
    let mut support: Vec<usize> = Vec::new();
    let budget = sparsity.min(k);

    while support.len() < budget && residual_norm >= floor {
        let mut best: Option<(usize, T)> = None;
        for j in 0..k {
            if norms[j] == T::zero() || support.contains(&j) {
                continue;
            }
            let score = dot(&atoms[j], &residual).abs() / norms[j];
            if best.map_or(true, |(_, b)| score > b) {
                best = Some((j, score));
            }
        }
        let Some((j, score)) = best else { break };
        if score == T::zero() {
            break;
        }
        support.push(j);
        let sub = Matrix::from_columns(
            &support.iter().map(|&s| atoms[s].clone()).collect::<Vec<_>>(),
        )?;
        let fit = lstsq(&sub, target)?;
        coefficients.iter_mut().for_each(|c| *c = T::zero());
        for (&s, &c) in support.iter().zip(&fit.solution) {
            coefficients[s] = c;
        }
        let approx = sub.matvec(&fit.solution);
        for (r, (&t, a)) in residual.iter_mut().zip(target.iter().zip(approx)) {
            *r = t - a;
        }
        residual_norm = norm2(&residual);
    }

    Ok(OmpResult {
        coefficients,
        support,
        residual_norm,
        skipped_atoms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(&[3.0, -0.4, -2.5], 1.0), vec![2.0, 0.0, -1.5]);
        assert_eq!(soft_threshold_scalar(-0.4, 0.5), 0.0);
        assert_eq!(soft_threshold_scalar(0.5f32, 0.5), 0.0);
    }

    #[test]
    fn identity_design_is_separable() {
        let y = vec![3.0f64, -0.2, 0.7, -4.0];
        let lambda = 0.5;
        let p = WeightedLassoProblem::uniform(Matrix::identity(4), y.clone(), lambda).unwrap();
        let res = admm_weighted_lasso(&p, &AdmmConfig::default()).unwrap();
        assert!(res.converged);
        for (w, e) in res.weights.iter().zip(soft_threshold(&y, lambda)) {
            assert!((w - e).abs() < 1e-6, "{w} vs {e}");
        }
    }

    #[test]
    fn rejects_bad_config_and_problem() {
        let cfg = AdmmConfig::<f64> {
            rho: 0.0,
            ..AdmmConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(WeightedLassoProblem::new(Matrix::identity(2), vec![1.0, 2.0], vec![1.0, -1.0], 0.1)
            .is_err());
        assert!(WeightedLassoProblem::<f64>::uniform(Matrix::zeros(0, 2), vec![], 0.1).is_err());
    }

    #[test]
    fn reports_non_convergence() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let p = WeightedLassoProblem::uniform(x, vec![1.0, 2.0, 3.0], 0.1).unwrap();
        let cfg = AdmmConfig {
            max_iters: 2,
            ..AdmmConfig::default()
        };
        let res = admm_weighted_lasso(&p, &cfg).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 2);
        assert!(matches!(
            res.into_converged(),
            Err(ChainError::NotConverged { iterations: 2, .. })
        ));
    }

    #[test]
    fn huge_lambda_gives_zero() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let p = WeightedLassoProblem::uniform(x, vec![1.0, 2.0, 3.0], 1e6).unwrap();
        let res = admm_weighted_lasso(&p, &AdmmConfig::default()).unwrap();
        assert!(res.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn wls_identity_and_weight_semantics() {
        let ls = weighted_least_squares(&Matrix::identity(3), &[1.0f64, -2.0, 0.5], &[1.0; 3]).unwrap();
        for (a, b) in ls.solution.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-14);
        }
        // Consistent data: weights (2, 0) on duplicated rows match weight 1 on one row.
        let base = vec![vec![1.0f64, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let y = vec![1.0, 2.0, 3.0];
        let single = weighted_least_squares(&Matrix::from_rows(&base).unwrap(), &y, &[1.0; 3])
            .unwrap();
        let mut dup = base.clone();
        dup.push(base[2].clone());
        let mut ydup = y.clone();
        ydup.push(3.0);
        let doubled = weighted_least_squares(
            &Matrix::from_rows(&dup).unwrap(),
            &ydup,
            &[1.0, 1.0, 2.0, 0.0],
        )
        .unwrap();
        for (a, b) in single.solution.iter().zip(&doubled.solution) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn wls_flags_rank_deficiency() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        let ls = weighted_least_squares(&x, &[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!(ls.rank_deficient);
    }

    #[test]
    fn omp_orthonormal_recovery() {
        let dict = Matrix::<f64>::identity(4);
        let target = vec![2.0, 0.0, 0.5, 0.0];
        let res = omp_sparse_decompose(&dict, &target, 2).unwrap();
        assert_eq!(res.support, vec![0, 2]);
        assert_eq!(res.coefficients, vec![2.0, 0.0, 0.5, 0.0]);
        assert!(res.residual_norm < 1e-10);
    }

    #[test]
    fn omp_zero_target_and_zero_atom() {
        let dict = Matrix::from_columns(&[vec![0.0f64, 0.0], vec![1.0, 1.0]]).unwrap();
        let zero = omp_sparse_decompose(&dict, &[0.0, 0.0], 2).unwrap();
        assert!(zero.coefficients.iter().all(|&a| a == 0.0));
        assert!(zero.support.is_empty());
        let res = omp_sparse_decompose(&dict, &[1.0, 2.0], 2).unwrap();
        assert_eq!(res.skipped_atoms, vec![0]);
        assert_eq!(res.support, vec![1]);
        assert!((res.coefficients[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn omp_tie_breaks_by_lowest_index() {
        let dict = Matrix::<f64>::identity(3);
        let res = omp_sparse_decompose(&dict, &[1.0, 1.0, 1.0], 1).unwrap();
        assert_eq!(res.support, vec![0]);
    }

    #[test]
    fn omp_rejects_zero_sparsity_and_clamps_large() {
        let dict = Matrix::<f64>::identity(2);
        assert!(omp_sparse_decompose(&dict, &[1.0, 1.0], 0).is_err());
        let res = omp_sparse_decompose(&dict, &[1.0, 1.0], 10).unwrap();
        assert_eq!(res.support.len(), 2);
    }
}
