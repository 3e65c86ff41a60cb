//! Kernels, Gram matrices and finite-dimensional feature maps.
//!
//! All algorithms in this crate work on a finite action set of `N` vectors in
//! `R^d`. A kernel `k` on those actions is represented by its `N x N` Gram
//! matrix, and the learner operates on an `N`-dimensional feature map
//! `phi` with `<phi(a_i), phi(a_j)> = k(a_i, a_j)`, obtained by factorizing
//! the Gram matrix. Any two maps reproducing the same Gram matrix are
//! interchangeable: the quantities the algorithms consume (quadratic forms
//! through regularized second-moment matrices, log-determinants) are
//! invariant under the choice of factorization, which is what
//! [`equivalence_check`] and the tests in this module pin down.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Default starting jitter for PSD factorizations.
pub const DEFAULT_JITTER: f64 = 1e-10;
/// Largest jitter tried before a factorization is declared failed.
pub const MAX_JITTER: f64 = 1e-6;

/// A finite set of `N` actions in `R^d`.
#[derive(Debug, Clone)]
pub struct ActionSet {
    actions: Vec<DVector<f64>>,
    dim: usize,
}

impl ActionSet {
    pub fn new(actions: Vec<Vec<f64>>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::InvalidInput("action set must be non-empty".into()));
        }
        let dim = actions[0].len();
        if dim == 0 {
            return Err(Error::InvalidInput("actions must have dimension >= 1".into()));
        }
        let mut out = Vec::with_capacity(actions.len());
        for (i, a) in actions.into_iter().enumerate() {
            if a.len() != dim {
                return Err(Error::Shape(format!(
                    "action {i} has dimension {} but expected {dim}",
                    a.len()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("action {i} has non-finite entries")));
            }
            out.push(DVector::from_vec(a));
        }
        Ok(Self { actions: out, dim })
    }

    /// Samples `n` actions uniformly from the unit sphere in `R^d`.
    pub fn sample_unit_sphere(n: usize, d: usize, rng: &mut impl Rng) -> Self {
        assert!(n >= 1 && d >= 1);
        let mut actions = Vec::with_capacity(n);
        for _ in 0..n {
            loop {
                let v: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
                let norm = v.norm();
                if norm > 1e-12 {
                    actions.push(v / norm);
                    break;
                }
            }
        }
        Self { actions, dim: d }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn action(&self, i: usize) -> &DVector<f64> {
        &self.actions[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.actions.iter()
    }
}

/// Half-integer smoothness orders of the Matern kernel that admit closed
/// forms, avoiding Bessel-function evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaternNu {
    Half,
    ThreeHalves,
    FiveHalves,
}

/// Kernel on a finite action set.
///
/// All variants are normalized so that `k(x, x) <= 1`; `NeuralGram` wraps a
/// precomputed Gram matrix (e.g. from network gradient features) and rescales
/// it by its largest diagonal entry when that exceeds one.
#[derive(Debug, Clone)]
pub enum Kernel {
    Linear,
    Rbf { lengthscale: f64 },
    Matern { nu: MaternNu, lengthscale: f64 },
    NeuralGram { gram: DMatrix<f64> },
}

impl Kernel {
    pub fn rbf(lengthscale: f64) -> Self {
        Kernel::Rbf { lengthscale }
    }

    pub fn matern(nu: MaternNu, lengthscale: f64) -> Self {
        Kernel::Matern { nu, lengthscale }
    }

    /// Wraps a precomputed Gram matrix, rescaling so the diagonal is <= 1.
    pub fn neural_gram(gram: DMatrix<f64>) -> Result<Self> {
        if gram.nrows() != gram.ncols() {
            return Err(Error::Shape(format!(
                "gram matrix must be square, got {}x{}",
                gram.nrows(),
                gram.ncols()
            )));
        }
        if gram.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidKernel("gram matrix has non-finite entries".into()));
        }
        let max_asym = (0..gram.nrows())
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| (gram[(i, j)] - gram[(j, i)]).abs())
            .fold(0.0, f64::max);
        if max_asym > 1e-8 {
            return Err(Error::InvalidKernel(format!(
                "gram matrix is asymmetric (max deviation {max_asym:.3e})"
            )));
        }
        let max_diag = (0..gram.nrows()).map(|i| gram[(i, i)]).fold(f64::MIN, f64::max);
        let gram = if max_diag > 1.0 { gram / max_diag } else { gram };
        Ok(Kernel::NeuralGram { gram })
    }

    fn validate(&self) -> Result<()> {
        match self {
            Kernel::Rbf { lengthscale } | Kernel::Matern { lengthscale, .. } => {
                if !(lengthscale.is_finite() && *lengthscale > 0.0) {
                    return Err(Error::InvalidKernel(format!(
                        "lengthscale must be positive, got {lengthscale}"
                    )));
                }
            }
            Kernel::Linear | Kernel::NeuralGram { .. } => {}
        }
        Ok(())
    }

    /// Evaluates the kernel on a pair of vectors. Not available for
    /// `NeuralGram`, which is defined only on action indices.
    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        self.validate()?;
        match self {
            Kernel::Linear => Ok(x.dot(y)),
            Kernel::Rbf { lengthscale } => {
                let r2 = (x - y).norm_squared();
                Ok((-r2 / (2.0 * lengthscale * lengthscale)).exp())
            }
            Kernel::Matern { nu, lengthscale } => {
                let r = (x - y).norm() / lengthscale;
                Ok(match nu {
                    MaternNu::Half => (-r).exp(),
                    MaternNu::ThreeHalves => {
                        let s = 3f64.sqrt() * r;
                        (1.0 + s) * (-s).exp()
                    }
                    MaternNu::FiveHalves => {
                        let s = 5f64.sqrt() * r;
                        (1.0 + s + s * s / 3.0) * (-s).exp()
                    }
                })
            }
            Kernel::NeuralGram { .. } => Err(Error::InvalidInput(
                "NeuralGram kernels are defined on action indices, not vectors".into(),
            )),
        }
    }
}

/// Computes the Gram matrix `K[i][j] = k(a_i, a_j)`.
pub fn gram(kernel: &Kernel, actions: &ActionSet) -> Result<DMatrix<f64>> {
    kernel.validate()?;
    let n = actions.len();
    if let Kernel::NeuralGram { gram } = kernel {
        if gram.nrows() != n {
            return Err(Error::Shape(format!(
                "gram matrix is {}x{} but the action set has {n} actions",
                gram.nrows(),
                gram.ncols()
            )));
        }
        return Ok(gram.clone());
    }
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(actions.action(i), actions.action(j))?;
            if !v.is_finite() {
                return Err(Error::InvalidKernel(format!(
                    "kernel value at ({i}, {j}) is not finite"
                )));
            }
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Provenance of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// Cholesky factor of a kernel Gram matrix.
    KernelCholesky,
    /// Eigendecomposition of a kernel Gram matrix.
    KernelEigen,
    /// Cholesky factor of a network gradient Gram matrix.
    NeuralGradient,
}

/// An `N`-dimensional feature map over a fixed action set.
///
/// Row `i` of [`FeatureMap::features`] is `phi(a_i)`; with the Cholesky
/// convention the matrix is lower triangular and `phi(a_i)` has support on
/// its first `i + 1` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    features: DMatrix<f64>,
    source: FeatureSource,
    jitter: f64,
}

impl FeatureMap {
    pub fn n_actions(&self) -> usize {
        self.features.nrows()
    }

    /// The feature matrix with `phi(a_i)` as row `i`.
    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    /// Feature vector of action `i`.
    pub fn feature(&self, i: usize) -> DVector<f64> {
        self.features.row(i).transpose()
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    /// Jitter that was added to the Gram diagonal before factorizing.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Reconstructs the Gram matrix `Phi Phi^T` this map represents.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.features * self.features.transpose()
    }
}

fn check_square_symmetric(k: &DMatrix<f64>) -> Result<()> {
    if k.nrows() != k.ncols() {
        return Err(Error::Shape(format!("matrix must be square, got {}x{}", k.nrows(), k.ncols())));
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidKernel("matrix has non-finite entries".into()));
    }
    for i in 0..k.nrows() {
        for j in 0..i {
            if (k[(i, j)] - k[(j, i)]).abs() > 1e-8 {
                return Err(Error::InvalidKernel(format!(
                    "matrix is asymmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Factorizes `K + jitter * I = Phi Phi^T` with `Phi` lower triangular and
/// returns the feature map with `phi(a_i)` = row `i` of `Phi`.
///
/// If the factorization fails the jitter is escalated by factors of 10 up to
/// [`MAX_JITTER`] before giving up.
pub fn cholesky_feature_map(k: &DMatrix<f64>, jitter: f64) -> Result<FeatureMap> {
    check_square_symmetric(k)?;
    if !(jitter > 0.0 && jitter.is_finite()) {
        return Err(Error::InvalidInput(format!("jitter must be positive, got {jitter}")));
    }
    let n = k.nrows();
    let mut j = jitter;
    loop {
        let mut shifted = k.clone();
        for i in 0..n {
            shifted[(i, i)] += j;
        }
        // Symmetrize exactly so the factorization sees the average of the
        // two triangles.
        let shifted = (&shifted + shifted.transpose()) * 0.5;
        if let Some(chol) = shifted.cholesky() {
            return Ok(FeatureMap {
                features: chol.unpack(),
                source: FeatureSource::KernelCholesky,
                jitter: j,
            });
        }
        j *= 10.0;
        if j > MAX_JITTER * (1.0 + 1e-12) {
            return Err(Error::Factorization(format!(
                "matrix not positive semi-definite after jitter escalation to {MAX_JITTER:e}"
            )));
        }
    }
}

/// Builds a feature map from the eigendecomposition `K = V diag(w) V^T`,
/// taking `Phi = V diag(sqrt(w))`. Small negative eigenvalues (down to
/// `-MAX_JITTER * max(w)`) are clamped to zero.
///
/// Produces a map equivalent to [`cholesky_feature_map`] on the same Gram
/// matrix; the two factorizations serve as independent routes for the
/// invariance checks.
pub fn eigen_feature_map(k: &DMatrix<f64>) -> Result<FeatureMap> {
    check_square_symmetric(k)?;
    let sym = (k + k.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max_w = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let floor = -MAX_JITTER * max_w.max(1.0);
    let mut sqrt_w = DVector::zeros(k.nrows());
    for (i, &w) in eig.eigenvalues.iter().enumerate() {
        if w < floor {
            return Err(Error::Factorization(format!(
                "matrix has a significantly negative eigenvalue {w:.3e}"
            )));
        }
        sqrt_w[i] = w.max(0.0).sqrt();
    }
    let mut features = eig.eigenvectors;
    for (j, mut col) in features.column_iter_mut().enumerate() {
        col *= sqrt_w[j];
    }
    Ok(FeatureMap { features, source: FeatureSource::KernelEigen, jitter: 0.0 })
}

impl FeatureMap {
    /// Wraps a raw feature matrix (rows are feature vectors). Used by the
    /// neural module for gradient features.
    pub(crate) fn from_rows(features: DMatrix<f64>, source: FeatureSource, jitter: f64) -> Self {
        Self { features, source, jitter }
    }
}

/// Checks whether two feature maps over the same action set are equivalent:
/// their Gram matrices agree entrywise within `tol`.
pub fn equivalence_check(a: &FeatureMap, b: &FeatureMap, tol: f64) -> Result<bool> {
    if a.n_actions() != b.n_actions() {
        return Err(Error::Shape(format!(
            "feature maps cover {} and {} actions",
            a.n_actions(),
            b.n_actions()
        )));
    }
    let ga = a.gram();
    let gb = b.gram();
    let max_dev = (&ga - &gb).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    Ok(max_dev <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn linear_gram_of_orthonormal_actions_is_identity() {
        let actions = ActionSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let k = gram(&Kernel::Linear, &actions).unwrap();
        assert_eq!(k, DMatrix::identity(2, 2));
    }

    #[test]
    fn rbf_diagonal_is_one() {
        let x = dvec(&[0.3, -0.4]);
        let k = Kernel::rbf(0.2).eval(&x, &x).unwrap();
        assert_eq!(k, 1.0);
    }

    #[test]
    fn rbf_at_one_lengthscale_distance() {
        // exp(-||x - x'||^2 / (2 l^2)) at ||x - x'|| = l = 0.2.
        let x = dvec(&[0.0, 0.0]);
        let y = dvec(&[0.2, 0.0]);
        let k = Kernel::rbf(0.2).eval(&x, &y).unwrap();
        assert!((k - (-0.5f64).exp()).abs() < 1e-12);
        assert!((k - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn matern_closed_forms_match_hand_values() {
        let x = dvec(&[0.0]);
        let y = dvec(&[0.3]);
        let r: f64 = 0.3 / 0.2;
        let k12 = Kernel::matern(MaternNu::Half, 0.2).eval(&x, &y).unwrap();
        assert!((k12 - (-r).exp()).abs() < 1e-12);
        let s3 = 3f64.sqrt() * r;
        let k32 = Kernel::matern(MaternNu::ThreeHalves, 0.2).eval(&x, &y).unwrap();
        assert!((k32 - (1.0 + s3) * (-s3).exp()).abs() < 1e-12);
        let s5 = 5f64.sqrt() * r;
        let k52 = Kernel::matern(MaternNu::FiveHalves, 0.2).eval(&x, &y).unwrap();
        assert!((k52 - (1.0 + s5 + s5 * s5 / 3.0) * (-s5).exp()).abs() < 1e-12);
    }

    #[test]
    fn invalid_lengthscale_is_rejected() {
        let actions = ActionSet::new(vec![vec![1.0]]).unwrap();
        assert!(gram(&Kernel::rbf(0.0), &actions).is_err());
        assert!(gram(&Kernel::rbf(f64::NAN), &actions).is_err());
    }

    #[test]
    fn cholesky_of_identity_is_identity() {
        let k = DMatrix::identity(2, 2);
        let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
        let dev = (map.features() - DMatrix::identity(2, 2)).norm();
        assert!(dev < 1e-5, "deviation {dev}");
    }

    #[test]
    fn cholesky_hand_example() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
        let phi = map.features();
        assert!((phi[(0, 0)] - 1.0).abs() < 1e-5);
        assert!(phi[(0, 1)].abs() < 1e-12);
        assert!((phi[(1, 0)] - 0.5).abs() < 1e-5);
        assert!((phi[(1, 1)] - 0.75f64.sqrt()).abs() < 1e-5);
    }

    #[test]
    fn cholesky_of_zero_matrix_uses_jitter() {
        let k = DMatrix::zeros(2, 2);
        let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
        let expected = DEFAULT_JITTER.sqrt();
        for i in 0..2 {
            assert!((map.features()[(i, i)] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite_matrix() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap_err();
        assert!(matches!(err, Error::Factorization(_)));
    }

    #[test]
    fn equivalence_of_cholesky_and_eigen_maps() {
        let mut r = rng::stream(3, "kernels-test");
        let actions = ActionSet::sample_unit_sphere(8, 3, &mut r);
        let k = gram(&Kernel::rbf(0.5), &actions).unwrap();
        let a = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
        let b = eigen_feature_map(&k).unwrap();
        assert!(equivalence_check(&a, &b, 1e-7).unwrap());
    }

    #[test]
    fn different_kernels_are_not_equivalent() {
        let mut r = rng::stream(4, "kernels-test");
        let actions = ActionSet::sample_unit_sphere(6, 3, &mut r);
        let ka = gram(&Kernel::Linear, &actions).unwrap();
        let kb = gram(&Kernel::rbf(0.2), &actions).unwrap();
        let a = cholesky_feature_map(&ka, DEFAULT_JITTER).unwrap();
        let b = cholesky_feature_map(&kb, DEFAULT_JITTER).unwrap();
        assert!(!equivalence_check(&a, &b, 1e-7).unwrap());
    }

    #[test]
    fn equivalence_check_rejects_mismatched_sizes() {
        let a = cholesky_feature_map(&DMatrix::identity(2, 2), DEFAULT_JITTER).unwrap();
        let b = cholesky_feature_map(&DMatrix::identity(3, 3), DEFAULT_JITTER).unwrap();
        assert!(matches!(equivalence_check(&a, &b, 1e-7), Err(Error::Shape(_))));
    }

    #[test]
    fn map_is_equivalent_to_itself() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
        assert!(equivalence_check(&map, &map, 0.0).unwrap());
    }

    #[test]
    fn unit_sphere_samples_have_unit_norm() {
        let mut r = rng::stream(5, "kernels-test");
        let actions = ActionSet::sample_unit_sphere(50, 4, &mut r);
        for a in actions.iter() {
            assert!((a.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn neural_gram_rescales_large_diagonal() {
        let g = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let k = Kernel::neural_gram(g).unwrap();
        match &k {
            Kernel::NeuralGram { gram } => {
                assert!((gram[(0, 0)] - 1.0).abs() < 1e-12);
                assert!((gram[(1, 1)] - 2.0 / 3.0).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn random_psd_grams_reconstruct_through_cholesky() {
        // Randomized reconstruction check across 100 draws.
        let mut r = rng::stream(11, "kernels-test");
        for trial in 0..100 {
            let n = r.random_range(1..=30usize);
            let d = r.random_range(1..=4usize);
            let actions = ActionSet::sample_unit_sphere(n, d, &mut r);
            let ls = r.random_range(0.1..1.5);
            let k = gram(&Kernel::rbf(ls), &actions).unwrap();
            let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
            let dev = (&map.gram() - &k).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(dev < 1e-8, "trial {trial}: reconstruction deviation {dev}");
        }
    }
}
