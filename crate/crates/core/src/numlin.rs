//! Small dense symmetric linear algebra: eigen-decomposition, Moore–Penrose
//! pseudo-inverse, definiteness classification, kernel bases, PSD square roots
//! and the spectral radius of linear maps acting on tuples of matrices.
//!
//! All matrix "max-norms" in this crate are the largest absolute entry.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default relative eigenvalue cutoff of [`pinv_sym`].
pub const PINV_TOL: f64 = 1e-10;
/// Relative scale of the default absolute tolerance of [`psd_check`].
pub const PSD_TOL: f64 = 1e-9;
/// Symmetry slack accepted by [`pinv_sym`] (relative to the max-norm).
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Dense eigen-solve is used while the vectorized operator has at most this many rows.
pub const DENSE_LIMIT: usize = 400;

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 100_000;
const EIGEN_MAX_ITER: usize = 10_000;

/// Largest absolute entry.
pub fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
}

/// Largest absolute entry of `m - m'`.
pub fn symmetry_defect<T: Real>(m: &DMatrix<T>) -> T {
    if !m.is_square() {
        return T::max_value().unwrap_or_else(T::one);
    }
    let n = m.nrows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// `(m + m') / 2`.
pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// Symmetric eigen-decomposition with eigenvalues sorted in descending order.
#[derive(Debug, Clone)]
pub struct SymEig<T: Real> {
    pub eigenvalues: DVector<T>,
    /// Orthogonal matrix whose columns are the matching eigenvectors.
    pub eigenvectors: DMatrix<T>,
}

impl<T: Real> SymEig<T> {
    pub fn new(s: &DMatrix<T>) -> Result<Self> {
        if !s.is_square() {
            return Err(Error::dim("symmetric matrix", "square", format!("{}x{}", s.nrows(), s.ncols())));
        }
        let p = s.nrows();
        if p == 0 {
            return Ok(SymEig { eigenvalues: DVector::zeros(0), eigenvectors: DMatrix::zeros(0, 0) });
        }
        let eig = nalgebra::SymmetricEigen::try_new(symmetrize(s), T::EPSILON, EIGEN_MAX_ITER)
            .ok_or_else(|| Error::Decomposition("symmetric eigen-decomposition did not converge".into()))?;
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal));
        let eigenvalues = DVector::from_iterator(p, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut eigenvectors = DMatrix::zeros(p, p);
        for (dst, &src) in order.iter().enumerate() {
            eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Ok(SymEig { eigenvalues, eigenvectors })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Smallest eigenvalue (`+inf`-free: zero for an empty matrix).
    pub fn min(&self) -> T {
        self.eigenvalues.iter().copied().last().unwrap_or_else(T::zero)
    }

    /// Largest absolute eigenvalue, i.e. the spectral norm.
    pub fn spectral_norm(&self) -> T {
        self.eigenvalues.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    /// `V · diag(f(λ)) · V'`.
    pub fn reconstruct_with(&self, f: impl Fn(T) -> T) -> DMatrix<T> {
        let p = self.dim();
        let mut scaled = self.eigenvectors.clone();
        for j in 0..p {
            let w = f(self.eigenvalues[j]);
            scaled.column_mut(j).scale_mut(w);
        }
        symmetrize(&(scaled * self.eigenvectors.transpose()))
    }
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix.
///
/// Eigenvalues with `|λ| > tol · max(1, |λ|_max)` are inverted; the rest are
/// treated as exact zeros.
pub fn pinv_sym<T: Real>(s: &DMatrix<T>, tol: T) -> Result<DMatrix<T>> {
    let defect = symmetry_defect(s);
    if defect > T::tol(SYMMETRY_TOL) * T::one().max(max_abs(s)) {
        return Err(Error::NotSymmetric { what: "pseudo-inverse input".into(), defect: defect.as_f64() });
    }
    let eig = SymEig::new(s)?;
    Ok(pinv_from_eig(&eig, tol))
}

pub(crate) fn pinv_from_eig<T: Real>(eig: &SymEig<T>, tol: T) -> DMatrix<T> {
    let cutoff = tol * T::one().max(eig.spectral_norm());
    eig.reconstruct_with(|l| if l.abs() > cutoff { T::one() / l } else { T::zero() })
}

/// Outcome of [`psd_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Definiteness {
    PositiveDefinite,
    PositiveSemidefinite,
    Indefinite,
}

impl Definiteness {
    /// True unless indefinite.
    pub fn is_psd(self) -> bool {
        self != Definiteness::Indefinite
    }
}

impl std::fmt::Display for Definiteness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Definiteness::PositiveDefinite => "positive definite",
            Definiteness::PositiveSemidefinite => "positive semidefinite",
            Definiteness::Indefinite => "indefinite",
        })
    }
}

/// Default absolute tolerance for a matrix with spectral norm `norm`.
pub fn default_psd_tol<T: Real>(norm: T) -> T {
    T::tol(PSD_TOL) * T::one().max(norm)
}

/// Classifies a symmetric matrix by its minimum eigenvalue. `tol = None` uses
/// `1e-9 · max(1, ‖S‖₂)`.
pub fn psd_check<T: Real>(s: &DMatrix<T>, tol: Option<T>) -> Result<Definiteness> {
    let eig = SymEig::new(s)?;
    Ok(classify(&eig, tol))
}

pub(crate) fn classify<T: Real>(eig: &SymEig<T>, tol: Option<T>) -> Definiteness {
    let tol = tol.unwrap_or_else(|| default_psd_tol(eig.spectral_norm()));
    let lmin = eig.min();
    if eig.dim() == 0 || lmin > tol {
        Definiteness::PositiveDefinite
    } else if lmin > -tol {
        Definiteness::PositiveSemidefinite
    } else {
        Definiteness::Indefinite
    }
}

/// Orthonormal basis (as columns) of the eigenspace with `|λ| ≤ tol`.
/// A trivial kernel gives a `p×0` matrix.
pub fn kernel_basis<T: Real>(s: &DMatrix<T>, tol: T) -> Result<DMatrix<T>> {
    let eig = SymEig::new(s)?;
    Ok(kernel_from_eig(&eig, tol))
}

pub(crate) fn kernel_from_eig<T: Real>(eig: &SymEig<T>, tol: T) -> DMatrix<T> {
    let cols: Vec<usize> = (0..eig.dim()).filter(|&j| eig.eigenvalues[j].abs() <= tol).collect();
    let mut basis = DMatrix::zeros(eig.dim(), cols.len());
    for (dst, &src) in cols.iter().enumerate() {
        basis.set_column(dst, &eig.eigenvectors.column(src));
    }
    basis
}

/// Symmetric PSD square root. Eigenvalues in `[-tol, 0)` are clamped to zero;
/// anything more negative is rejected. `tol = None` uses the [`psd_check`] default.
pub fn sqrt_psd<T: Real>(s: &DMatrix<T>, tol: Option<T>) -> Result<DMatrix<T>> {
    let eig = SymEig::new(s)?;
    let tol = tol.unwrap_or_else(|| default_psd_tol(eig.spectral_norm()));
    let lmin = eig.min();
    if lmin < -tol {
        return Err(Error::Indefinite { lambda_min: lmin.as_f64() });
    }
    Ok(eig.reconstruct_with(|l| l.max(T::zero()).sqrt()))
}

/// How [`tuple_operator_spectral_radius`] computes the radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpectralMethod {
    /// Dense eigen-solve up to [`DENSE_LIMIT`] rows, power iteration beyond.
    #[default]
    Auto,
    Dense,
    Power,
}

/// Spectral radius of a linear map on `modes`-tuples of `n×n` matrices.
///
/// The map is vectorized column-major, mode-major into a square operator of
/// size `modes · n²`.
pub fn tuple_operator_spectral_radius<T, F>(modes: usize, n: usize, apply: F, method: SpectralMethod) -> Result<T>
where
    T: Real,
    F: Fn(&[DMatrix<T>]) -> Vec<DMatrix<T>>,
{
    let size = modes * n * n;
    if size == 0 {
        return Ok(T::zero());
    }
    let dense = match method {
        SpectralMethod::Auto => size <= DENSE_LIMIT,
        SpectralMethod::Dense => true,
        SpectralMethod::Power => false,
    };
    if dense {
        dense_radius(modes, n, &apply)
    } else {
        power_radius(modes, n, &apply)
    }
}

fn vectorize<T: Real>(tuple: &[DMatrix<T>], n: usize) -> DVector<T> {
    DVector::from_iterator(tuple.len() * n * n, tuple.iter().flat_map(|m| m.iter().copied()))
}

fn check_output<T: Real>(out: &[DMatrix<T>], modes: usize, n: usize) -> Result<()> {
    if out.len() != modes || out.iter().any(|m| m.shape() != (n, n)) {
        return Err(Error::dim("tuple map output", format!("{modes} matrices {n}x{n}"), format!("{} matrices", out.len())));
    }
    Ok(())
}

/// Matrix of the vectorized map, built column by column from basis tuples.
pub fn operator_matrix<T, F>(modes: usize, n: usize, apply: F) -> Result<DMatrix<T>>
where
    T: Real,
    F: Fn(&[DMatrix<T>]) -> Vec<DMatrix<T>>,
{
    let size = modes * n * n;
    let mut op = DMatrix::zeros(size, size);
    let mut basis = vec![DMatrix::zeros(n, n); modes];
    for col in 0..size {
        let (mode, entry) = (col / (n * n), col % (n * n));
        basis[mode][entry] = T::one();
        let out = apply(&basis);
        check_output(&out, modes, n)?;
        op.set_column(col, &vectorize(&out, n));
        basis[mode][entry] = T::zero();
    }
    Ok(op)
}

fn dense_radius<T, F>(modes: usize, n: usize, apply: &F) -> Result<T>
where
    T: Real,
    F: Fn(&[DMatrix<T>]) -> Vec<DMatrix<T>>,
{
    let op = operator_matrix(modes, n, apply)?;
    let schur = nalgebra::Schur::try_new(op, T::EPSILON, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::Decomposition("real Schur decomposition did not converge".into()))?;
    let radius = schur.complex_eigenvalues().iter().fold(T::zero(), |acc, z| acc.max((z.re * z.re + z.im * z.im).sqrt()));
    Ok(radius)
}

fn tuple_norm<T: Real>(tuple: &[DMatrix<T>]) -> T {
    tuple.iter().fold(T::zero(), |acc, m| acc + m.norm_squared()).sqrt()
}

fn power_radius<T, F>(modes: usize, n: usize, apply: &F) -> Result<T>
where
    T: Real,
    F: Fn(&[DMatrix<T>]) -> Vec<DMatrix<T>>,
{
    // Identity tuple lies inside the PSD cone, which second-moment maps preserve.
    let mut v: Vec<DMatrix<T>> = vec![DMatrix::identity(n, n); modes];
    let scale = tuple_norm(&v);
    v.iter_mut().for_each(|m| *m /= scale);

    let tol = T::tol(POWER_TOL);
    let mut previous = T::zero();
    let mut estimate = T::zero();
    for it in 0..POWER_MAX_ITER {
        let w = apply(&v);
        check_output(&w, modes, n)?;
        let norm = tuple_norm(&w);
        if norm == T::zero() {
            return Ok(T::zero());
        }
        previous = estimate;
        estimate = norm;
        v = w.into_iter().map(|m| m / norm).collect();
        if it > 0 && (estimate - previous).abs() <= tol * estimate {
            return Ok(estimate);
        }
    }
    Err(Error::NoConvergence { previous: previous.as_f64(), last: estimate.as_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dm(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        a.shape() == b.shape() && max_abs(&(a - b)) <= tol
    }

    #[test]
    fn pinv_rank_deficient_diagonal() {
        let p = pinv_sym(&dm(2, 2, &[2.0, 0.0, 0.0, 0.0]), 1e-10).unwrap();
        assert!(close(&p, &dm(2, 2, &[0.5, 0.0, 0.0, 0.0]), 1e-15));
    }

    #[test]
    fn pinv_zero_is_zero() {
        let p = pinv_sym(&DMatrix::<f64>::zeros(3, 3), 1e-10).unwrap();
        assert_eq!(p, DMatrix::zeros(3, 3));
    }

    #[test]
    fn pinv_rejects_asymmetric() {
        let err = pinv_sym(&dm(2, 2, &[0.0, 1.0, 0.0, 0.0]), 1e-10).unwrap_err();
        assert!(matches!(err, Error::NotSymmetric { .. }));
    }

    #[test]
    fn psd_classification() {
        assert_eq!(psd_check(&dm(2, 2, &[1.0, 0.0, 0.0, 0.0]), None).unwrap(), Definiteness::PositiveSemidefinite);
        assert_eq!(psd_check(&dm(1, 1, &[-3.0]), None).unwrap(), Definiteness::Indefinite);
        assert_eq!(psd_check(&dm(2, 2, &[1e-15, 0.0, 0.0, 1.0]), None).unwrap(), Definiteness::PositiveSemidefinite);
        assert_eq!(psd_check(&DMatrix::<f64>::identity(3, 3), None).unwrap(), Definiteness::PositiveDefinite);
    }

    #[test]
    fn kernel_examples() {
        let k = kernel_basis(&dm(2, 2, &[1.0, 0.0, 0.0, 0.0]), 1e-9).unwrap();
        assert_eq!(k.shape(), (2, 1));
        assert!((k[(0, 0)]).abs() < 1e-15 && (k[(1, 0)].abs() - 1.0).abs() < 1e-15);

        assert_eq!(kernel_basis(&DMatrix::<f64>::identity(3, 3), 1e-9).unwrap().ncols(), 0);

        let k = kernel_basis(&dm(2, 2, &[1.0, 1.0, 1.0, 1.0]), 1e-9).unwrap();
        assert_eq!(k.ncols(), 1);
        let h = 1.0 / 2f64.sqrt();
        // Sign of an eigenvector is arbitrary.
        let s = k[(0, 0)].signum();
        assert!((k[(0, 0)] * s - h).abs() < 1e-12 && (k[(1, 0)] * s + h).abs() < 1e-12);
    }

    #[test]
    fn sqrt_examples() {
        let r = sqrt_psd(&dm(2, 2, &[4.0, 0.0, 0.0, 9.0]), None).unwrap();
        assert!(close(&r, &dm(2, 2, &[2.0, 0.0, 0.0, 3.0]), 1e-14));
        assert_eq!(sqrt_psd(&DMatrix::<f64>::zeros(2, 2), None).unwrap(), DMatrix::zeros(2, 2));
        let g = dm(3, 3, &[1.0, 2.0, 0.5, -1.0, 0.3, 2.0, 0.7, -0.2, 1.1]);
        let s = g.transpose() * &g;
        let r = sqrt_psd(&s, None).unwrap();
        assert!(close(&(&r * &r), &s, 1e-9 * max_abs(&s)));
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        match sqrt_psd(&dm(2, 2, &[1.0, 0.0, 0.0, -2.0]), None) {
            Err(Error::Indefinite { lambda_min }) => assert!((lambda_min + 2.0).abs() < 1e-12),
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn sqrt_clamps_roundoff_negatives() {
        let r = sqrt_psd(&dm(2, 2, &[1.0, 0.0, 0.0, -1e-14]), None).unwrap();
        assert_eq!(r[(1, 1)], 0.0);
    }

    #[test]
    fn spectral_radius_trivial_maps() {
        let half = |z: &[DMatrix<f64>]| z.iter().map(|m| m * 0.5).collect::<Vec<_>>();
        let r: f64 = tuple_operator_spectral_radius(1, 1, half, SpectralMethod::Auto).unwrap();
        assert!((r - 0.5).abs() < 1e-14);
        let r: f64 = tuple_operator_spectral_radius(1, 1, half, SpectralMethod::Power).unwrap();
        assert!((r - 0.5).abs() < 1e-12);

        let zero = |z: &[DMatrix<f64>]| z.iter().map(|m| m * 0.0).collect::<Vec<_>>();
        let r: f64 = tuple_operator_spectral_radius(2, 2, zero, SpectralMethod::Auto).unwrap();
        assert_eq!(r, 0.0);
        let r: f64 = tuple_operator_spectral_radius(2, 2, zero, SpectralMethod::Power).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn spectral_radius_rotation_like_map() {
        // Z -> R Z R' with R a scaled rotation: eigenvalues of the Kronecker map
        // all have modulus s².
        let (c, s) = (0.6f64, 0.8f64);
        let r = dm(2, 2, &[c, -s, s, c]) * 0.9;
        let map = |z: &[DMatrix<f64>]| z.iter().map(|m| &r * m * r.transpose()).collect::<Vec<_>>();
        let rad: f64 = tuple_operator_spectral_radius(1, 2, map, SpectralMethod::Dense).unwrap();
        assert!((rad - 0.81).abs() < 1e-12);
    }

    #[test]
    fn f32_pinv_works() {
        let s = DMatrix::<f32>::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.0]);
        let p = pinv_sym(&s, f32::tol(PINV_TOL)).unwrap();
        assert!((p[(0, 0)] - 0.25).abs() < 1e-6 && p[(1, 1)] == 0.0);
    }

    fn sym_strategy(p: usize) -> impl Strategy<Value = DMatrix<f64>> {
        // G · diag(d) · G' with some diagonal entries forced to zero covers
        // rank-deficient and indefinite inputs.
        (proptest::collection::vec(-2.0f64..2.0, p * p), proptest::collection::vec(prop_oneof![Just(0.0), -3.0f64..3.0], p)).prop_map(
            move |(g, d)| {
                let g = DMatrix::from_row_slice(p, p, &g);
                let d = DMatrix::from_diagonal(&DVector::from_vec(d));
                symmetrize(&(&g * d * g.transpose()))
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn pinv_penrose_identities(s in sym_strategy(4)) {
            let p = pinv_sym(&s, PINV_TOL).unwrap();
            let scale = 1.0f64.max(max_abs(&s)).max(max_abs(&p));
            let tol = 1e-9 * scale * scale * scale;
            prop_assert!(close(&(&s * &p * &s), &s, tol));
            prop_assert!(close(&(&p * &s * &p), &p, tol));
            let sp = &s * &p;
            let ps = &p * &s;
            prop_assert!(close(&sp.transpose(), &sp, tol));
            prop_assert!(close(&ps.transpose(), &ps, tol));
            // Lemma 1 (i), (iii).
            prop_assert!(close(&p.transpose(), &p, tol));
            prop_assert!(close(&sp, &ps, tol));
        }

        #[test]
        fn psd_class_preserved_by_pinv(s in sym_strategy(3)) {
            let p = pinv_sym(&s, PINV_TOL).unwrap();
            let a = psd_check(&s, None).unwrap();
            let b = psd_check(&p, None).unwrap();
            prop_assert_eq!(a.is_psd(), b.is_psd());
        }

        #[test]
        fn sqrt_and_kernel_consistent(g in proptest::collection::vec(-2.0f64..2.0, 6)) {
            // Rank <= 2 PSD matrix in 3 dimensions.
            let g = DMatrix::from_row_slice(2, 3, &g);
            let s = g.transpose() * &g;
            let root = sqrt_psd(&s, None).unwrap();
            let scale = 1.0f64.max(max_abs(&s));
            prop_assert!(close(&(&root * &root), &s, 1e-9 * scale));
            let k = kernel_basis(&s, 1e-9 * scale).unwrap();
            prop_assert!(k.ncols() >= 1);
            prop_assert!(max_abs(&(&root * &k)) <= 1e-6 * scale.sqrt());
        }

        #[test]
        fn eig_reconstructs(s in sym_strategy(4)) {
            let e = SymEig::new(&s).unwrap();
            let scale = 1.0f64.max(max_abs(&s));
            prop_assert!(close(&e.reconstruct_with(|l| l), &s, 1e-10 * scale));
            let vtv = e.eigenvectors.transpose() * &e.eigenvectors;
            prop_assert!(close(&vtv, &DMatrix::identity(4, 4), 1e-10));
            for w in e.eigenvalues.as_slice().windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
        }

        #[test]
        fn power_matches_dense(
            a in proptest::collection::vec(-0.8f64..0.8, 8),
            b in proptest::collection::vec(-0.5f64..0.5, 8),
            p in 0.05f64..0.95,
        ) {
            // Random 2-mode second-moment map on 2x2 matrices (size 8 <= 100).
            let am = [DMatrix::from_row_slice(2, 2, &a[..4]), DMatrix::from_row_slice(2, 2, &a[4..])];
            let bm = [DMatrix::from_row_slice(2, 2, &b[..4]), DMatrix::from_row_slice(2, 2, &b[4..])];
            let rho = [[p, 1.0 - p], [1.0 - p, p]];
            let map = |z: &[DMatrix<f64>]| {
                (0..2).map(|j| {
                    (0..2).fold(DMatrix::zeros(2, 2), |acc, i| {
                        acc + (&am[i] * &z[i] * am[i].transpose() + &bm[i] * &z[i] * bm[i].transpose()) * rho[i][j]
                    })
                }).collect::<Vec<_>>()
            };
            let dense: f64 = tuple_operator_spectral_radius(2, 2, map, SpectralMethod::Dense).unwrap();
            match tuple_operator_spectral_radius::<f64, _>(2, 2, &map, SpectralMethod::Power) {
                Ok(power) => prop_assert!((dense - power).abs() <= 1e-8 * dense.max(1e-3), "dense {} power {}", dense, power),
                // Power iteration may stall on a degenerate leading pair; that is its
                // documented failure signal, not a wrong answer.
                Err(Error::NoConvergence { .. }) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
