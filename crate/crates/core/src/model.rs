//! Problem data: per-mode system matrices, Markov chain, noise, cost weights.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numlin::{self, max_abs, symmetry_defect};
use crate::scalar::Real;

/// Tolerance on row sums of the transition matrix and on the sum of `pi0`.
pub const PROBABILITY_TOL: f64 = 1e-12;
/// Tolerance on `‖M − M'‖` for weights.
pub const WEIGHT_SYMMETRY_TOL: f64 = 1e-12;
/// Largest asymmetry that `symmetrize` ingestion will repair.
pub const SYMMETRIZE_LIMIT: f64 = 1e-8;

/// A Markov mode, 1-based as in all user-facing I/O.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModeIndex(usize);

impl ModeIndex {
    pub fn new(value: usize, modes: usize) -> Result<Self> {
        if value == 0 || value > modes {
            return Err(Error::dim("mode index", format!("1..={modes}"), value));
        }
        Ok(ModeIndex(value))
    }

    pub fn from_zero_based(i: usize) -> Self {
        ModeIndex(i + 1)
    }

    pub fn get(self) -> usize {
        self.0
    }

    pub fn zero_based(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Distribution of the scalar noise ω(k). Only used by the simulator; every
/// solver depends on the variance alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// ±σ with probability ½ each.
    Rademacher,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Rademacher => "rademacher",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "rademacher" => Ok(NoiseKind::Rademacher),
            other => Err(format!("unknown noise kind {other:?} (expected gaussian or rademacher)")),
        }
    }
}

/// Discrete-time Markov jump linear system with multiplicative noise:
///
/// `x(k+1) = (A_θ + B_θ ω) x(k) + (C_θ + D_θ ω) u(k)`.
///
/// `a`, `b` are `n×n`; `c`, `d` are `n×m`. Index `i` of every per-mode vector
/// is mode `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MjlsModel<T: Real> {
    pub n: usize,
    pub m: usize,
    pub a: Vec<DMatrix<T>>,
    pub b: Vec<DMatrix<T>>,
    pub c: Vec<DMatrix<T>>,
    pub d: Vec<DMatrix<T>>,
    /// Noise variance σ².
    pub sigma2: T,
    /// Row-stochastic transition matrix, `rho[(i, j)] = P(θ(k+1)=j | θ(k)=i)`.
    pub rho: DMatrix<T>,
    /// Initial mode distribution.
    pub pi0: DVector<T>,
    pub noise_kind: NoiseKind,
}

impl<T: Real> MjlsModel<T> {
    pub fn modes(&self) -> usize {
        self.a.len()
    }

    /// `Σ_j ρ_{i,j} P_j` for every mode `i`.
    pub fn expected_next(&self, p: &[DMatrix<T>]) -> Vec<DMatrix<T>> {
        (0..self.modes())
            .map(|i| p.iter().enumerate().fold(DMatrix::zeros(self.n, self.n), |acc, (j, pj)| acc + pj * self.rho[(i, j)]))
            .collect()
    }

    /// Errors unless [`validate_model`] passes.
    pub fn ensure_valid(&self, weights: &CostWeights<T>) -> Result<()> {
        let report = validate_model(self, weights);
        if report.passed() {
            Ok(())
        } else {
            Err(Error::InvalidModel(report))
        }
    }

    /// Checks that a per-mode tuple has `modes()` entries of shape `rows×cols`.
    pub fn check_tuple(&self, what: &str, tuple: &[DMatrix<T>], rows: usize, cols: usize) -> Result<()> {
        if tuple.len() != self.modes() {
            return Err(Error::dim(what, format!("{} modes", self.modes()), format!("{} modes", tuple.len())));
        }
        for (i, mat) in tuple.iter().enumerate() {
            if mat.shape() != (rows, cols) {
                return Err(Error::dim(format!("{what}_{}", i + 1), format!("{rows}x{cols}"), format!("{}x{}", mat.nrows(), mat.ncols())));
            }
        }
        Ok(())
    }
}

/// Cost weights. `q`, `r` and `terminal_p` only need to be symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights<T: Real> {
    pub q: Vec<DMatrix<T>>,
    pub r: Vec<DMatrix<T>>,
    /// Terminal penalty `P_{θ(N+1)}` per mode.
    pub terminal_p: Vec<DMatrix<T>>,
}

impl<T: Real> CostWeights<T> {
    /// Same `q`, `r`, different terminal penalty.
    pub fn with_terminal(&self, terminal_p: Vec<DMatrix<T>>) -> Self {
        CostWeights { q: self.q.clone(), r: self.r.clone(), terminal_p }
    }

    /// Averages every weight with its transpose when the defect is below
    /// [`SYMMETRIZE_LIMIT`]; larger defects are left for validation to report.
    pub fn symmetrize_small_defects(&mut self) {
        let limit = T::lit(SYMMETRIZE_LIMIT);
        for mat in self.q.iter_mut().chain(self.r.iter_mut()).chain(self.terminal_p.iter_mut()) {
            if mat.is_square() && symmetry_defect(mat) < limit {
                *mat = numlin::symmetrize(mat);
            }
        }
    }
}

/// Initial state: deterministic `x0`, or a random one given by its second moment.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState<T: Real> {
    Deterministic(DVector<T>),
    SecondMoment(DMatrix<T>),
}

impl<T: Real> InitialState<T> {
    /// `E[x0 x0']`.
    pub fn second_moment(&self) -> DMatrix<T> {
        match self {
            InitialState::Deterministic(x) => x * x.transpose(),
            InitialState::SecondMoment(m) => m.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialState::Deterministic(x) => x.len(),
            InitialState::SecondMoment(m) => m.nrows(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            InitialState::Deterministic(x) if x.len() != n => Err(Error::dim("x0", n, x.len())),
            InitialState::SecondMoment(m) => {
                if m.shape() != (n, n) {
                    return Err(Error::dim("x0 second moment", format!("{n}x{n}"), format!("{}x{}", m.nrows(), m.ncols())));
                }
                let defect = symmetry_defect(m);
                if defect > T::tol(1e-10) * T::one().max(max_abs(m)) {
                    return Err(Error::NotSymmetric { what: "x0 second moment".into(), defect: defect.as_f64() });
                }
                if !numlin::psd_check(m, None)?.is_psd() {
                    let lmin = numlin::SymEig::new(m)?.min();
                    return Err(Error::Indefinite { lambda_min: lmin.as_f64() });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Field path, e.g. `rho`, `Q_1`, `mode[2].C`.
    pub field: String,
    pub message: String,
}

/// Result of [`validate_model`]; empty means pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation { field: field.into(), message: message.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return write!(f, "pass");
        }
        for (idx, v) in self.violations.iter().enumerate() {
            if idx > 0 {
                writeln!(f)?;
            }
            write!(f, "{}: {}", v.field, v.message)?;
        }
        Ok(())
    }
}

/// Lists every violated invariant of the problem data.
pub fn validate_model<T: Real>(model: &MjlsModel<T>, weights: &CostWeights<T>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (n, m) = (model.n, model.m);
    let modes = model.modes();

    if modes == 0 {
        report.push("modes", "at least one mode is required");
    }

    let per_mode: [(&str, &[DMatrix<T>], usize, usize); 7] = [
        ("A", &model.a, n, n),
        ("B", &model.b, n, n),
        ("C", &model.c, n, m),
        ("D", &model.d, n, m),
        ("Q", &weights.q, n, n),
        ("R", &weights.r, m, m),
        ("terminal_P", &weights.terminal_p, n, n),
    ];
    for (name, mats, rows, cols) in per_mode {
        if mats.len() != modes {
            report.push(name, format!("expected {modes} matrices, found {}", mats.len()));
            continue;
        }
        for (i, mat) in mats.iter().enumerate() {
            if mat.shape() != (rows, cols) {
                report.push(format!("{name}_{}", i + 1), format!("expected {rows}x{cols}, found {}x{}", mat.nrows(), mat.ncols()));
            } else if mat.iter().any(|v| !v.is_finite()) {
                report.push(format!("{name}_{}", i + 1), "contains a non-finite entry");
            }
        }
    }

    let sym_tol = T::lit(WEIGHT_SYMMETRY_TOL);
    for (name, mats) in [("Q", &weights.q), ("R", &weights.r), ("terminal_P", &weights.terminal_p)] {
        for (i, mat) in mats.iter().enumerate() {
            if mat.is_square() {
                let defect = symmetry_defect(mat);
                if defect > sym_tol {
                    report.push(format!("{name}_{}", i + 1), format!("{name}_{} not symmetric (defect {:e})", i + 1, defect.as_f64()));
                }
            }
        }
    }

    let prob_tol = T::lit(PROBABILITY_TOL);
    if model.rho.shape() != (modes, modes) {
        report.push("rho", format!("expected {modes}x{modes}, found {}x{}", model.rho.nrows(), model.rho.ncols()));
    } else {
        for i in 0..modes {
            let row = model.rho.row(i);
            for (j, v) in row.iter().enumerate() {
                if !(*v >= T::zero() && *v <= T::one()) {
                    report.push("rho", format!("entry ({}, {}) = {} outside [0, 1]", i + 1, j + 1, v.as_f64()));
                }
            }
            let sum = row.iter().fold(T::zero(), |acc, v| acc + *v);
            if (sum - T::one()).abs() > prob_tol {
                report.push("rho", format!("row {} sums to {}", i + 1, sum.as_f64()));
            }
        }
    }

    if model.pi0.len() != modes {
        report.push("pi0", format!("expected {modes} entries, found {}", model.pi0.len()));
    } else {
        for (i, v) in model.pi0.iter().enumerate() {
            if !(*v >= T::zero() && *v <= T::one()) {
                report.push("pi0", format!("entry {} = {} outside [0, 1]", i + 1, v.as_f64()));
            }
        }
        let sum = model.pi0.iter().fold(T::zero(), |acc, v| acc + *v);
        if (sum - T::one()).abs() > prob_tol {
            report.push("pi0", format!("entries sum to {}", sum.as_f64()));
        }
    }

    if model.sigma2 < T::zero() || !model.sigma2.is_finite() {
        report.push("sigma2", format!("noise variance must be a finite nonnegative number, found {}", model.sigma2.as_f64()));
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::section4;

    #[test]
    fn section4_model_passes() {
        let (model, weights) = section4();
        let report = validate_model(&model, &weights);
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn rho_row_sum_violation() {
        let (mut model, weights) = section4();
        model.rho[(0, 0)] = 0.5;
        model.rho[(0, 1)] = 0.6;
        let report = validate_model(&model, &weights);
        assert!(!report.passed());
        let msg = report.to_string();
        assert!(msg.contains("row 1 sums to 1.1"), "{msg}");
    }

    #[test]
    fn asymmetric_q_rejected() {
        let (mut model, mut weights) = section4();
        model.n = 2;
        model.m = 1;
        weights.q[0] = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let report = validate_model(&model, &weights);
        assert!(report.to_string().contains("Q_1 not symmetric"), "{report}");
    }

    #[test]
    fn dimension_and_pi0_errors_are_listed() {
        let (mut model, weights) = section4();
        model.c[1] = DMatrix::zeros(2, 1);
        model.pi0 = DVector::from_vec(vec![0.7, 0.7]);
        model.sigma2 = -1.0;
        let report = validate_model(&model, &weights);
        let fields: Vec<&str> = report.violations.iter().map(|v| v.field.as_str()).collect();
        assert!(fields.contains(&"C_2"));
        assert!(fields.contains(&"pi0"));
        assert!(fields.contains(&"sigma2"));
    }

    #[test]
    fn symmetrize_repairs_only_small_defects() {
        let (_, mut weights) = section4();
        weights.q[0] = DMatrix::from_row_slice(2, 2, &[1.0, 0.5 + 1e-10, 0.5, 1.0]);
        weights.q[1] = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.5, 1.0]);
        weights.symmetrize_small_defects();
        assert_eq!(symmetry_defect(&weights.q[0]), 0.0);
        assert!(symmetry_defect(&weights.q[1]) > 0.09);
    }

    #[test]
    fn mode_index_bounds() {
        assert!(ModeIndex::new(0, 2).is_err());
        assert!(ModeIndex::new(3, 2).is_err());
        let m = ModeIndex::new(2, 2).unwrap();
        assert_eq!(m.zero_based(), 1);
        assert_eq!(ModeIndex::from_zero_based(0).get(), 1);
    }

    #[test]
    fn random_initial_state_checked() {
        let bad = InitialState::SecondMoment(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]));
        assert!(bad.validate(2).is_err());
        let good = InitialState::SecondMoment(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]));
        assert!(good.validate(2).is_ok());
        assert!(InitialState::Deterministic(DVector::from_vec(vec![1.0])).validate(2).is_err());
    }
}
