//! Solvability preconditions and certificates.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CostWeights, MjlsModel, ModeIndex};
use crate::numlin::{self, max_abs, Definiteness, SpectralMethod, SymEig};
use crate::riccati::{self, SchurConsequences, ShiftedWeights};
use crate::scalar::Real;

/// Relative PSD slack of the block test.
pub const BLOCK_PSD_TOL: f64 = 1e-9;
/// Relative slack of the kernel-inclusion test.
pub const KERNEL_TOL: f64 = 1e-8;
/// Default stability margin: stable iff radius < 1 − margin.
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Outcome of [`check_set_s`].
#[derive(Debug, Clone, PartialEq)]
pub struct SetSReport<T: Real> {
    pub member: bool,
    /// `λ_min` of `[[Q̃_i, L̃_i'], [L̃_i, R̃_i]]` per mode.
    pub block_min_eig: Vec<T>,
    /// `(‖C_i V‖, ‖D_i V‖)` for a kernel basis `V` of `R̃_i`.
    pub kernel_defects: Vec<(T, T)>,
    pub kernel_dim: Vec<usize>,
    pub failing_modes: Vec<ModeIndex>,
    /// Human-readable reason per failure, e.g. `mode 1 block indefinite`.
    pub reasons: Vec<String>,
    pub shifted: ShiftedWeights<T>,
    /// Block-positivity consequences per mode, always evaluated.
    pub consequences: Vec<SchurConsequences<T>>,
}

/// Tests whether `ptilde` belongs to the feasibility set: per mode, the block
/// weight matrix is PSD and `Ker R̃_i ⊆ Ker C_i ∩ Ker D_i`.
pub fn check_set_s<T: Real>(model: &MjlsModel<T>, weights: &CostWeights<T>, ptilde: &[DMatrix<T>]) -> Result<SetSReport<T>> {
    for (i, p) in ptilde.iter().enumerate() {
        if p.is_square() && numlin::symmetry_defect(p) > T::tol(numlin::SYMMETRY_TOL) * T::one().max(max_abs(p)) {
            return Err(Error::NotSymmetric { what: format!("ptilde_{}", i + 1), defect: numlin::symmetry_defect(p).as_f64() });
        }
    }
    let sw = riccati::shifted_weights(model, weights, ptilde)?;
    let mut report = SetSReport {
        member: true,
        block_min_eig: vec![],
        kernel_defects: vec![],
        kernel_dim: vec![],
        failing_modes: vec![],
        reasons: vec![],
        consequences: vec![],
        shifted: sw.clone(),
    };

    for i in 0..model.modes() {
        let mode = ModeIndex::from_zero_based(i);
        let block = sw.block(i);
        let eig = SymEig::new(&block)?;
        let block_ok = numlin::classify(&eig, Some(T::tol(BLOCK_PSD_TOL) * T::one().max(eig.spectral_norm()))).is_psd();

        let r_eig = SymEig::new(&sw.rt[i])?;
        let kernel = numlin::kernel_from_eig(&r_eig, numlin::default_psd_tol(r_eig.spectral_norm()));
        let (c_def, d_def) = if kernel.ncols() == 0 {
            (T::zero(), T::zero())
        } else {
            (max_abs(&(&model.c[i] * &kernel)), max_abs(&(&model.d[i] * &kernel)))
        };
        let kernel_tol = T::tol(KERNEL_TOL) * T::one().max(max_abs(&model.c[i])).max(max_abs(&model.d[i]));
        let kernel_ok = c_def <= kernel_tol && d_def <= kernel_tol;

        if !block_ok {
            report.reasons.push(format!("mode {mode} block indefinite (minimum eigenvalue {:.6e})", eig.min().as_f64()));
        }
        if !kernel_ok {
            report.reasons.push(format!("mode {mode} kernel of R-tilde not contained in Ker C ∩ Ker D"));
        }
        if !(block_ok && kernel_ok) {
            report.member = false;
            report.failing_modes.push(mode);
        }
        report.block_min_eig.push(eig.min());
        report.kernel_defects.push((c_def, d_def));
        report.kernel_dim.push(kernel.ncols());
        report.consequences.push(sw.schur_consequences(i)?);
    }
    Ok(report)
}

/// Both sides of the extended Schur lemma for `M = M'`, `N`, `R = R'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchurEquivalence {
    /// `M − N R† N' ⪰ 0`, `R ⪰ 0`, `N (I − R R†) = 0`.
    pub complement: bool,
    /// `[[M, N], [N', R]] ⪰ 0`.
    pub block: bool,
    /// `[[R, N'], [N, M]] ⪰ 0`.
    pub block_swapped: bool,
}

/// Evaluates the three equivalent conditions of the extended Schur lemma,
/// each with absolute slack `tol` (scaled by `max(1, norm)` of the matrix tested).
pub fn extended_schur<T: Real>(m: &DMatrix<T>, n: &DMatrix<T>, r: &DMatrix<T>, tol: T) -> Result<SchurEquivalence> {
    let (p, q) = (m.nrows(), r.nrows());
    if n.shape() != (p, q) {
        return Err(Error::dim("N", format!("{p}x{q}"), format!("{}x{}", n.nrows(), n.ncols())));
    }
    let psd = |s: &DMatrix<T>| -> Result<bool> {
        let eig = SymEig::new(s)?;
        Ok(eig.min() >= -tol * T::one().max(eig.spectral_norm()))
    };
    let r_eig = SymEig::new(r)?;
    let r_pinv = numlin::pinv_from_eig(&r_eig, T::tol(numlin::PINV_TOL));
    let comp = numlin::symmetrize(&(m - n * &r_pinv * n.transpose()));
    let range = max_abs(&(n * (DMatrix::identity(q, q) - r * &r_pinv)));
    let complement = psd(&comp)? && psd(r)? && range <= tol * T::one().max(max_abs(n));

    let mut blk = DMatrix::zeros(p + q, p + q);
    blk.view_mut((0, 0), (p, p)).copy_from(m);
    blk.view_mut((0, p), (p, q)).copy_from(n);
    blk.view_mut((p, 0), (q, p)).copy_from(&n.transpose());
    blk.view_mut((p, p), (q, q)).copy_from(r);
    let mut swapped = DMatrix::zeros(p + q, p + q);
    swapped.view_mut((0, 0), (q, q)).copy_from(r);
    swapped.view_mut((0, q), (q, p)).copy_from(&n.transpose());
    swapped.view_mut((q, 0), (p, q)).copy_from(n);
    swapped.view_mut((q, q), (p, p)).copy_from(m);

    Ok(SchurEquivalence { complement, block: psd(&blk)?, block_swapped: psd(&swapped)? })
}

/// One axis of a [`Grid`]: `min, min + step, …` up to `max` inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis<T: Real> {
    pub min: T,
    pub max: T,
    pub step: T,
}

impl<T: Real> Axis<T> {
    pub fn len(&self) -> usize {
        if self.max < self.min {
            return 0;
        }
        let count = ((self.max - self.min) / self.step + T::lit(1e-9)).floor();
        count.as_f64() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, idx: usize) -> T {
        self.min + self.step * T::lit(idx as f64)
    }
}

/// Rectangular grid over scalar `P̃` values, one axis per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T: Real> {
    pub axes: Vec<Axis<T>>,
}

impl<T: Real> Grid<T> {
    pub fn len(&self) -> usize {
        if self.axes.is_empty() {
            return 0;
        }
        self.axes.iter().map(Axis::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point `idx` in row-major order (last axis fastest).
    pub fn point(&self, mut idx: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.axes.len()];
        for (slot, axis) in out.iter_mut().zip(&self.axes).rev() {
            let len = axis.len();
            *slot = axis.value(idx % len);
            idx /= len;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionPoint<T: Real> {
    pub ptilde: Vec<T>,
    pub member: bool,
}

/// Evaluates [`check_set_s`] on every grid point (scalar state only, at most
/// three modes). Output is in row-major grid order.
pub fn region_scan<T: Real>(model: &MjlsModel<T>, weights: &CostWeights<T>, grid: &Grid<T>) -> Result<Vec<RegionPoint<T>>> {
    if model.n != 1 {
        return Err(Error::Unsupported(format!("region scan needs a scalar state, found n = {}", model.n)));
    }
    if model.modes() > 3 {
        return Err(Error::Unsupported(format!("region scan supports at most 3 modes, found {}", model.modes())));
    }
    if grid.axes.len() != model.modes() {
        return Err(Error::dim("grid axes", model.modes(), grid.axes.len()));
    }
    if grid.axes.iter().any(|a| a.step <= T::zero() || !a.step.is_finite()) {
        return Err(Error::Unsupported("grid step must be positive".into()));
    }
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let values = grid.point(idx);
            let ptilde: Vec<DMatrix<T>> = values.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect();
            let report = check_set_s(model, weights, &ptilde)?;
            Ok(RegionPoint { ptilde: values, member: report.member })
        })
        .collect()
}

/// Outcome of [`exact_observability`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilityReport<T: Real> {
    pub observable: bool,
    pub horizon: usize,
    /// Mode-conditioned output energy Gramians `G_i(T)`.
    pub gramians: Vec<DMatrix<T>>,
    pub lambda_min: Vec<T>,
    /// Smallest `t ≤ T` at which every `G_i(t)` is already positive definite.
    pub first_observable_horizon: Option<usize>,
}

/// Exact observability of `x(k+1) = (A_θ + ω B_θ) x(k)`, `y = Q̃^{1/2}_θ x`.
///
/// `G_i(0) = Q̃_i`, `G_i(t+1) = Q̃_i + A_i' G̅_i A_i + σ² B_i' G̅_i B_i` with
/// `G̅_i = Σ_j ρ_{i,j} G_j(t)`, so `x0' G_i(T) x0 = E[Σ_{k≤T} |y(k)|² | x0, θ(0)=i]`.
/// Observable iff every `G_i(T)` is positive definite. `horizon = None` uses `n·L`.
pub fn exact_observability<T: Real>(model: &MjlsModel<T>, qsqrt: &[DMatrix<T>], horizon: Option<usize>) -> Result<ObservabilityReport<T>> {
    let n = model.n;
    model.check_tuple("Q-tilde square root", qsqrt, n, n)?;
    let horizon = horizon.unwrap_or(n * model.modes());
    let qt: Vec<DMatrix<T>> = qsqrt.iter().map(|s| s.transpose() * s).collect();

    let all_pd = |g: &[DMatrix<T>]| -> Result<bool> {
        for gi in g {
            if numlin::psd_check(gi, None)? != Definiteness::PositiveDefinite {
                return Ok(false);
            }
        }
        Ok(true)
    };

    let mut g = qt.clone();
    let mut first = if all_pd(&g)? { Some(0) } else { None };
    for t in 1..=horizon {
        let gbar = model.expected_next(&g);
        g = (0..model.modes())
            .map(|i| {
                let (a, b) = (&model.a[i], &model.b[i]);
                numlin::symmetrize(&(&qt[i] + a.transpose() * &gbar[i] * a + b.transpose() * &gbar[i] * b * model.sigma2))
            })
            .collect();
        if first.is_none() && all_pd(&g)? {
            first = Some(t);
        }
    }
    let lambda_min = g.iter().map(|gi| SymEig::new(gi).map(|e| e.min())).collect::<Result<Vec<_>>>()?;
    Ok(ObservabilityReport { observable: all_pd(&g)?, horizon, gramians: g, lambda_min, first_observable_horizon: first })
}

/// Mean-square stability certificate of the closed loop `u = F_θ x`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityCertificate<T: Real> {
    pub spectral_radius: T,
    pub stable: bool,
    pub margin: T,
    /// `A_i + C_i F_i`.
    pub closed_a: Vec<DMatrix<T>>,
    /// `B_i + D_i F_i`.
    pub closed_b: Vec<DMatrix<T>>,
}

/// Spectral radius of the closed-loop second-moment operator
/// `Z'_j = Σ_i ρ_{i,j} (Ā_i Z_i Ā_i' + σ² B̄_i Z_i B̄_i')`; below one means
/// `E|x(k)|² → 0` for every initial state and mode.
pub fn ms_stability<T: Real>(model: &MjlsModel<T>, gains: &[DMatrix<T>], margin: Option<T>) -> Result<StabilityCertificate<T>> {
    model.check_tuple("F", gains, model.m, model.n)?;
    let closed_a: Vec<DMatrix<T>> = (0..model.modes()).map(|i| &model.a[i] + &model.c[i] * &gains[i]).collect();
    let closed_b: Vec<DMatrix<T>> = (0..model.modes()).map(|i| &model.b[i] + &model.d[i] * &gains[i]).collect();
    let radius = second_moment_radius(model, &closed_a, &closed_b, SpectralMethod::Auto)?;
    let margin = margin.unwrap_or_else(|| T::lit(STABILITY_MARGIN));
    Ok(StabilityCertificate { spectral_radius: radius, stable: radius < T::one() - margin, margin, closed_a, closed_b })
}

/// Radius of the second-moment map for given closed-loop matrices.
pub fn second_moment_radius<T: Real>(
    model: &MjlsModel<T>,
    closed_a: &[DMatrix<T>],
    closed_b: &[DMatrix<T>],
    method: SpectralMethod,
) -> Result<T> {
    let (n, modes) = (model.n, model.modes());
    let map = |z: &[DMatrix<T>]| -> Vec<DMatrix<T>> {
        let pushed: Vec<DMatrix<T>> = (0..modes)
            .map(|i| &closed_a[i] * &z[i] * closed_a[i].transpose() + &closed_b[i] * &z[i] * closed_b[i].transpose() * model.sigma2)
            .collect();
        (0..modes).map(|j| pushed.iter().enumerate().fold(DMatrix::zeros(n, n), |acc, (i, p)| acc + p * model.rho[(i, j)])).collect()
    };
    numlin::tuple_operator_spectral_radius(modes, n, map, method)
}

/// Outcome of [`maximality_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaximalityReport<T: Real> {
    pub holds: bool,
    /// Most negative eigenvalue of `P_i − P̃_i` over all candidates and modes.
    pub min_eigenvalue: T,
    /// Candidate index and mode where it occurs.
    pub worst: Option<(usize, ModeIndex)>,
}

impl<T: Real> MaximalityReport<T> {
    /// `max(0, −min_eigenvalue)`.
    pub fn violation(&self) -> T {
        (-self.min_eigenvalue).max(T::zero())
    }
}

/// Checks `P_i − P̃_i ⪰ −tol·I` for every candidate and mode.
pub fn maximality_check<T: Real>(p: &[DMatrix<T>], candidates: &[Vec<DMatrix<T>>], tol: T) -> Result<MaximalityReport<T>> {
    let mut min_eig: Option<T> = None;
    let mut worst = None;
    for (c, cand) in candidates.iter().enumerate() {
        if cand.len() != p.len() {
            return Err(Error::dim("candidate", p.len(), cand.len()));
        }
        for (i, (pi, ci)) in p.iter().zip(cand).enumerate() {
            if pi.shape() != ci.shape() {
                return Err(Error::dim(format!("candidate {c} mode {}", i + 1), format!("{:?}", pi.shape()), format!("{:?}", ci.shape())));
            }
            let lmin = SymEig::new(&numlin::symmetrize(&(pi - ci)))?.min();
            if min_eig.is_none_or(|m| lmin < m) {
                min_eig = Some(lmin);
                worst = Some((c, ModeIndex::from_zero_based(i)));
            }
        }
    }
    let min_eigenvalue = min_eig.unwrap_or_else(T::zero);
    Ok(MaximalityReport { holds: min_eigenvalue >= -tol, min_eigenvalue, worst })
}
