//! Coupled generalized Riccati equations with Markov jumps.
//!
//! * [`gdre_step`] is one backward step of the difference equation, with an
//!   optional cross weight `L` between state and input.
//! * [`solve_finite`] runs the recursion over a finite horizon and reports
//!   where (if anywhere) the regularity conditions fail.
//! * [`solve_gare`] obtains the maximal stationary solution by iterating the
//!   shifted ("new") recursion from zero, with weights induced by an element
//!   `P̃` of the feasibility set, and adding `P̃` back.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{CostWeights, InitialState, MjlsModel, ModeIndex};
use crate::numlin::{self, max_abs, Definiteness, SymEig};
use crate::scalar::Real;

/// Relative slack of the range condition `ΥΥ†M = M`.
pub const RANGE_TOL: f64 = 1e-8;
/// Default successive-iterate tolerance of [`solve_ngare`].
pub const NGARE_TOL: f64 = 1e-11;
pub const NGARE_MAX_ITER: usize = 100_000;
/// Relative GARE residual accepted by [`solve_gare`].
pub const GARE_RESIDUAL_TOL: f64 = 1e-8;
/// Slack on the identity between the stationary gain and the shifted-problem gain.
pub const GAIN_IDENTITY_TOL: f64 = 1e-7;

const DIVERGENCE_LIMIT: f64 = 1e150;

/// Why a mode fails the regularity conditions at some step.
#[derive(Debug, Clone, PartialEq)]
pub enum Irregularity {
    UpsilonIndefinite { lambda_min: f64 },
    RangeViolated { defect: f64 },
}

impl fmt::Display for Irregularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Irregularity::UpsilonIndefinite { lambda_min } => {
                write!(f, "Upsilon indefinite (minimum eigenvalue {lambda_min:e})")
            }
            Irregularity::RangeViolated { defect } => write!(f, "regularity violated (range defect {defect:e})"),
        }
    }
}

impl Irregularity {
    /// Short label used by the command-line reports.
    pub fn label(&self) -> &'static str {
        match self {
            Irregularity::UpsilonIndefinite { .. } => "Upsilon indefinite",
            Irregularity::RangeViolated { .. } => "regularity violated",
        }
    }
}

/// One backward step, all modes.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiStep<T: Real> {
    /// Continuation `S_i = Σ_j ρ_{i,j} P_j(k+1)`.
    pub s: Vec<DMatrix<T>>,
    pub p: Vec<DMatrix<T>>,
    pub upsilon: Vec<DMatrix<T>>,
    pub m: Vec<DMatrix<T>>,
    /// Gain `F_i = −Υ_i† M_i`.
    pub f: Vec<DMatrix<T>>,
    /// `None` when the mode is regular.
    pub issues: Vec<Option<Irregularity>>,
}

impl<T: Real> RiccatiStep<T> {
    pub fn regular(&self, mode: usize) -> bool {
        self.issues[mode].is_none()
    }

    pub fn all_regular(&self) -> bool {
        self.issues.iter().all(Option::is_none)
    }

    /// Lowest failing mode (0-based) with its reason.
    pub fn first_issue(&self) -> Option<(usize, &Irregularity)> {
        self.issues.iter().enumerate().find_map(|(i, issue)| issue.as_ref().map(|r| (i, r)))
    }
}

/// One backward step of the coupled recursion.
///
/// With `S_i = Σ_j ρ_{i,j} P_next_j`:
///
/// ```text
/// Υ_i = C_i' S_i C_i + σ² D_i' S_i D_i + R_i
/// M_i = C_i' S_i A_i + σ² D_i' S_i B_i + L_i
/// P_i = A_i' S_i A_i + σ² B_i' S_i B_i + Q_i − M_i' Υ_i† M_i
/// F_i = −Υ_i† M_i
/// ```
///
/// Regularity (`Υ_i ⪰ 0` and `Υ_i Υ_i† M_i = M_i`) is reported per mode, never enforced.
pub fn gdre_step<T: Real>(
    p_next: &[DMatrix<T>],
    model: &MjlsModel<T>,
    q: &[DMatrix<T>],
    r: &[DMatrix<T>],
    cross: Option<&[DMatrix<T>]>,
) -> Result<RiccatiStep<T>> {
    let (n, m) = (model.n, model.m);
    model.check_tuple("P_next", p_next, n, n)?;
    model.check_tuple("Q", q, n, n)?;
    model.check_tuple("R", r, m, m)?;
    if let Some(l) = cross {
        model.check_tuple("L", l, m, n)?;
    }

    let pinv_tol = T::tol(numlin::PINV_TOL);
    let range_tol = T::tol(RANGE_TOL);
    let s = model.expected_next(p_next);
    let modes = model.modes();
    let mut step = RiccatiStep {
        s: Vec::with_capacity(modes),
        p: Vec::with_capacity(modes),
        upsilon: Vec::with_capacity(modes),
        m: Vec::with_capacity(modes),
        f: Vec::with_capacity(modes),
        issues: Vec::with_capacity(modes),
    };

    for (i, si) in s.into_iter().enumerate() {
        let (a, b, c, d) = (&model.a[i], &model.b[i], &model.c[i], &model.d[i]);
        let ct_s = c.transpose() * &si;
        let dt_s = d.transpose() * &si;
        let upsilon = numlin::symmetrize(&(&ct_s * c + &dt_s * d * model.sigma2 + &r[i]));
        let mut mi = &ct_s * a + &dt_s * b * model.sigma2;
        if let Some(l) = cross {
            mi += &l[i];
        }

        let eig = SymEig::new(&upsilon)?;
        let ups_pinv = numlin::pinv_from_eig(&eig, pinv_tol);
        let fi = -(&ups_pinv * &mi);
        let pi = numlin::symmetrize(
            &(a.transpose() * &si * a + b.transpose() * &si * b * model.sigma2 + &q[i] - mi.transpose() * &ups_pinv * &mi),
        );

        let issue = if numlin::classify(&eig, None) == Definiteness::Indefinite {
            Some(Irregularity::UpsilonIndefinite { lambda_min: eig.min().as_f64() })
        } else {
            let defect = max_abs(&(&upsilon * &ups_pinv * &mi - &mi));
            if defect > range_tol * T::one().max(max_abs(&mi)) {
                Some(Irregularity::RangeViolated { defect: defect.as_f64() })
            } else {
                None
            }
        };

        step.s.push(si);
        step.p.push(pi);
        step.upsilon.push(upsilon);
        step.m.push(mi);
        step.f.push(fi);
        step.issues.push(issue);
    }
    Ok(step)
}

/// First irregular `(k, mode)` met by the backward recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFailure {
    pub k: usize,
    pub mode: ModeIndex,
    pub reason: Irregularity,
}

impl fmt::Display for StepFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mode {}: {} at k={}", self.mode, self.reason.label(), self.k)
    }
}

/// Full backward trace of the finite-horizon recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteSolution<T: Real> {
    /// `steps[k]` for `k = 0..=horizon`.
    pub steps: Vec<RiccatiStep<T>>,
    pub horizon: usize,
    /// `P(N+1)`.
    pub terminal: Vec<DMatrix<T>>,
    /// Weights the recursion was run with (needed by the costate check).
    pub weights: CostWeights<T>,
    pub cross: Option<Vec<DMatrix<T>>>,
    pub solvable: bool,
    /// First failure in backward order (largest `k` first, lowest mode first).
    pub failure: Option<StepFailure>,
}

impl<T: Real> FiniteSolution<T> {
    /// `P(k+1)` as seen by step `k`.
    pub fn continuation(&self, k: usize) -> &[DMatrix<T>] {
        if k == self.horizon {
            &self.terminal
        } else {
            &self.steps[k + 1].p
        }
    }

    /// Gains `F_i(k)` indexed `[k][mode]`.
    pub fn gains(&self) -> Vec<Vec<DMatrix<T>>> {
        self.steps.iter().map(|s| s.f.clone()).collect()
    }
}

/// Runs the recursion backward from `weights.terminal_p` over `k = N, …, 0`.
/// Irregular steps never abort; the first one is recorded.
pub fn solve_finite<T: Real>(model: &MjlsModel<T>, weights: &CostWeights<T>, horizon: usize) -> Result<FiniteSolution<T>> {
    model.ensure_valid(weights)?;
    backward_recursion(model, weights, None, horizon)
}

fn backward_recursion<T: Real>(
    model: &MjlsModel<T>,
    weights: &CostWeights<T>,
    cross: Option<&[DMatrix<T>]>,
    horizon: usize,
) -> Result<FiniteSolution<T>> {
    let mut reversed = Vec::with_capacity(horizon + 1);
    let mut failure = None;
    let mut next = weights.terminal_p.clone();
    for k in (0..=horizon).rev() {
        let step = gdre_step(&next, model, &weights.q, &weights.r, cross)?;
        if failure.is_none() {
            if let Some((i, reason)) = step.first_issue() {
                failure = Some(StepFailure { k, mode: ModeIndex::from_zero_based(i), reason: reason.clone() });
            }
        }
        next = step.p.clone();
        reversed.push(step);
    }
    reversed.reverse();
    Ok(FiniteSolution {
        steps: reversed,
        horizon,
        terminal: weights.terminal_p.clone(),
        weights: weights.clone(),
        cross: cross.map(<[_]>::to_vec),
        solvable: failure.is_none(),
        failure,
    })
}

/// Optimal finite-horizon cost `Σ_i π_i(0) tr(P_i(0) E[x0 x0'])`.
pub fn optimal_cost_finite<T: Real>(sol: &FiniteSolution<T>, init: &InitialState<T>, pi0: &[T]) -> Result<T> {
    if let Some(fail) = &sol.failure {
        return Err(Error::Unsolvable { k: fail.k, mode: fail.mode.get(), reason: fail.reason.to_string() });
    }
    let p0 = &sol.steps[0].p;
    if pi0.len() != p0.len() {
        return Err(Error::dim("pi0", p0.len(), pi0.len()));
    }
    let n = p0[0].nrows();
    init.validate(n)?;
    let x0 = init.second_moment();
    Ok(p0.iter().zip(pi0).fold(T::zero(), |acc, (p, &w)| acc + (p * &x0).trace() * w))
}

/// Per-step defects of the optimality system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResidual<T: Real> {
    /// `max_i ‖M_i + Υ_i F_i‖`: stationarity of the Hamiltonian.
    pub stationarity: T,
    /// `max_i ‖A_i' S_i Ā_i + σ² B_i' S_i B̄_i + Q_i + L_i' F_i − P_i‖`, the costate
    /// recursion in closed-loop form with `Ā = A + C F`, `B̄ = B + D F`.
    pub costate: T,
}

impl<T: Real> StepResidual<T> {
    pub fn worst(&self) -> T {
        self.stationarity.max(self.costate)
    }
}

/// Recomputes the stationarity and costate identities for every step from the
/// stored gains. Applies to solvable solutions only.
pub fn costate_residual<T: Real>(sol: &FiniteSolution<T>, model: &MjlsModel<T>) -> Result<Vec<StepResidual<T>>> {
    if let Some(fail) = &sol.failure {
        return Err(Error::Unsolvable { k: fail.k, mode: fail.mode.get(), reason: fail.reason.to_string() });
    }
    let mut out = Vec::with_capacity(sol.steps.len());
    for (k, step) in sol.steps.iter().enumerate() {
        let s = model.expected_next(sol.continuation(k));
        let mut worst = StepResidual { stationarity: T::zero(), costate: T::zero() };
        for i in 0..model.modes() {
            let f = &step.f[i];
            let stat = max_abs(&(&step.m[i] + &step.upsilon[i] * f));
            let (a, b, c, d) = (&model.a[i], &model.b[i], &model.c[i], &model.d[i]);
            let closed_a = a + c * f;
            let closed_b = b + d * f;
            let mut lam = a.transpose() * &s[i] * closed_a + b.transpose() * &s[i] * closed_b * model.sigma2 + &sol.weights.q[i];
            if let Some(l) = &sol.cross {
                lam += l[i].transpose() * f;
            }
            let costate = max_abs(&(lam - &step.p[i]));
            worst.stationarity = worst.stationarity.max(stat);
            worst.costate = worst.costate.max(costate);
        }
        out.push(worst);
    }
    Ok(out)
}

/// Weights induced by a candidate `P̃`:
///
/// ```text
/// Q̃_i = A_i' S̃_i A_i + σ² B_i' S̃_i B_i + Q_i − P̃_i
/// L̃_i = C_i' S̃_i A_i + σ² D_i' S̃_i B_i        (m×n)
/// R̃_i = C_i' S̃_i C_i + σ² D_i' S̃_i D_i + R_i
/// ```
/// with `S̃_i = Σ_j ρ_{i,j} P̃_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedWeights<T: Real> {
    pub qt: Vec<DMatrix<T>>,
    pub lt: Vec<DMatrix<T>>,
    pub rt: Vec<DMatrix<T>>,
    pub ptilde: Vec<DMatrix<T>>,
}

/// Residuals of the three consequences of block positivity for one mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchurConsequences<T: Real> {
    /// `λ_min(R̃_i)`.
    pub rt_min_eig: T,
    /// `λ_min(Q̃_i − L̃_i' R̃_i† L̃_i)`.
    pub schur_min_eig: T,
    /// `‖L̃_i' (I − R̃_i R̃_i†)‖`.
    pub range_defect: T,
}

impl<T: Real> SchurConsequences<T> {
    pub fn hold(&self, tol: T) -> bool {
        self.rt_min_eig >= -tol && self.schur_min_eig >= -tol && self.range_defect <= tol
    }
}

impl<T: Real> ShiftedWeights<T> {
    pub fn modes(&self) -> usize {
        self.qt.len()
    }

    /// `[[Q̃_i, L̃_i'], [L̃_i, R̃_i]]`.
    pub fn block(&self, mode: usize) -> DMatrix<T> {
        let (n, m) = (self.qt[mode].nrows(), self.rt[mode].nrows());
        let mut blk = DMatrix::zeros(n + m, n + m);
        blk.view_mut((0, 0), (n, n)).copy_from(&self.qt[mode]);
        blk.view_mut((0, n), (n, m)).copy_from(&self.lt[mode].transpose());
        blk.view_mut((n, 0), (m, n)).copy_from(&self.lt[mode]);
        blk.view_mut((n, n), (m, m)).copy_from(&self.rt[mode]);
        numlin::symmetrize(&blk)
    }

    pub fn schur_consequences(&self, mode: usize) -> Result<SchurConsequences<T>> {
        let rt = &self.rt[mode];
        let lt = &self.lt[mode];
        let eig = SymEig::new(rt)?;
        let rt_pinv = numlin::pinv_from_eig(&eig, T::tol(numlin::PINV_TOL));
        let schur = numlin::symmetrize(&(&self.qt[mode] - lt.transpose() * &rt_pinv * lt));
        let m = rt.nrows();
        let proj = DMatrix::identity(m, m) - rt * &rt_pinv;
        Ok(SchurConsequences {
            rt_min_eig: eig.min(),
            schur_min_eig: SymEig::new(&schur)?.min(),
            range_defect: max_abs(&(lt.transpose() * proj)),
        })
    }
}

/// Builds the shifted weights for `ptilde`. Membership in the feasibility set
/// is not assumed here.
pub fn shifted_weights<T: Real>(model: &MjlsModel<T>, weights: &CostWeights<T>, ptilde: &[DMatrix<T>]) -> Result<ShiftedWeights<T>> {
    let (n, m) = (model.n, model.m);
    model.check_tuple("ptilde", ptilde, n, n)?;
    model.check_tuple("Q", &weights.q, n, n)?;
    model.check_tuple("R", &weights.r, m, m)?;
    let s = model.expected_next(ptilde);
    let mut sw = ShiftedWeights { qt: vec![], lt: vec![], rt: vec![], ptilde: ptilde.to_vec() };
    for (i, si) in s.iter().enumerate() {
        let (a, b, c, d) = (&model.a[i], &model.b[i], &model.c[i], &model.d[i]);
        let s2 = model.sigma2;
        sw.qt.push(numlin::symmetrize(&(a.transpose() * si * a + b.transpose() * si * b * s2 + &weights.q[i] - &ptilde[i])));
        sw.lt.push(c.transpose() * si * a + d.transpose() * si * b * s2);
        sw.rt.push(numlin::symmetrize(&(c.transpose() * si * c + d.transpose() * si * d * s2 + &weights.r[i])));
    }
    Ok(sw)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NgareOptions<T: Real> {
    /// Stop when `max_i ‖X_i⁺ − X_i‖ ≤ tol · max(1, ‖X‖)`.
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> Default for NgareOptions<T> {
    fn default() -> Self {
        NgareOptions { tol: T::tol(NGARE_TOL), max_iter: NGARE_MAX_ITER }
    }
}

/// Limit of the shifted recursion started from `X = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NgareSolution<T: Real> {
    pub x: Vec<DMatrix<T>>,
    /// Stationary `Υ̃`, `M̃`, `F̃ = −Υ̃†M̃` evaluated at `x`.
    pub upsilon: Vec<DMatrix<T>>,
    pub m: Vec<DMatrix<T>>,
    pub gains: Vec<DMatrix<T>>,
    pub regular: Vec<bool>,
    pub iterations: usize,
    /// Every iterate was nondecreasing in the PSD order (within tolerance).
    pub monotone: bool,
    /// Every iterate was PSD (within tolerance).
    pub iterates_psd: bool,
    /// Most negative eigenvalue seen in `X⁺ − X` over all iterations.
    pub worst_decrease: T,
    /// Max-norm of `X⁺ − X` per iteration.
    pub increments: Vec<T>,
}

fn tuple_max_abs<T: Real>(tuple: &[DMatrix<T>]) -> T {
    tuple.iter().fold(T::zero(), |acc, m| acc.max(max_abs(m)))
}

/// Iterates the shifted recursion with weights `(Q̃, R̃, L̃)` from `X = 0`.
///
/// Returns [`Error::Diverged`] when the iterates blow up or `max_iter` is hit,
/// which is the expected outcome for systems that are not mean-square
/// stabilizable.
pub fn solve_ngare<T: Real>(model: &MjlsModel<T>, sw: &ShiftedWeights<T>, opts: NgareOptions<T>) -> Result<NgareSolution<T>> {
    let n = model.n;
    let mut x: Vec<DMatrix<T>> = vec![DMatrix::zeros(n, n); model.modes()];
    let mut norms = Vec::new();
    let mut increments = Vec::new();
    let mut monotone = true;
    let mut iterates_psd = true;
    let mut worst_decrease = T::zero();
    let limit = T::lit(DIVERGENCE_LIMIT);

    for it in 1..=opts.max_iter {
        let step = gdre_step(&x, model, &sw.qt, &sw.rt, Some(&sw.lt))?;
        let next = step.p;
        let scale = T::one().max(tuple_max_abs(&x));
        let norm = tuple_max_abs(&next);
        norms.push(norm.as_f64());
        if !norm.is_finite() || norm > limit || next.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(diverged(it, norms));
        }

        let mut increment = T::zero();
        for (xn, xo) in next.iter().zip(&x) {
            let diff = xn - xo;
            increment = increment.max(max_abs(&diff));
            let slack = opts.tol * scale;
            let dmin = SymEig::new(&numlin::symmetrize(&diff))?.min();
            worst_decrease = worst_decrease.min(dmin);
            if dmin < -slack {
                monotone = false;
            }
            if SymEig::new(xn)?.min() < -numlin::default_psd_tol(max_abs(xn)) {
                iterates_psd = false;
            }
        }
        increments.push(increment);
        x = next;

        if increment <= opts.tol * scale {
            let fin = gdre_step(&x, model, &sw.qt, &sw.rt, Some(&sw.lt))?;
            return Ok(NgareSolution {
                regular: (0..model.modes()).map(|i| fin.regular(i)).collect(),
                x,
                upsilon: fin.upsilon,
                m: fin.m,
                gains: fin.f,
                iterations: it,
                monotone,
                iterates_psd,
                worst_decrease,
                increments,
            });
        }
    }
    Err(diverged(opts.max_iter, norms))
}

fn diverged(iterations: usize, norms: Vec<f64>) -> Error {
    let tail = norms[norms.len().saturating_sub(3)..].to_vec();
    Error::Diverged { iterations, norms, tail }
}

/// Maximal stationary solution with its stabilizing gains.
#[derive(Debug, Clone, PartialEq)]
pub struct StationarySolution<T: Real> {
    pub p: Vec<DMatrix<T>>,
    /// Shifted solution, `P = X + P̃`.
    pub x: Vec<DMatrix<T>>,
    pub ptilde: Vec<DMatrix<T>>,
    pub f: Vec<DMatrix<T>>,
    pub upsilon: Vec<DMatrix<T>>,
    pub m: Vec<DMatrix<T>>,
    /// Side conditions `Υ_i ⪰ 0`, `Υ_iΥ_i†M_i = M_i` at the solution.
    pub regular: Vec<bool>,
    pub x_positive_definite: Vec<bool>,
    pub iterations: usize,
    /// `max_i ‖P_i − (A_i'S_iA_i + σ²B_i'S_iB_i + Q_i − M_i'Υ_i†M_i)‖`.
    pub residual: T,
    /// Same defect divided by `max(1, ‖P_i‖)` per mode.
    pub relative_residual: T,
    pub monotone: bool,
}

impl<T: Real> StationarySolution<T> {
    /// Infinite-horizon optimal cost `Σ_i π_i(0) tr(P_i E[x0 x0'])`.
    pub fn optimal_cost(&self, init: &InitialState<T>, pi0: &[T]) -> Result<T> {
        if pi0.len() != self.p.len() {
            return Err(Error::dim("pi0", self.p.len(), pi0.len()));
        }
        init.validate(self.p[0].nrows())?;
        let x0 = init.second_moment();
        Ok(self.p.iter().zip(pi0).fold(T::zero(), |acc, (p, &w)| acc + (p * &x0).trace() * w))
    }
}

/// Solves the coupled algebraic Riccati equation through the shifted recursion
/// seeded by `ptilde` (which should be a feasibility-set member).
pub fn solve_gare<T: Real>(
    model: &MjlsModel<T>,
    weights: &CostWeights<T>,
    ptilde: &[DMatrix<T>],
    opts: NgareOptions<T>,
) -> Result<StationarySolution<T>> {
    model.ensure_valid(weights)?;
    let sw = shifted_weights(model, weights, ptilde)?;
    let ng = solve_ngare(model, &sw, opts)?;
    let p: Vec<DMatrix<T>> = ng.x.iter().zip(ptilde).map(|(x, pt)| numlin::symmetrize(&(x + pt))).collect();

    let step = gdre_step(&p, model, &weights.q, &weights.r, None)?;
    let mut residual = T::zero();
    let mut relative = T::zero();
    for (pi, rhs) in p.iter().zip(&step.p) {
        let defect = max_abs(&(pi - rhs));
        residual = residual.max(defect);
        relative = relative.max(defect / T::one().max(max_abs(pi)));
    }
    if relative > T::tol(GARE_RESIDUAL_TOL) {
        return Err(Error::Inconsistent { what: "GARE residual".into(), residual: relative.as_f64() });
    }

    let gain_tol = T::tol(GAIN_IDENTITY_TOL);
    for (f, ft) in step.f.iter().zip(&ng.gains) {
        let defect = max_abs(&(f - ft));
        if defect > gain_tol * T::one().max(max_abs(f)) {
            return Err(Error::Inconsistent {
                what: "stationary gain differs from shifted-problem gain".into(),
                residual: defect.as_f64(),
            });
        }
    }

    let x_positive_definite =
        ng.x.iter().map(|x| numlin::psd_check(x, None).map(|d| d == Definiteness::PositiveDefinite)).collect::<Result<Vec<_>>>()?;

    Ok(StationarySolution {
        regular: (0..model.modes()).map(|i| step.regular(i)).collect(),
        p,
        x: ng.x,
        ptilde: ptilde.to_vec(),
        f: step.f,
        upsilon: step.upsilon,
        m: step.m,
        x_positive_definite,
        iterations: ng.iterations,
        residual,
        relative_residual: relative,
        monotone: ng.monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{scalar_tuple, section4};
    use crate::model::NoiseKind;
    use nalgebra::DVector;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    /// Larger root of the mode-1 fixed point of the §4 instance once mode 2 is
    /// pinned at 20. With s = S₁/2 = 0.1 P₁ + 8, substituting Υ₁ = s − 3 and
    /// M₁ = s into P₁ = s − 1 − s²/(s − 3) gives 10 s² − 106 s + 237 = 0.
    fn mode1_oracle() -> (f64, f64) {
        let disc = 106.0f64 * 106.0 - 4.0 * 10.0 * 237.0;
        let s = (106.0 + disc.sqrt()) / 20.0;
        (10.0 * s - 80.0, -s / (s - 3.0))
    }

    #[test]
    fn step_section4_at_twenty() {
        let (model, w) = section4();
        let step = gdre_step(&scalar_tuple(&[20.0, 20.0]), &model, &w.q, &w.r, None).unwrap();
        assert!((step.s[0][(0, 0)] - 20.0).abs() < 1e-12);
        assert!((step.upsilon[0][(0, 0)] - 7.0).abs() < 1e-12);
        assert!((step.m[0][(0, 0)] - 10.0).abs() < 1e-12);
        assert!((step.f[0][(0, 0)] + 10.0 / 7.0).abs() < 1e-12);
        assert!((step.p[0][(0, 0)] + 37.0 / 7.0).abs() < 1e-12);
        assert!(step.all_regular());
    }

    #[test]
    fn step_section4_at_zero_is_irregular() {
        let (model, w) = section4();
        let step = gdre_step(&scalar_tuple(&[0.0, 0.0]), &model, &w.q, &w.r, None).unwrap();
        assert_eq!(step.upsilon[0][(0, 0)], -3.0);
        assert!(!step.regular(0));
        assert!(matches!(step.issues[0], Some(Irregularity::UpsilonIndefinite { .. })));
        // Mode 2: Υ = R₂ = 0, M = 0 is regular.
        assert!(step.regular(1));
    }

    #[test]
    fn uncontrolled_step_is_lyapunov() {
        let (mut model, w) = section4();
        model.c = scalar_tuple(&[0.0, 0.0]);
        model.d = scalar_tuple(&[0.0, 0.0]);
        let pn = scalar_tuple(&[3.0, 5.0]);
        let step = gdre_step(&pn, &model, &w.q, &w.r, None).unwrap();
        for i in 0..2 {
            assert_eq!(step.m[i][(0, 0)], 0.0);
            assert_eq!(step.f[i][(0, 0)], 0.0);
            let si = step.s[i][(0, 0)];
            let a = model.a[i][(0, 0)];
            let b = model.b[i][(0, 0)];
            let expect = a * si * a + b * si * b + w.q[i][(0, 0)];
            assert!((step.p[i][(0, 0)] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gdre_step_rejects_bad_dimensions() {
        let (model, w) = section4();
        let bad = vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)];
        assert!(matches!(gdre_step(&bad, &model, &w.q, &w.r, None), Err(Error::Dimension { .. })));
        assert!(gdre_step(&scalar_tuple(&[1.0]), &model, &w.q, &w.r, None).is_err());
    }

    #[test]
    fn finite_unsolvable_at_zero_terminal() {
        let (model, w) = section4();
        let sol = solve_finite(&model, &w.with_terminal(scalar_tuple(&[0.0, 0.0])), 0).unwrap();
        assert!(!sol.solvable);
        let fail = sol.failure.unwrap();
        assert_eq!((fail.k, fail.mode.get()), (0, 1));
        assert_eq!(fail.to_string(), "mode 1: Upsilon indefinite at k=0");
    }

    #[test]
    fn finite_solvable_and_monotone_toward_stationary() {
        let (model, w) = section4();
        let sol = solve_finite(&model, &w, 5).unwrap();
        assert!(sol.solvable);
        let (p1_star, _) = mode1_oracle();
        // P₂(k) = 20 at every step; P₁(k) decreases monotonically toward the
        // oracle root when moving backward from the terminal 20.
        let mut prev = 20.0;
        for k in (0..=5).rev() {
            let p = &sol.steps[k].p;
            assert!((p[1][(0, 0)] - 20.0).abs() < 1e-12);
            assert!(p[0][(0, 0)] <= prev + 1e-12);
            assert!(p[0][(0, 0)] >= p1_star - 1e-9);
            prev = p[0][(0, 0)];
        }
        // The last step is within the geometric convergence envelope.
        assert!((sol.steps[0].p[0][(0, 0)] - p1_star).abs() < 1e-3);
    }

    #[test]
    fn zero_problem_is_zero() {
        let (model, _) = section4();
        let zero = CostWeights { q: scalar_tuple(&[0.0, 0.0]), r: scalar_tuple(&[0.0, 0.0]), terminal_p: scalar_tuple(&[0.0, 0.0]) };
        let sol = solve_finite(&model, &zero, 4).unwrap();
        assert!(sol.solvable);
        for step in &sol.steps {
            for i in 0..2 {
                assert_eq!(step.p[i][(0, 0)], 0.0);
                assert_eq!(step.f[i][(0, 0)], 0.0);
            }
        }
        let res = costate_residual(&sol, &model).unwrap();
        assert!(res.iter().all(|r| r.worst() == 0.0));
        let cost = optimal_cost_finite(&sol, &InitialState::Deterministic(DVector::from_vec(vec![3.0])), &[0.5, 0.5]).unwrap();
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn optimal_cost_definition() {
        let (model, w) = section4();
        let sol = solve_finite(&model, &w, 3).unwrap();
        let p1 = sol.steps[0].p[0][(0, 0)];
        let x0 = InitialState::Deterministic(DVector::from_vec(vec![2.0]));
        let cost = optimal_cost_finite(&sol, &x0, &[1.0, 0.0]).unwrap();
        assert!((cost - 4.0 * p1).abs() < 1e-12);
        let zero = InitialState::Deterministic(DVector::from_vec(vec![0.0]));
        assert_eq!(optimal_cost_finite(&sol, &zero, &[0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn optimal_cost_rejects_unsolvable() {
        let (model, w) = section4();
        let sol = solve_finite(&model, &w.with_terminal(scalar_tuple(&[0.0, 0.0])), 0).unwrap();
        let x0 = InitialState::Deterministic(DVector::from_vec(vec![1.0]));
        assert!(matches!(optimal_cost_finite(&sol, &x0, &[0.5, 0.5]), Err(Error::Unsolvable { .. })));
    }

    #[test]
    fn costate_residual_small_and_detects_tampering() {
        let (model, w) = section4();
        let mut sol = solve_finite(&model, &w, 5).unwrap();
        let res = costate_residual(&sol, &model).unwrap();
        assert!(res.iter().all(|r| r.worst() <= 1e-9), "{res:?}");

        sol.steps[2].f[0][(0, 0)] += 0.1;
        let ups = sol.steps[2].upsilon[0][(0, 0)];
        let res = costate_residual(&sol, &model).unwrap();
        assert!(res[2].stationarity >= 0.09 * ups.abs());
        assert!(res[3].worst() <= 1e-9);
    }

    #[test]
    fn shifted_weights_match_closed_forms() {
        let (model, w) = section4();
        for &(p1, p2) in &[(-10.0, 19.0), (0.0, 10.0), (3.5, -2.0)] {
            let sw = shifted_weights(&model, &w, &scalar_tuple(&[p1, p2])).unwrap();
            let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
            assert!(close(sw.qt[0][(0, 0)], -0.9 * p1 + 0.4 * p2 - 1.0));
            assert!(close(sw.lt[0][(0, 0)], 0.1 * p1 + 0.4 * p2));
            assert!(close(sw.rt[0][(0, 0)], 0.1 * p1 + 0.4 * p2 - 3.0));
            assert!(close(sw.qt[1][(0, 0)], 0.05 * p1 - 0.925 * p2 + 20.0));
            assert!(close(sw.lt[1][(0, 0)], 0.05 * p1 + 0.075 * p2));
            assert!(close(sw.rt[1][(0, 0)], 0.05 * p1 + 0.075 * p2));
        }
        let sw = shifted_weights(&model, &w, &scalar_tuple(&[0.0, 0.0])).unwrap();
        assert_eq!(sw.qt, w.q);
        assert_eq!(sw.rt, w.r);
        assert!(sw.lt.iter().all(|l| l[(0, 0)] == 0.0));
    }

    #[test]
    fn ngare_section4_converges_positive() {
        let (model, w) = section4();
        let sw = shifted_weights(&model, &w, &scalar_tuple(&[-10.0, 19.0])).unwrap();
        let ng = solve_ngare(&model, &sw, NgareOptions::default()).unwrap();
        assert!(ng.monotone && ng.iterates_psd);
        assert!(ng.x.iter().all(|x| x[(0, 0)] > 0.0));
        assert!(ng.increments.windows(2).all(|w| w[1] <= w[0] * 1.0 + 1e-12));
    }

    #[test]
    fn ngare_zero_fixed_point() {
        let (mut model, _) = section4();
        model.c = scalar_tuple(&[0.0, 0.0]);
        model.d = scalar_tuple(&[0.0, 0.0]);
        let sw = ShiftedWeights {
            qt: scalar_tuple(&[0.0, 0.0]),
            lt: scalar_tuple(&[0.0, 0.0]),
            rt: scalar_tuple(&[1.0, 1.0]),
            ptilde: scalar_tuple(&[0.0, 0.0]),
        };
        let ng = solve_ngare(&model, &sw, NgareOptions::default()).unwrap();
        assert!(ng.x.iter().all(|x| x[(0, 0)] == 0.0));
    }

    fn unstable_scalar() -> (MjlsModel<f64>, CostWeights<f64>) {
        let model = MjlsModel {
            n: 1,
            m: 1,
            a: vec![s(2.0)],
            b: vec![s(0.0)],
            c: vec![s(0.0)],
            d: vec![s(0.0)],
            sigma2: 1.0,
            rho: s(1.0),
            pi0: DVector::from_vec(vec![1.0]),
            noise_kind: NoiseKind::Gaussian,
        };
        let w = CostWeights { q: vec![s(1.0)], r: vec![s(1.0)], terminal_p: vec![s(0.0)] };
        (model, w)
    }

    #[test]
    fn ngare_diverges_when_unstabilizable() {
        let (model, w) = unstable_scalar();
        let sw = shifted_weights(&model, &w, &[s(0.0)]).unwrap();
        assert_eq!(sw.qt[0][(0, 0)], 1.0);
        match solve_ngare(&model, &sw, NgareOptions::default()) {
            Err(Error::Diverged { norms, .. }) => {
                // X ← 4X + 1.
                assert_eq!(&norms[..3], &[1.0, 5.0, 21.0]);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        assert!(matches!(solve_gare(&model, &w, &[s(0.0)], NgareOptions::default()), Err(Error::Diverged { .. })));
    }

    #[test]
    fn gare_section4_matches_oracle() {
        let (model, w) = section4();
        let sol = solve_gare(&model, &w, &scalar_tuple(&[-10.0, 19.0]), NgareOptions::default()).unwrap();
        assert!((sol.p[1][(0, 0)] - 20.0).abs() < 1e-8);
        assert!((sol.f[1][(0, 0)] + 1.0).abs() < 1e-9);
        let (p1, f1) = mode1_oracle();
        assert!((sol.p[0][(0, 0)] - p1).abs() < 1e-8, "{} vs {}", sol.p[0][(0, 0)], p1);
        assert!((sol.f[0][(0, 0)] - f1).abs() < 1e-8);
        assert!(sol.relative_residual < 1e-10);
        assert!(sol.regular.iter().all(|&r| r));
        assert!(sol.x_positive_definite.iter().all(|&r| r));
        for i in 0..2 {
            let back = &sol.x[i] + &sol.ptilde[i];
            assert!(max_abs(&(&back - &sol.p[i])) < 1e-8);
        }
    }

    fn definite_two_mode() -> (MjlsModel<f64>, CostWeights<f64>) {
        let model = MjlsModel {
            n: 2,
            m: 1,
            a: vec![DMatrix::from_row_slice(2, 2, &[0.9, 0.3, -0.2, 0.7]), DMatrix::from_row_slice(2, 2, &[1.1, 0.0, 0.2, 0.5])],
            b: vec![DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.1]), DMatrix::from_row_slice(2, 2, &[0.0, 0.1, 0.05, 0.0])],
            c: vec![DMatrix::from_row_slice(2, 1, &[1.0, 0.5]), DMatrix::from_row_slice(2, 1, &[0.3, 1.0])],
            d: vec![DMatrix::from_row_slice(2, 1, &[0.1, 0.0]), DMatrix::from_row_slice(2, 1, &[0.0, 0.2])],
            sigma2: 0.5,
            rho: DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.4, 0.6]),
            pi0: DVector::from_vec(vec![0.5, 0.5]),
            noise_kind: NoiseKind::Gaussian,
        };
        let w = CostWeights {
            q: vec![DMatrix::identity(2, 2), DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])],
            r: vec![s(1.0), s(0.5)],
            terminal_p: vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)],
        };
        (model, w)
    }

    #[test]
    fn definite_case_matches_long_finite_horizon() {
        let (model, w) = definite_two_mode();
        let zero = vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)];
        let gare = solve_gare(&model, &w, &zero, NgareOptions::default()).unwrap();
        let fin = solve_finite(&model, &w, 500).unwrap();
        assert!(fin.solvable);
        for i in 0..2 {
            assert!(max_abs(&(&gare.p[i] - &fin.steps[0].p[i])) < 1e-7);
        }
    }

    #[test]
    fn finite_recursion_is_time_invariant() {
        let (model, w) = definite_two_mode();
        let long = solve_finite(&model, &w, 12).unwrap();
        for k in 0..=12 {
            let short = solve_finite(&model, &w, 12 - k).unwrap();
            for i in 0..2 {
                assert!(max_abs(&(&long.steps[k].p[i] - &short.steps[0].p[i])) <= 1e-12);
            }
        }
    }

    #[test]
    fn f32_gare_section4() {
        let (model, w) = crate::fixtures::section4_generic::<f32>();
        let sol = solve_gare(&model, &w, &scalar_tuple::<f32>(&[-10.0, 19.0]), NgareOptions::default()).unwrap();
        let (p1, _) = mode1_oracle();
        assert!((sol.p[1][(0, 0)] - 20.0).abs() < 1e-3);
        assert!((sol.p[0][(0, 0)] as f64 - p1).abs() < 1e-3);
    }
}
