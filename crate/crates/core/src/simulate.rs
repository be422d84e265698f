//! Seeded Monte Carlo simulation of the controlled system, and an exact
//! moment-propagation oracle for tiny finite-horizon problems.
//!
//! Every path owns a ChaCha8 stream keyed by [`substream_key`]`(seed, path)`,
//! so reports do not depend on the number of worker threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CostWeights, InitialState, MjlsModel, ModeIndex, NoiseKind};
use crate::numlin;
use crate::riccati::FiniteSolution;
use crate::scalar::Real;

/// Paths per reduction chunk. Fixed so that the floating point reduction order
/// is independent of scheduling.
const CHUNK: usize = 512;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 256-bit ChaCha8 key of path `path` under master seed `seed`: starting from
/// state `seed ^ (path · 0x9E3779B97F4A7C15)`, four successive splitmix64
/// outputs, each written little-endian.
pub fn substream_key(seed: u64, path: u64) -> [u8; 32] {
    let mut state = seed ^ path.wrapping_mul(GOLDEN);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(substream_key(seed, path as u64))
}

/// How `θ(0)` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialMode {
    Fixed(ModeIndex),
    /// Drawn from the model's `pi0`.
    Sampled,
}

/// Per-path randomness shared by every simulation entry point.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampling<T: Real> {
    pub paths: usize,
    pub seed: u64,
    /// A deterministic `x0`, or a second moment `X0` from which
    /// `x0 = X0^{1/2} ξ` is drawn with `ξ` standard normal.
    pub x0: InitialState<T>,
    pub theta0: InitialMode,
}

/// Feedback gains `u(k) = K_{θ(k)}(k) x(k)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Gains<T: Real> {
    Stationary(Vec<DMatrix<T>>),
    /// Indexed `[k][mode]`, e.g. [`FiniteSolution::gains`].
    TimeVarying(Vec<Vec<DMatrix<T>>>),
}

impl<T: Real> Gains<T> {
    fn at(&self, k: usize, mode: usize) -> &DMatrix<T> {
        match self {
            Gains::Stationary(g) => &g[mode],
            Gains::TimeVarying(g) => &g[k][mode],
        }
    }

    fn validate(&self, model: &MjlsModel<T>, horizon: usize) -> Result<()> {
        match self {
            Gains::Stationary(g) => model.check_tuple("gains", g, model.m, model.n),
            Gains::TimeVarying(g) => {
                if g.len() < horizon {
                    return Err(Error::dim("time-varying gains", format!("at least {horizon} steps"), g.len()));
                }
                g.iter().try_for_each(|gk| model.check_tuple("gains", gk, model.m, model.n))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig<T: Real> {
    pub sampling: Sampling<T>,
    /// Number of transitions; the trajectory is `x(0), …, x(horizon)`.
    pub horizon: usize,
    pub gains: Gains<T>,
    /// Add `x(horizon)' P_{θ(horizon)} x(horizon)` from `weights.terminal_p`.
    pub terminal_cost: bool,
}

/// Sample mean with its standard error `s / √n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate<T: Real> {
    pub mean: T,
    pub stderr: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseStats<T: Real> {
    pub draws: usize,
    pub mean: T,
    /// Sample variance (denominator `draws − 1`).
    pub variance: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport<T: Real> {
    /// Estimates of `E[x(k)'x(k)]`, `k = 0..=horizon`.
    pub second_moment: Vec<T>,
    pub second_moment_stderr: Vec<T>,
    /// Fraction of paths in each mode, indexed `[k][mode]`.
    pub mode_occupancy: Vec<Vec<T>>,
    /// Realized `Σ_{k<horizon} x'Q_θ x + u'R_θ u` (plus terminal term if enabled).
    pub empirical_cost: Estimate<T>,
    pub paths_used: usize,
    pub noise: NoiseStats<T>,
}

/// Welford accumulator, merged with Chan's formula.
#[derive(Debug, Clone, Copy)]
struct Moments<T: Real> {
    n: usize,
    mean: T,
    m2: T,
}

impl<T: Real> Moments<T> {
    fn new() -> Self {
        Moments { n: 0, mean: T::zero(), m2: T::zero() }
    }

    fn push(&mut self, v: T) {
        self.n += 1;
        let delta = v - self.mean;
        self.mean += delta / T::lit(self.n as f64);
        self.m2 += delta * (v - self.mean);
    }

    fn merge(&mut self, other: &Self) {
        if other.n == 0 {
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let (na, nb, nn) = (T::lit(self.n as f64), T::lit(other.n as f64), T::lit(n as f64));
        self.mean += delta * nb / nn;
        self.m2 += other.m2 + delta * delta * na * nb / nn;
        self.n = n;
    }

    fn variance(&self) -> T {
        if self.n < 2 {
            T::zero()
        } else {
            self.m2 / T::lit((self.n - 1) as f64)
        }
    }

    fn estimate(&self) -> Estimate<T> {
        let stderr = if self.n == 0 { T::zero() } else { (self.variance() / T::lit(self.n as f64)).sqrt() };
        Estimate { mean: self.mean, stderr }
    }
}

/// Draws from row `probs` with one uniform variate.
fn categorical<T: Real>(rng: &mut ChaCha8Rng, probs: impl Iterator<Item = T>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, p) in probs.enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last = j;
        }
        acc += p;
        if u < acc {
            return j;
        }
    }
    last
}

/// One realization of the controlled chain. The draw order per path is fixed:
/// `θ(0)` (if sampled), `ξ` for `x0` (if random), then per step `ω(k)`
/// followed by `θ(k+1)`.
struct PathSampler<'a, T: Real> {
    model: &'a MjlsModel<T>,
    rng: ChaCha8Rng,
    sigma: T,
    mode: usize,
    x: DVector<T>,
}

impl<'a, T: Real> PathSampler<'a, T> {
    fn new(model: &'a MjlsModel<T>, sampling: &Sampling<T>, x0_root: Option<&DMatrix<T>>, path: usize) -> Self {
        let mut rng = path_rng(sampling.seed, path);
        let mode = match sampling.theta0 {
            InitialMode::Fixed(i) => i.zero_based(),
            InitialMode::Sampled => categorical(&mut rng, model.pi0.iter().copied()),
        };
        let x = match (&sampling.x0, x0_root) {
            (InitialState::Deterministic(x), _) => x.clone(),
            (InitialState::SecondMoment(_), Some(root)) => {
                let xi = DVector::from_fn(model.n, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
                root * xi
            }
            (InitialState::SecondMoment(_), None) => unreachable!("second-moment root computed upfront"),
        };
        PathSampler { model, rng, sigma: model.sigma2.sqrt(), mode, x }
    }

    fn noise(&mut self) -> T {
        match self.model.noise_kind {
            NoiseKind::Gaussian => self.sigma * T::lit(self.rng.sample::<f64, _>(StandardNormal)),
            NoiseKind::Rademacher => {
                if self.rng.random::<bool>() {
                    self.sigma
                } else {
                    -self.sigma
                }
            }
        }
    }

    /// Applies `u` and advances one step; returns `ω(k)`.
    fn advance(&mut self, u: &DVector<T>) -> T {
        let i = self.mode;
        let w = self.noise();
        let m = self.model;
        let next = (&m.a[i] + &m.b[i] * w) * &self.x + (&m.c[i] + &m.d[i] * w) * u;
        self.mode = categorical(&mut self.rng, m.rho.row(i).iter().copied());
        self.x = next;
        w
    }
}

fn quad<T: Real>(x: &DVector<T>, s: &DMatrix<T>) -> T {
    (x.transpose() * s * x)[(0, 0)]
}

fn check_sampling<T: Real>(model: &MjlsModel<T>, sampling: &Sampling<T>) -> Result<Option<DMatrix<T>>> {
    if sampling.paths == 0 {
        return Err(Error::InvalidConfig("paths must be at least 1".into()));
    }
    if let InitialMode::Fixed(i) = sampling.theta0 {
        if i.zero_based() >= model.modes() {
            return Err(Error::InvalidConfig(format!("theta0 = {i} exceeds the number of modes {}", model.modes())));
        }
    }
    sampling.x0.validate(model.n)?;
    match &sampling.x0 {
        InitialState::Deterministic(_) => Ok(None),
        InitialState::SecondMoment(m) => numlin::sqrt_psd(m, None).map(Some),
    }
}

/// Per-chunk partial sums of [`simulate`].
struct ChunkStats<T: Real> {
    second: Vec<Moments<T>>,
    occupancy: Vec<Vec<usize>>,
    cost: Moments<T>,
    noise: Moments<T>,
}

/// Simulates `x(k+1) = (A_θ + ω B_θ) x + (C_θ + ω D_θ) u` with `u = K_θ x`.
pub fn simulate<T: Real>(model: &MjlsModel<T>, weights: &CostWeights<T>, cfg: &SimConfig<T>) -> Result<SimulationReport<T>> {
    model.ensure_valid(weights)?;
    if cfg.horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    let root = check_sampling(model, &cfg.sampling)?;
    cfg.gains.validate(model, cfg.horizon)?;
    let (modes, horizon) = (model.modes(), cfg.horizon);

    let run_chunk = |chunk: usize| -> ChunkStats<T> {
        let mut st = ChunkStats {
            second: vec![Moments::new(); horizon + 1],
            occupancy: vec![vec![0; modes]; horizon + 1],
            cost: Moments::new(),
            noise: Moments::new(),
        };
        let end = ((chunk + 1) * CHUNK).min(cfg.sampling.paths);
        for path in chunk * CHUNK..end {
            let mut ps = PathSampler::new(model, &cfg.sampling, root.as_ref(), path);
            let mut cost = T::zero();
            for k in 0..horizon {
                let i = ps.mode;
                st.second[k].push(ps.x.norm_squared());
                st.occupancy[k][i] += 1;
                let u = cfg.gains.at(k, i) * &ps.x;
                cost += quad(&ps.x, &weights.q[i]) + quad(&u, &weights.r[i]);
                let w = ps.advance(&u);
                st.noise.push(w);
            }
            st.second[horizon].push(ps.x.norm_squared());
            st.occupancy[horizon][ps.mode] += 1;
            if cfg.terminal_cost {
                cost += quad(&ps.x, &weights.terminal_p[ps.mode]);
            }
            st.cost.push(cost);
        }
        st
    };

    let chunks = cfg.sampling.paths.div_ceil(CHUNK);
    let parts: Vec<ChunkStats<T>> = (0..chunks).into_par_iter().map(run_chunk).collect();

    let mut second = vec![Moments::new(); horizon + 1];
    let mut occupancy = vec![vec![0usize; modes]; horizon + 1];
    let mut cost = Moments::new();
    let mut noise = Moments::new();
    for part in &parts {
        for (acc, p) in second.iter_mut().zip(&part.second) {
            acc.merge(p);
        }
        for (acc, p) in occupancy.iter_mut().zip(&part.occupancy) {
            for (a, b) in acc.iter_mut().zip(p) {
                *a += b;
            }
        }
        cost.merge(&part.cost);
        noise.merge(&part.noise);
    }

    let paths = T::lit(cfg.sampling.paths as f64);
    let estimates: Vec<Estimate<T>> = second.iter().map(Moments::estimate).collect();
    Ok(SimulationReport {
        second_moment: estimates.iter().map(|e| e.mean).collect(),
        second_moment_stderr: estimates.iter().map(|e| e.stderr).collect(),
        mode_occupancy: occupancy.iter().map(|row| row.iter().map(|&c| T::lit(c as f64) / paths).collect()).collect(),
        empirical_cost: cost.estimate(),
        paths_used: cfg.sampling.paths,
        noise: NoiseStats { draws: noise.n, mean: noise.mean, variance: noise.variance() },
    })
}

/// Both sides of the completion-of-squares identity
/// `J_N = E[x0' P_{θ(0)}(0) x0] + Σ_k E[(u − F x)' Υ (u − F x)]`,
/// estimated on common sample paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityReport<T: Real> {
    /// Realized cost `J_N` under the tested gains.
    pub lhs: Estimate<T>,
    pub rhs: Estimate<T>,
    /// Penalty part of the right-hand side.
    pub penalty: Estimate<T>,
    /// Pathwise `lhs − rhs`.
    pub difference: Estimate<T>,
    /// `difference.mean / difference.stderr` (0 when both vanish).
    pub z: T,
    /// Exact optimal cost `E[x0' P_{θ(0)}(0) x0]` from the recursion.
    pub optimal_cost: T,
    /// `(lhs.mean − optimal_cost) / lhs.stderr`.
    pub excess_z: T,
}

fn z_score<T: Real>(num: T, se: T) -> T {
    if se > T::zero() {
        num / se
    } else if num == T::zero() {
        T::zero()
    } else {
        num.signum() * T::max_value().unwrap_or_else(T::one)
    }
}

/// Simulates `gains` over the horizon of `sol` and estimates both sides of the
/// completion-of-squares identity on the same paths.
pub fn empirical_cost_identity<T: Real>(
    model: &MjlsModel<T>,
    sol: &FiniteSolution<T>,
    gains: &Gains<T>,
    sampling: &Sampling<T>,
) -> Result<IdentityReport<T>> {
    if let Some(fail) = &sol.failure {
        return Err(Error::Unsolvable { k: fail.k, mode: fail.mode.get(), reason: fail.reason.to_string() });
    }
    let weights = &sol.weights;
    model.ensure_valid(weights)?;
    let root = check_sampling(model, sampling)?;
    let steps = sol.horizon + 1;
    gains.validate(model, steps)?;

    let run_chunk = |chunk: usize| -> [Moments<T>; 4] {
        let mut acc = [Moments::new(); 4];
        let end = ((chunk + 1) * CHUNK).min(sampling.paths);
        for path in chunk * CHUNK..end {
            let mut ps = PathSampler::new(model, sampling, root.as_ref(), path);
            let start = quad(&ps.x, &sol.steps[0].p[ps.mode]);
            let (mut cost, mut penalty) = (T::zero(), T::zero());
            for k in 0..steps {
                let i = ps.mode;
                let step = &sol.steps[k];
                let u = gains.at(k, i) * &ps.x;
                cost += quad(&ps.x, &weights.q[i]) + quad(&u, &weights.r[i]);
                let dev = &u - &step.f[i] * &ps.x;
                penalty += quad(&dev, &step.upsilon[i]);
                ps.advance(&u);
            }
            cost += quad(&ps.x, &sol.terminal[ps.mode]);
            let rhs = start + penalty;
            acc[0].push(cost);
            acc[1].push(rhs);
            acc[2].push(penalty);
            acc[3].push(cost - rhs);
        }
        acc
    };

    let chunks = sampling.paths.div_ceil(CHUNK);
    let parts: Vec<[Moments<T>; 4]> = (0..chunks).into_par_iter().map(run_chunk).collect();
    let mut total = [Moments::new(); 4];
    for part in &parts {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    let [lhs, rhs, penalty, difference] = total.map(|m| m.estimate());

    let x0 = sampling.x0.second_moment();
    let optimal_cost = match sampling.theta0 {
        InitialMode::Fixed(i) => (&sol.steps[0].p[i.zero_based()] * &x0).trace(),
        InitialMode::Sampled => sol.steps[0].p.iter().zip(model.pi0.iter()).fold(T::zero(), |acc, (p, &w)| acc + (p * &x0).trace() * w),
    };
    Ok(IdentityReport {
        lhs,
        rhs,
        penalty,
        difference,
        z: z_score(difference.mean, difference.stderr),
        optimal_cost,
        excess_z: z_score(lhs.mean - optimal_cost, lhs.stderr),
    })
}

/// Result of [`brute_force_finite`].
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForce {
    pub value: f64,
    /// Minimizing scalar gains `f_i(k)`, indexed `[k][mode]`; `None` where the
    /// cost does not depend on the gain (e.g. mode unreachable at time `k`).
    pub gains: Vec<Vec<Option<f64>>>,
    /// The cost does not depend on any gain.
    pub flat: bool,
    pub sweeps: usize,
}

const BRUTE_SPAN: f64 = 10.0;
const BRUTE_COARSE: f64 = 0.01;
const BRUTE_RESOLUTION: f64 = 1e-6;
const BRUTE_MAX_SWEEPS: usize = 50;

/// Exact `J_N` of scalar feedback gains by propagating the mode-conditioned
/// second moments `z_i(k) = E[x(k)² 1{θ(k)=i}]`.
struct MomentCost<'a> {
    model: &'a MjlsModel<f64>,
    weights: &'a CostWeights<f64>,
    z0: Vec<f64>,
}

impl MomentCost<'_> {
    fn eval(&self, f: &[Vec<f64>]) -> f64 {
        let m = self.model;
        let s = |v: &DMatrix<f64>| v[(0, 0)];
        let mut z = self.z0.clone();
        let mut total = 0.0;
        for fk in f {
            let mut next = vec![0.0; z.len()];
            for (i, (&zi, &fi)) in z.iter().zip(fk).enumerate() {
                if zi == 0.0 {
                    continue;
                }
                total += zi * (s(&self.weights.q[i]) + s(&self.weights.r[i]) * fi * fi);
                let a = s(&m.a[i]) + s(&m.c[i]) * fi;
                let b = s(&m.b[i]) + s(&m.d[i]) * fi;
                let gain = zi * (a * a + m.sigma2 * b * b);
                for (j, nj) in next.iter_mut().enumerate() {
                    *nj += m.rho[(i, j)] * gain;
                }
            }
            z = next;
        }
        total + z.iter().zip(&self.weights.terminal_p).map(|(zj, p)| zj * p[(0, 0)]).sum::<f64>()
    }
}

/// Brute-force minimizer of `J_N` over mode- and time-dependent scalar linear
/// feedback, for `n = m = 1`, at most three modes and `N ≤ 2`.
///
/// Coordinate descent, sweeping `k = N, …, 0`: each coordinate is scanned on a
/// grid over `[-10, 10]` with step `0.01`, then the bracket around the best
/// point is refined by factors of ten down to `1e-6`.
pub fn brute_force_finite(
    model: &MjlsModel<f64>,
    weights: &CostWeights<f64>,
    horizon: usize,
    x0: f64,
    theta0: InitialMode,
) -> Result<BruteForce> {
    model.ensure_valid(weights)?;
    if model.n != 1 || model.m != 1 {
        return Err(Error::Unsupported(format!("brute force needs n = m = 1, found n = {}, m = {}", model.n, model.m)));
    }
    if model.modes() > 3 || horizon > 2 {
        return Err(Error::Unsupported(format!(
            "brute force supports at most 3 modes and N <= 2, found {} modes, N = {horizon}",
            model.modes()
        )));
    }
    let modes = model.modes();
    let z0: Vec<f64> = match theta0 {
        InitialMode::Fixed(i) => {
            if i.zero_based() >= modes {
                return Err(Error::InvalidConfig(format!("theta0 = {i} exceeds the number of modes {modes}")));
            }
            (0..modes).map(|j| if j == i.zero_based() { x0 * x0 } else { 0.0 }).collect()
        }
        InitialMode::Sampled => model.pi0.iter().map(|p| p * x0 * x0).collect(),
    };
    let cost = MomentCost { model, weights, z0 };

    let mut f = vec![vec![0.0; modes]; horizon + 1];
    let mut best = cost.eval(&f);
    let mut flat = vec![vec![false; modes]; horizon + 1];
    let mut sweeps = 0;
    while sweeps < BRUTE_MAX_SWEEPS {
        sweeps += 1;
        let before = best;
        for k in (0..=horizon).rev() {
            for i in 0..modes {
                let (value, arg, is_flat) = minimize_coordinate(&cost, &mut f, k, i);
                flat[k][i] = is_flat;
                if value < best {
                    best = value;
                    f[k][i] = arg;
                }
            }
        }
        if before - best <= 1e-15 * best.abs().max(1.0) && sweeps > 1 {
            break;
        }
    }

    let gains = f.iter().zip(&flat).map(|(fk, flk)| fk.iter().zip(flk).map(|(&g, &fl)| (!fl).then_some(g)).collect()).collect();
    Ok(BruteForce { value: best, gains, flat: flat.iter().flatten().all(|&b| b), sweeps })
}

/// Minimizes over `f[k][i]` alone, leaving `f` unchanged. Returns the best
/// value, its argument and whether the cost is constant in this coordinate.
fn minimize_coordinate(cost: &MomentCost<'_>, f: &mut [Vec<f64>], k: usize, i: usize) -> (f64, f64, bool) {
    let original = f[k][i];
    let eval = |v: f64, f: &mut [Vec<f64>]| {
        f[k][i] = v;
        cost.eval(f)
    };
    let steps = (2.0 * BRUTE_SPAN / BRUTE_COARSE).round() as i64;
    let (mut best_v, mut best_x) = (f64::INFINITY, original);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in 0..=steps {
        let x = -BRUTE_SPAN + s as f64 * BRUTE_COARSE;
        let v = eval(x, f);
        lo = lo.min(v);
        hi = hi.max(v);
        if v < best_v {
            best_v = v;
            best_x = x;
        }
    }
    let is_flat = hi - lo <= 1e-12 * lo.abs().max(1.0);

    let mut h = BRUTE_COARSE;
    while h > BRUTE_RESOLUTION * 1.5 {
        let center = best_x;
        let fine = h / 10.0;
        for s in -10..=10 {
            let x = center + s as f64 * fine;
            let v = eval(x, f);
            if v < best_v {
                best_v = v;
                best_x = x;
            }
        }
        h = fine;
    }
    f[k][i] = original;
    (best_v, best_x, is_flat)
}
