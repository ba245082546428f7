//! Executable Lyapunov certificate for monotone frequency controllers.
//!
//! With `w = ω - ω*` and `Δp = p_e(δ) - p_e(δ*)` the candidate is
//!
//! ```text
//! V = ½ Σ M_i w_i² + W_p(δ) + ε Δpᵀ M w
//! W_p = -½ Σ_ij B_ij (cos δ_ij - cos δ*_ij) - Σ_ij B_ij sin(δ*_ij) (δ_i - δ*_i)
//! ```
//!
//! and along the swing dynamics
//!
//! ```text
//! V̇ = -[Δp; w]ᵀ Q(δ) [Δp; w] - (w + ε Δp)ᵀ (u(ω) - u(ω*))
//! Q = [[ε I, ε/2 D], [ε/2 D, D - ε/2 (H M + M H)]]
//! ```
//!
//! The analytic constants of the stability proof are replaced by sampling:
//! ε is bisected against sampled angle configurations, and the bounds on
//! `V` and `V̇` are reported as empirical ratios.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{AnyController, Controller};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, symmetric_eigenvalues};
use crate::power_net::{coi_transform, Equilibrium, NetworkCase};
use crate::rng::{substream, Stream};
use crate::sim::{self, Integrator, RolloutOptions};

pub use crate::power_net::electrical_power;

/// `H(δ) = ∇p_e(δ)`.
pub fn hessian_h(case: &NetworkCase, delta: &[f64]) -> DMatrix<f64> {
    crate::power_net::flow_jacobian(case, delta)
}

/// Equilibrium plus the mixing weight ε of the cross term.
#[derive(Debug, Clone)]
pub struct LyapunovContext<'a> {
    pub case: &'a NetworkCase,
    pub eq: Equilibrium,
    pub epsilon: f64,
    /// Controller output at the equilibrium frequency, per bus.
    pub u_star: Vec<f64>,
    pe_star: Vec<f64>,
}

/// The three terms of `V`, before weighting the cross term by ε.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VParts {
    pub kinetic: f64,
    pub potential: f64,
    pub cross: f64,
}

impl<'a> LyapunovContext<'a> {
    pub fn new<C: Controller + ?Sized>(case: &'a NetworkCase, eq: Equilibrium, epsilon: f64, u: &C) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
        }
        let u_star = (0..case.n).map(|i| u.action(i, eq.omega_star)).collect();
        let pe_star = electrical_power(case, &eq.delta_star);
        Ok(Self { case, eq, epsilon, u_star, pe_star })
    }

    pub fn parts(&self, delta: &[f64], omega: &[f64]) -> VParts {
        let case = self.case;
        let ds = &self.eq.delta_star;
        let ws = self.eq.omega_star;
        let kinetic = 0.5 * (0..case.n).map(|i| case.inertia[i] * (omega[i] - ws).powi(2)).sum::<f64>();
        // Edges appear twice in the double sums; cos is even, sin odd.
        let mut potential = 0.0;
        for e in case.edges() {
            potential -= e.b * ((delta[e.i] - delta[e.j]).cos() - (ds[e.i] - ds[e.j]).cos());
        }
        potential -= (0..case.n).map(|i| self.pe_star[i] * (delta[i] - ds[i])).sum::<f64>();
        let pe = electrical_power(case, delta);
        let cross = (0..case.n)
            .map(|i| (pe[i] - self.pe_star[i]) * case.inertia[i] * (omega[i] - ws))
            .sum();
        VParts { kinetic, potential, cross }
    }

    pub fn v(&self, delta: &[f64], omega: &[f64]) -> f64 {
        let p = self.parts(delta, omega);
        p.kinetic + p.potential + self.epsilon * p.cross
    }

    /// `V̇` from the quadratic form and the controller cross term; `u_values`
    /// are the controller outputs at `omega`.
    pub fn vdot(&self, delta: &[f64], omega: &[f64], u_values: &[f64]) -> f64 {
        let n = self.case.n;
        let eps = self.epsilon;
        let pe = electrical_power(self.case, delta);
        let mut x = Vec::with_capacity(2 * n);
        x.extend((0..n).map(|i| pe[i] - self.pe_star[i]));
        x.extend((0..n).map(|i| omega[i] - self.eq.omega_star));
        let q = q_matrix(self.case, delta, eps);
        let mut quad = 0.0;
        for r in 0..2 * n {
            for c in 0..2 * n {
                quad += x[r] * q[(r, c)] * x[c];
            }
        }
        let cross: f64 = (0..n).map(|i| (x[n + i] + eps * x[i]) * (u_values[i] - self.u_star[i])).sum();
        -quad - cross
    }
}

/// Free-function form of [`LyapunovContext::v`].
pub fn lyapunov_v(ctx: &LyapunovContext<'_>, delta: &[f64], omega: &[f64]) -> f64 {
    ctx.v(delta, omega)
}

/// Free-function form of [`LyapunovContext::vdot`].
pub fn vdot_analytic(ctx: &LyapunovContext<'_>, delta: &[f64], omega: &[f64], u_values: &[f64]) -> f64 {
    ctx.vdot(delta, omega, u_values)
}

/// The `2n x 2n` matrix `Q(δ)`.
pub fn q_matrix(case: &NetworkCase, delta: &[f64], epsilon: f64) -> DMatrix<f64> {
    q_matrix_with_gain(case, delta, epsilon, &vec![0.0; case.n])
}

/// `Q(δ)` with `D` replaced by `D + K` for a diagonal incremental controller
/// gain `K`; `V̇ = -xᵀ Q_K x` exactly when `u(ω) - u(ω*) = K (ω - ω*)`.
pub fn q_matrix_with_gain(case: &NetworkCase, delta: &[f64], epsilon: f64, gain: &[f64]) -> DMatrix<f64> {
    let n = case.n;
    let h = hessian_h(case, delta);
    let mut q = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        let d = case.damping[i] + gain[i];
        q[(i, i)] = epsilon;
        q[(i, n + i)] = 0.5 * epsilon * d;
        q[(n + i, i)] = 0.5 * epsilon * d;
        q[(n + i, n + i)] += d;
        for j in 0..n {
            q[(n + i, n + j)] -= 0.5 * epsilon * (h[(i, j)] * case.inertia[j] + case.inertia[i] * h[(i, j)]);
        }
    }
    q
}

/// `λ_min(Q(δ))` via cyclic Jacobi.
pub fn q_min_eigenvalue(case: &NetworkCase, delta: &[f64], epsilon: f64) -> f64 {
    min_eigenvalue(&q_matrix(case, delta, epsilon))
}

/// Smallest eigenvalue of the Schur complement of `ε I` in `Q_K`, minimized
/// over every diagonal gain with `0 <= K_i <= gain_bound[i]`.
///
/// `λ_min` is non-decreasing in each diagonal entry and
/// `k ↦ D + k - ε/4 (D + k)²` is concave, so the minimum over the box sits at
/// per-bus endpoints and one eigenvalue problem suffices.
pub fn worst_case_schur_min(case: &NetworkCase, delta: &[f64], epsilon: f64, gain_bound: &[f64]) -> f64 {
    let n = case.n;
    let h = hessian_h(case, delta);
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        let g = |k: f64| {
            let d = case.damping[i] + k;
            d - 0.25 * epsilon * d * d
        };
        s[(i, i)] = g(0.0).min(g(gain_bound[i]));
        for j in 0..n {
            s[(i, j)] -= 0.5 * epsilon * (h[(i, j)] * case.inertia[j] + case.inertia[i] * h[(i, j)]);
        }
    }
    min_eigenvalue(&s)
}

/// Second-smallest eigenvalue of `H(δ)` (algebraic connectivity of the
/// cosine-weighted network).
pub fn lambda2_h(case: &NetworkCase, delta: &[f64]) -> f64 {
    let e = symmetric_eigenvalues(&hessian_h(case, delta));
    e.get(1).copied().unwrap_or(0.0)
}

const THETA_MARGIN: f64 = 0.01;

/// Latin-hypercube samples of angle configurations with every edge difference
/// inside `(-π/2, π/2)`, returned in COI coordinates.
///
/// Spanning-tree differences are stratified in `[-π/2 + 0.01, π/2 - 0.01]`
/// and integrated along the tree; samples whose non-tree edges leave the band
/// are shrunk toward zero until they fit.
pub fn sample_theta<R: Rng + ?Sized>(case: &NetworkCase, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let tree = case.spanning_tree();
    let half = FRAC_PI_2 - THETA_MARGIN;
    let dims = tree.len();
    // Stratified columns, independently permuted.
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(dims);
    for _ in 0..dims {
        let mut col: Vec<f64> = (0..count)
            .map(|s| {
                let t = (s as f64 + rng.random::<f64>()) / count as f64;
                -half + 2.0 * half * t
            })
            .collect();
        col.shuffle(rng);
        columns.push(col);
    }
    (0..count)
        .map(|s| {
            let mut scale = 1.0;
            loop {
                let mut theta = vec![0.0; case.n];
                for (d, &(parent, child)) in tree.iter().enumerate() {
                    theta[child] = theta[parent] + scale * columns[d][s];
                }
                let inside = case
                    .edges()
                    .iter()
                    .all(|e| (theta[e.i] - theta[e.j]).abs() <= half);
                if inside {
                    return coi_transform(&theta);
                }
                scale *= 0.9;
            }
        })
        .collect()
}

/// Outcome of an ε bisection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSearch {
    pub epsilon_star: f64,
    /// Worst sampled margin at `epsilon_star`.
    pub margin: f64,
}

const EPS_LO: f64 = 1e-8;
const EPS_HI: f64 = 1.0;
const EPS_HI_CAP: f64 = 1e6;
const EPS_TOL: f64 = 1e-10;

/// Largest ε in `[1e-8, ∞)` for which `margin(ε) > 0`, assuming the margin
/// is non-increasing in ε. The upper end starts at 1 and doubles while it
/// still validates.
pub fn bisect_epsilon(margin: impl Fn(f64) -> f64) -> Result<EpsilonSearch> {
    let at_lo = margin(EPS_LO);
    if !(at_lo > 0.0) {
        return Err(Error::NoValidEpsilon { worst_lambda: at_lo });
    }
    let mut lo = EPS_LO;
    let mut hi = EPS_HI;
    while margin(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > EPS_HI_CAP {
            return Ok(EpsilonSearch { epsilon_star: lo, margin: margin(lo) });
        }
    }
    while hi - lo > EPS_TOL * lo.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if margin(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(EpsilonSearch { epsilon_star: lo, margin: margin(lo) })
}

/// Largest ε with `λ_min(Q(δ)) > 0` at `samples` Latin-hypercube angle
/// configurations (always including δ*). Deterministic in `seed`.
pub fn epsilon_search(case: &NetworkCase, eq: &Equilibrium, samples: usize, seed: u64) -> Result<EpsilonSearch> {
    let mut rng = substream(seed, Stream::Certify, 0);
    let mut deltas = sample_theta(case, samples, &mut rng);
    deltas.push(eq.delta_star.clone());
    bisect_epsilon(|eps| {
        deltas
            .iter()
            .map(|d| q_min_eigenvalue(case, d, eps))
            .fold(f64::INFINITY, f64::min)
    })
}

/// `min_w V(δ, ω)` over all frequencies: `W_p(δ) - ½ ε² Δpᵀ M Δp`.
fn v_floor(case: &NetworkCase, eq: &Equilibrium, delta: &[f64], epsilon: f64) -> f64 {
    let ctx = LyapunovContext {
        case,
        eq: eq.clone(),
        epsilon,
        u_star: vec![0.0; case.n],
        pe_star: electrical_power(case, &eq.delta_star),
    };
    let parts = ctx.parts(delta, &vec![eq.omega_star; case.n]);
    let pe = electrical_power(case, delta);
    let quad: f64 = (0..case.n).map(|i| case.inertia[i] * (pe[i] - ctx.pe_star[i]).powi(2)).sum();
    parts.potential - 0.5 * epsilon * epsilon * quad
}

/// Largest ε for which, at every sampled δ, (i) `Q_K` is positive definite
/// for every incremental gain in `[0, gain_bound]` and (ii) `V(δ, ·)` stays
/// positive away from δ*. Both conditions only get easier as ε shrinks.
pub fn epsilon_search_with_gain(
    case: &NetworkCase,
    eq: &Equilibrium,
    deltas: &[Vec<f64>],
    gain_bound: &[f64],
) -> Result<EpsilonSearch> {
    bisect_epsilon(|eps| {
        deltas
            .iter()
            .map(|d| {
                let schur = worst_case_schur_min(case, d, eps, gain_bound);
                let dist2: f64 = d.iter().zip(&eq.delta_star).map(|(a, b)| (a - b).powi(2)).sum();
                if dist2 < 1e-12 {
                    schur
                } else {
                    schur.min(v_floor(case, eq, d, eps) / dist2)
                }
            })
            .fold(f64::INFINITY, f64::min)
    })
}

/// Settings for [`certify_controller`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyOptions {
    /// Grid points for the monotonicity/origin/bounds checks.
    pub grid_points: usize,
    /// Half-width of the checked frequency interval (rad/s).
    pub grid_half_width: f64,
    pub random_pairs: usize,
    /// Angle samples for the ε search.
    pub theta_samples: usize,
    /// States sampled for the `V̇ < 0` check.
    pub state_samples: usize,
    /// Half-width of the frequency offsets around ω* in state samples (rad/s).
    pub omega_sample_half_width: f64,
    /// Length and step of the rollout used for the V / V̇ series.
    pub series_steps: usize,
    pub series_dt: f64,
    pub seed: u64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            grid_points: 10_000,
            grid_half_width: 10.0,
            random_pairs: 10_000,
            theta_samples: 1_000,
            state_samples: 1_000,
            omega_sample_half_width: 1.0,
            series_steps: 1_000,
            series_dt: 0.01,
            seed: 0,
        }
    }
}

/// Worst witnessed violation of a pointwise check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub passed: bool,
    /// Human-readable witness of the worst violation, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<String>,
}

impl CheckResult {
    fn pass() -> Self {
        Self { passed: true, witness: None }
    }

    fn fail(witness: String) -> Self {
        Self { passed: false, witness: Some(witness) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum Verdict {
    Certified,
    Refuted(String),
}

impl Verdict {
    pub fn is_certified(&self) -> bool {
        matches!(self, Verdict::Certified)
    }
}

/// Evidence gathered by [`certify_controller`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub verdict: Verdict,
    /// Hat non-negativity and bound containment, for structured controllers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub structural_check: Option<bool>,
    pub monotone_check: CheckResult,
    pub origin_check: CheckResult,
    pub bounds_check: CheckResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equilibrium: Option<Equilibrium>,
    /// Incremental-gain bound used for the gain-aware ε search.
    pub gain_bound: Vec<f64>,
    /// Largest validated ε (NaN when the search did not run or failed).
    pub epsilon_star: f64,
    /// ε used for the remaining evidence: `epsilon_star / 2`.
    pub epsilon: f64,
    /// Minimum sampled `λ_min(Q(δ))` at `epsilon`.
    pub lambda_min_q: f64,
    /// Minimum sampled `λ₂(H(δ))`.
    pub lambda2_h_min: f64,
    pub vdot_check: CheckResult,
    pub max_vdot: f64,
    /// Empirical `min V / |x - x*|²` and `max V / |x - x*|²` over state samples.
    pub alpha1: f64,
    pub alpha2: f64,
    /// Empirical `min -V̇ / V` over state samples.
    pub decay_rate: f64,
    pub series_dt: f64,
    pub v_series: Vec<f64>,
    pub vdot_series: Vec<f64>,
}

impl LyapunovReport {
    fn refuted_early(monotone: CheckResult, origin: CheckResult, bounds: CheckResult, structural: Option<bool>, gain: Vec<f64>, reason: String) -> Self {
        Self {
            verdict: Verdict::Refuted(reason),
            structural_check: structural,
            monotone_check: monotone,
            origin_check: origin,
            bounds_check: bounds,
            equilibrium: None,
            gain_bound: gain,
            epsilon_star: f64::NAN,
            epsilon: f64::NAN,
            lambda_min_q: f64::NAN,
            lambda2_h_min: f64::NAN,
            vdot_check: CheckResult::fail("not evaluated".into()),
            max_vdot: f64::NAN,
            alpha1: f64::NAN,
            alpha2: f64::NAN,
            decay_rate: f64::NAN,
            series_dt: 0.0,
            v_series: Vec::new(),
            vdot_series: Vec::new(),
        }
    }
}

fn grid(opts: &CertifyOptions) -> Vec<f64> {
    let k = opts.grid_points.max(2);
    (0..k)
        .map(|s| -opts.grid_half_width + 2.0 * opts.grid_half_width * s as f64 / (k - 1) as f64)
        .collect()
}

fn check_monotone<C: Controller + ?Sized>(case: &NetworkCase, u: &C, opts: &CertifyOptions) -> CheckResult {
    let g = grid(opts);
    let mut rng = substream(opts.seed, Stream::Certify, 1);
    let mut worst: Option<(f64, usize, f64, f64)> = None;
    let mut note = |drop: f64, bus: usize, a: f64, b: f64| {
        if drop > 0.0 && worst.is_none_or(|(w, ..)| drop > w) {
            worst = Some((drop, bus, a, b));
        }
    };
    for bus in 0..case.n {
        let values: Vec<f64> = g.iter().map(|&w| u.action(bus, w)).collect();
        for k in 1..g.len() {
            note(values[k - 1] - values[k], bus, g[k - 1], g[k]);
        }
        for _ in 0..opts.random_pairs {
            let x = (rng.random::<f64>() * 2.0 - 1.0) * opts.grid_half_width;
            let y = (rng.random::<f64>() * 2.0 - 1.0) * opts.grid_half_width;
            let (a, b) = if x <= y { (x, y) } else { (y, x) };
            note(u.action(bus, a) - u.action(bus, b), bus, a, b);
        }
    }
    match worst {
        None => CheckResult::pass(),
        Some((drop, bus, a, b)) => CheckResult::fail(format!(
            "bus {bus}: u({a:.6}) - u({b:.6}) = {drop:.6e} > 0 with {a:.6} < {b:.6}"
        )),
    }
}

const ORIGIN_TOL: f64 = 1e-12;

fn check_origin<C: Controller + ?Sized>(case: &NetworkCase, u: &C) -> CheckResult {
    let worst = (0..case.n)
        .map(|i| (i, u.action(i, 0.0)))
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
    match worst {
        Some((i, v)) if v.abs() > ORIGIN_TOL => CheckResult::fail(format!("bus {i}: u(0) = {v:.6e}")),
        _ => CheckResult::pass(),
    }
}

fn check_bounds<C: Controller + ?Sized>(case: &NetworkCase, u: &C, opts: &CertifyOptions) -> CheckResult {
    let g = grid(opts);
    for i in 0..case.n {
        for &w in &g {
            let v = u.action(i, w);
            if !(v >= case.u_min[i] - 1e-12 && v <= case.u_max[i] + 1e-12) {
                return CheckResult::fail(format!(
                    "bus {i}: u({w:.6}) = {v:.6} outside [{}, {}]",
                    case.u_min[i], case.u_max[i]
                ));
            }
        }
    }
    CheckResult::pass()
}

/// Runs the full certificate on a controller: monotonicity, origin crossing,
/// bounds, existence of the equilibrium, a gain-aware ε, and `V̇ < 0` at
/// sampled non-equilibrium states.
pub fn certify_controller(case: &NetworkCase, controller: &AnyController, opts: &CertifyOptions) -> LyapunovReport {
    let structural = match controller {
        AnyController::Monotone(p) => Some(
            p.n() == case.n
                && p.buses().iter().enumerate().all(|(i, b)| {
                    b.validate(i).is_ok() && b.u_min >= case.u_min[i] && b.u_max <= case.u_max[i]
                }),
        ),
        AnyController::Table(_) => None,
    };
    if controller.n() != case.n {
        return LyapunovReport::refuted_early(
            CheckResult::fail("bus count mismatch".into()),
            CheckResult::fail("bus count mismatch".into()),
            CheckResult::fail("bus count mismatch".into()),
            structural,
            Vec::new(),
            format!("controller has {} buses, case has {}", controller.n(), case.n),
        );
    }

    let monotone = check_monotone(case, controller, opts);
    let origin = check_origin(case, controller);
    let bounds = check_bounds(case, controller, opts);
    let gain: Vec<f64> = (0..case.n)
        .map(|i| {
            controller.gain_bound(i).unwrap_or_else(|| {
                let g = grid(opts);
                g.windows(2)
                    .map(|w| ((controller.action(i, w[1]) - controller.action(i, w[0])) / (w[1] - w[0])).abs())
                    .fold(0.0, f64::max)
            })
        })
        .collect();
    for (name, check) in [("monotonicity", &monotone), ("origin", &origin), ("bounds", &bounds)] {
        if !check.passed {
            let reason = format!("{name}: {}", check.witness.clone().unwrap_or_default());
            return LyapunovReport::refuted_early(monotone.clone(), origin.clone(), bounds.clone(), structural, gain, reason);
        }
    }

    let eq = match Equilibrium::compute(case, controller) {
        Ok(eq) => eq,
        Err(e) => {
            return LyapunovReport::refuted_early(monotone, origin, bounds, structural, gain, format!("equilibrium: {e}"));
        }
    };

    let mut rng = substream(opts.seed, Stream::Certify, 0);
    let mut deltas = sample_theta(case, opts.theta_samples, &mut rng);
    deltas.push(eq.delta_star.clone());
    let search = match epsilon_search_with_gain(case, &eq, &deltas, &gain) {
        Ok(s) => s,
        Err(e) => {
            let mut r = LyapunovReport::refuted_early(monotone, origin, bounds, structural, gain, format!("epsilon: {e}"));
            r.equilibrium = Some(eq);
            return r;
        }
    };
    let epsilon = 0.5 * search.epsilon_star;
    let lambda_min_q = deltas.iter().map(|d| q_min_eigenvalue(case, d, epsilon)).fold(f64::INFINITY, f64::min);
    let lambda2_h_min = deltas.iter().map(|d| lambda2_h(case, d)).fold(f64::INFINITY, f64::min);
    let ctx = LyapunovContext::new(case, eq.clone(), epsilon, controller).expect("epsilon > 0");

    // V̇ and V at sampled states in the region of attraction.
    let mut state_rng = substream(opts.seed, Stream::Certify, 2);
    let states = sample_theta(case, opts.state_samples, &mut state_rng);
    let mut max_vdot = f64::NEG_INFINITY;
    let mut worst_state = None;
    let (mut alpha1, mut alpha2, mut decay) = (f64::INFINITY, 0.0_f64, f64::INFINITY);
    for delta in &states {
        let omega: Vec<f64> = (0..case.n)
            .map(|_| eq.omega_star + (state_rng.random::<f64>() * 2.0 - 1.0) * opts.omega_sample_half_width)
            .collect();
        let dist2: f64 = delta.iter().zip(&eq.delta_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            + omega.iter().map(|w| (w - eq.omega_star).powi(2)).sum::<f64>();
        if dist2 < 1e-16 {
            continue;
        }
        let u: Vec<f64> = (0..case.n).map(|i| controller.action(i, omega[i])).collect();
        let v = ctx.v(delta, &omega);
        let vdot = ctx.vdot(delta, &omega, &u);
        if vdot > max_vdot {
            max_vdot = vdot;
            worst_state = Some((delta.clone(), omega.clone()));
        }
        alpha1 = alpha1.min(v / dist2);
        alpha2 = alpha2.max(v / dist2);
        if v > 0.0 {
            decay = decay.min(-vdot / v);
        }
    }
    let vdot_check = if max_vdot < 0.0 {
        CheckResult::pass()
    } else {
        CheckResult::fail(format!("V̇ = {max_vdot:.6e} >= 0 at {worst_state:?}"))
    };

    // V and V̇ along a nominal rollout from a sampled disturbance.
    let init_delta = &states.first().cloned().unwrap_or_else(|| eq.delta_star.clone());
    let theta0: Vec<f64> = init_delta.iter().zip(&eq.delta_star).map(|(d, s)| s + 0.1 * (d - s)).collect();
    let omega0: Vec<f64> = (0..case.n).map(|i| eq.omega_star + 0.1 * ((i % 3) as f64 - 1.0)).collect();
    let traj = sim::rollout_with(
        case,
        &theta0,
        &omega0,
        controller,
        &RolloutOptions { steps: opts.series_steps, dt: opts.series_dt, integrator: Integrator::Euler, events: Vec::new() },
    );
    let (mut v_series, mut vdot_series) = (Vec::new(), Vec::new());
    for k in 0..traj.theta.len() {
        let delta = coi_transform(&traj.theta[k]);
        let omega = &traj.omega[k];
        v_series.push(ctx.v(&delta, omega));
        vdot_series.push(ctx.vdot(&delta, omega, &traj.u[k]));
    }

    let verdict = if !vdot_check.passed {
        Verdict::Refuted(format!("vdot: {}", vdot_check.witness.clone().unwrap_or_default()))
    } else if structural == Some(false) {
        Verdict::Refuted("structure: hats or bounds violate the monotone parameterization".into())
    } else {
        Verdict::Certified
    };
    LyapunovReport {
        verdict,
        structural_check: structural,
        monotone_check: monotone,
        origin_check: origin,
        bounds_check: bounds,
        equilibrium: Some(eq),
        gain_bound: gain,
        epsilon_star: search.epsilon_star,
        epsilon,
        lambda_min_q,
        lambda2_h_min,
        vdot_check,
        max_vdot,
        alpha1,
        alpha2,
        decay_rate: decay,
        series_dt: opts.series_dt,
        v_series,
        vdot_series,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{MonotoneParams, TabulatedController};
    use crate::power_net::{bundled, CaseFile};
    use approx::assert_abs_diff_eq;

    fn two_bus() -> NetworkCase {
        NetworkCase::from_file(CaseFile {
            name: None,
            provenance: None,
            n: 2,
            inertia: vec![1.0, 1.0],
            damping: vec![1.0, 1.0],
            susceptance: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            p_m: vec![0.0, 0.0],
            u_min: None,
            u_max: vec![1.0, 1.0],
            rating: None,
            base_freq: 60.0,
        })
        .unwrap()
    }

    fn single_bus(d: f64) -> NetworkCase {
        NetworkCase::from_file(CaseFile {
            name: None,
            provenance: None,
            n: 1,
            inertia: vec![1.0],
            damping: vec![d],
            susceptance: vec![vec![0.0]],
            p_m: vec![0.0],
            u_min: None,
            u_max: vec![1.0],
            rating: None,
            base_freq: 60.0,
        })
        .unwrap()
    }

    fn zero(_: usize, _: f64) -> f64 {
        0.0
    }

    #[test]
    fn electrical_power_examples() {
        let c = two_bus();
        assert_eq!(electrical_power(&c, &[0.0, 0.0]), vec![0.0, 0.0]);
        let p = electrical_power(&c, &[0.05, -0.05]);
        assert_abs_diff_eq!(p[0], 0.1_f64.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.09983, epsilon = 1e-5);
        assert_abs_diff_eq!(p[1], -0.1_f64.sin(), epsilon = 1e-15);
    }

    #[test]
    fn hessian_examples() {
        let c = two_bus();
        let h = hessian_h(&c, &[0.0, 0.0]);
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let third = std::f64::consts::PI / 3.0;
        let h = hessian_h(&c, &[third, 0.0]);
        for (x, y) in h.iter().zip([0.5, -0.5, -0.5, 0.5]) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-15);
        }
        let c3 = bundled::case3();
        let h = hessian_h(&c3, &[0.3, -0.1, 0.25]);
        for i in 0..3 {
            assert!(h.row(i).sum().abs() < 1e-14);
            for j in 0..3 {
                assert_eq!(h[(i, j)], h[(j, i)]);
            }
        }
    }

    #[test]
    fn v_examples() {
        let c = two_bus();
        let eq = Equilibrium::compute(&c, &zero).unwrap();
        let ctx = LyapunovContext::new(&c, eq.clone(), 0.1, &zero).unwrap();
        assert_eq!(ctx.v(&eq.delta_star, &[0.0, 0.0]), 0.0);
        assert_abs_diff_eq!(ctx.v(&[0.05, -0.05], &[0.0, 0.0]), 1.0 - 0.1_f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(ctx.v(&[0.05, -0.05], &[0.0, 0.0]), 0.0049958, epsilon = 1e-7);
        let v = ctx.v(&eq.delta_star, &[0.3, -0.2]);
        assert_abs_diff_eq!(v, 0.5 * (0.09 + 0.04), epsilon = 1e-15);
        assert_eq!(ctx.vdot(&eq.delta_star, &[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn single_bus_q_closed_form() {
        let c = single_bus(2.0);
        for (eps, pd) in [(0.5, true), (1.9, true), (2.1, false), (3.0, false)] {
            assert_eq!(q_min_eigenvalue(&c, &[0.0], eps) > 0.0, pd, "eps = {eps}");
        }
        assert!(q_min_eigenvalue(&c, &[0.0], 1e-9) < 1e-8);
        let eq = Equilibrium::compute(&c, &zero).unwrap();
        let s = epsilon_search(&c, &eq, 10, 1).unwrap();
        assert_abs_diff_eq!(s.epsilon_star, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn epsilon_search_reproducible_and_downward_closed() {
        let c = bundled::case3();
        let eq = Equilibrium::compute(&c, &zero).unwrap();
        let a = epsilon_search(&c, &eq, 200, 5).unwrap();
        let b = epsilon_search(&c, &eq, 200, 5).unwrap();
        assert_eq!(a, b);
        let mut rng = substream(5, Stream::Certify, 0);
        for d in sample_theta(&c, 200, &mut rng) {
            assert!(q_min_eigenvalue(&c, &d, 0.5 * a.epsilon_star) > 0.0);
        }
    }

    #[test]
    fn theta_samples_stay_in_domain() {
        let c = bundled::case39kron();
        let mut rng = substream(3, Stream::Certify, 0);
        for d in sample_theta(&c, 300, &mut rng) {
            assert!(d.iter().sum::<f64>().abs() < 1e-12);
            for e in c.edges() {
                assert!((d[e.i] - d[e.j]).abs() < FRAC_PI_2);
            }
        }
    }

    #[test]
    fn certifies_monotone_and_refutes_bad_tables() {
        let c = bundled::case3();
        let opts = CertifyOptions { grid_points: 2_000, random_pairs: 2_000, theta_samples: 200, state_samples: 200, series_steps: 100, ..Default::default() };
        let droop = MonotoneParams::droop(&c, &[4.0, 2.0, 6.0]).unwrap();
        let r = certify_controller(&c, &AnyController::Monotone(droop), &opts);
        assert!(r.verdict.is_certified(), "{:?}", r.verdict);
        assert_eq!(r.structural_check, Some(true));
        assert!(r.max_vdot < 0.0);

        let bad = TabulatedController::sample(3, -10.0, 10.0, 2001, |_, w| -5.0 * w).unwrap();
        let r = certify_controller(&c, &AnyController::Table(bad), &opts);
        match &r.verdict {
            Verdict::Refuted(why) => assert!(why.starts_with("monotonicity"), "{why}"),
            v => panic!("{v:?}"),
        }
        assert!(r.monotone_check.witness.is_some());

        let offset = TabulatedController::sample(3, -10.0, 10.0, 2001, |_, w| (0.1 + w).clamp(-0.4, 0.4)).unwrap();
        let r = certify_controller(&c, &AnyController::Table(offset), &opts);
        match &r.verdict {
            Verdict::Refuted(why) => assert!(why.starts_with("origin"), "{why}"),
            v => panic!("{v:?}"),
        }
    }

    #[test]
    fn destabilizing_gain_gives_positive_vdot_somewhere() {
        let c = bundled::case3();
        let eq = Equilibrium::compute(&c, &zero).unwrap();
        let bad = |_: usize, w: f64| -5.0 * w;
        let ctx = LyapunovContext::new(&c, eq.clone(), 0.01, &bad).unwrap();
        let mut rng = substream(11, Stream::Certify, 9);
        let positives = sample_theta(&c, 100, &mut rng)
            .iter()
            .filter(|d| {
                let w: Vec<f64> = (0..3).map(|_| rng.random::<f64>() - 0.5).collect();
                let u: Vec<f64> = w.iter().map(|&x| bad(0, x)).collect();
                ctx.vdot(d, &w, &u) > 0.0
            })
            .count();
        assert!(positives > 0);
    }
}
