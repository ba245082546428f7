//! Discrete-time swing dynamics.
//!
//! ```text
//! θ_i(k) = θ_i(k-1) + Δt ω_i(k-1)
//! ω_i(k) = ω_i(k-1) + Δt/M_i (p_i - D_i ω_i(k-1) - u_i(ω_i(k-1)) - Σ_j B_ij sin(θ_i(k-1) - θ_j(k-1)))
//! ```
//!
//! Actions are always clamped to the case bounds before use and recording.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::Controller;
use crate::error::{Error, Result};
use crate::power_net::NetworkCase;
use crate::rng::{substream, Stream};

/// Any `|ω| > DIVERGENCE_LIMIT` (rad/s) marks the rollout as diverged.
pub const DIVERGENCE_LIMIT: f64 = 100.0;

/// Step change of the injection at one bus over `[t_on, t_off)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceEvent {
    pub bus: usize,
    pub delta_p: f64,
    pub t_on: f64,
    pub t_off: f64,
}

impl DisturbanceEvent {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.bus >= n {
            return Err(Error::Config(format!("event bus {} out of range for {n} buses", self.bus)));
        }
        if !(self.t_on >= 0.0 && self.t_on < self.t_off) {
            return Err(Error::Config(format!("event needs 0 <= t_on < t_off, got [{}, {})", self.t_on, self.t_off)));
        }
        Ok(())
    }

    /// First and one-past-last stage at which the event is active.
    pub fn stage_range(&self, dt: f64) -> (usize, usize) {
        let idx = |t: f64| (t / dt - 1e-9).ceil().max(0.0) as usize;
        (idx(self.t_on), idx(self.t_off))
    }
}

/// Free-form scenario description carried by trajectories.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub label: String,
    pub events: Vec<DisturbanceEvent>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    /// The training discretization.
    #[default]
    Euler,
    /// Classical Runge-Kutta with the controller inside the stages; for
    /// evaluation only.
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub steps: usize,
    pub dt: f64,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default)]
    pub events: Vec<DisturbanceEvent>,
}

impl RolloutOptions {
    pub fn euler(steps: usize, dt: f64) -> Self {
        Self { steps, dt, integrator: Integrator::Euler, events: Vec::new() }
    }
}

/// States and actions at stages `0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub theta: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
    /// `u[k]` is the clamped action applied between stages `k` and `k + 1`.
    pub u: Vec<Vec<f64>>,
    /// Injection used between stages `k` and `k + 1`.
    pub injection: Vec<Vec<f64>>,
    pub scenario: Scenario,
    pub diverged: bool,
    /// First stage at which the divergence test fired.
    pub diverged_at: Option<usize>,
}

impl Trajectory {
    pub fn stages(&self) -> usize {
        self.theta.len() - 1
    }

    pub fn n(&self) -> usize {
        self.theta.first().map_or(0, Vec::len)
    }

    /// CSV with ω in Hz: `t,theta_0..,omega_0..,u_0..`.
    pub fn write_csv<W: Write>(&self, base: &NetworkCase, mut w: W) -> std::io::Result<()> {
        let n = self.n();
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("theta_{i}")));
        header.extend((0..n).map(|i| format!("omega_{i}")));
        header.extend((0..n).map(|i| format!("u_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.theta.len() {
            let mut row = vec![format!("{}", k as f64 * self.dt)];
            row.extend(self.theta[k].iter().map(|x| format!("{x}")));
            row.extend(self.omega[k].iter().map(|x| format!("{}", base.rad_to_hz(*x))));
            row.extend(self.u[k].iter().map(|x| format!("{x}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Sidecar metadata for [`Trajectory::write_csv`].
    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "dt": self.dt,
            "stages": self.stages(),
            "scenario": self.scenario,
            "diverged": self.diverged,
            "diverged_at": self.diverged_at,
            "omega_unit": "Hz",
        })
    }
}

/// One state update.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    /// Clamped action evaluated at the previous frequency.
    pub u: Vec<f64>,
}

fn clamp_action(case: &NetworkCase, bus: usize, a: f64) -> f64 {
    a.max(case.u_min[bus]).min(case.u_max[bus])
}

/// Right-hand side of `M ω̇` without the controller term.
fn accel_into(case: &NetworkCase, p: &[f64], theta: &[f64], omega: &[f64], u: &[f64], out: &mut [f64]) {
    for i in 0..case.n {
        out[i] = p[i] - case.damping[i] * omega[i] - u[i];
    }
    for e in case.edges() {
        let f = e.b * (theta[e.i] - theta[e.j]).sin();
        out[e.i] -= f;
        out[e.j] += f;
    }
    for i in 0..case.n {
        out[i] /= case.inertia[i];
    }
}

/// Continuous-time vector field `(θ̇, ω̇)` with the nominal injection and
/// clamped actions.
pub fn vector_field<C: Controller + ?Sized>(case: &NetworkCase, theta: &[f64], omega: &[f64], controller: &C) -> (Vec<f64>, Vec<f64>) {
    let u: Vec<f64> = (0..case.n).map(|i| clamp_action(case, i, controller.action(i, omega[i]))).collect();
    let mut acc = vec![0.0; case.n];
    accel_into(case, &case.p_m, theta, omega, &u, &mut acc);
    (omega.to_vec(), acc)
}

/// Forward-Euler update with the case's nominal injection.
pub fn step<C: Controller + ?Sized>(case: &NetworkCase, theta: &[f64], omega: &[f64], controller: &C, dt: f64) -> Step {
    step_with_injection(case, &case.p_m, theta, omega, controller, dt)
}

pub fn step_with_injection<C: Controller + ?Sized>(
    case: &NetworkCase,
    p: &[f64],
    theta: &[f64],
    omega: &[f64],
    controller: &C,
    dt: f64,
) -> Step {
    let u: Vec<f64> = (0..case.n).map(|i| clamp_action(case, i, controller.action(i, omega[i]))).collect();
    let (theta, omega) = euler_update(case, p, theta, omega, &u, dt);
    Step { theta, omega, u }
}

fn euler_update(case: &NetworkCase, p: &[f64], theta: &[f64], omega: &[f64], u: &[f64], dt: f64) -> (Vec<f64>, Vec<f64>) {
    let mut acc = vec![0.0; case.n];
    accel_into(case, p, theta, omega, u, &mut acc);
    let th = theta.iter().zip(omega).map(|(t, w)| t + dt * w).collect();
    let om = omega.iter().zip(&acc).map(|(w, a)| w + dt * a).collect();
    (th, om)
}

fn rk4_update<C: Controller + ?Sized>(
    case: &NetworkCase,
    p: &[f64],
    theta: &[f64],
    omega: &[f64],
    controller: &C,
    dt: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = case.n;
    let deriv = |th: &[f64], om: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let u: Vec<f64> = (0..n).map(|i| clamp_action(case, i, controller.action(i, om[i]))).collect();
        let mut acc = vec![0.0; n];
        accel_into(case, p, th, om, &u, &mut acc);
        (om.to_vec(), acc)
    };
    let axpy = |x: &[f64], a: f64, y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(x, y)| x + a * y).collect() };
    let (k1t, k1w) = deriv(theta, omega);
    let (k2t, k2w) = deriv(&axpy(theta, 0.5 * dt, &k1t), &axpy(omega, 0.5 * dt, &k1w));
    let (k3t, k3w) = deriv(&axpy(theta, 0.5 * dt, &k2t), &axpy(omega, 0.5 * dt, &k2w));
    let (k4t, k4w) = deriv(&axpy(theta, dt, &k3t), &axpy(omega, dt, &k3w));
    let combine = |x: &[f64], a: &[f64], b: &[f64], c: &[f64], d: &[f64]| -> Vec<f64> {
        (0..n).map(|i| x[i] + dt / 6.0 * (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i])).collect()
    };
    (combine(theta, &k1t, &k2t, &k3t, &k4t), combine(omega, &k1w, &k2w, &k3w, &k4w))
}

/// Injection vector in effect between stages `k` and `k + 1`.
pub fn injection_at(case: &NetworkCase, events: &[DisturbanceEvent], k: usize, dt: f64) -> Vec<f64> {
    let mut p = case.p_m.clone();
    for e in events {
        let (on, off) = e.stage_range(dt);
        if (on..off).contains(&k) {
            p[e.bus] += e.delta_p;
        }
    }
    p
}

fn is_diverged(omega: &[f64], theta: &[f64]) -> bool {
    omega.iter().any(|w| !(w.abs() <= DIVERGENCE_LIMIT)) || theta.iter().any(|t| !t.is_finite())
}

/// Rolls out a stage-aware policy `policy(k, bus, ω) -> action` (clamped to
/// the case bounds before use). Only Euler is supported here because the
/// policy may be stochastic per stage.
pub fn rollout_policy(
    case: &NetworkCase,
    theta0: &[f64],
    omega0: &[f64],
    mut policy: impl FnMut(usize, usize, f64) -> f64,
    steps: usize,
    dt: f64,
    events: &[DisturbanceEvent],
) -> Trajectory {
    let n = case.n;
    let mut theta = Vec::with_capacity(steps + 1);
    let mut omega = Vec::with_capacity(steps + 1);
    let mut u = Vec::with_capacity(steps + 1);
    let mut injection = Vec::with_capacity(steps + 1);
    theta.push(theta0.to_vec());
    omega.push(omega0.to_vec());
    let mut diverged_at = is_diverged(omega0, theta0).then_some(0);
    for k in 0..=steps {
        let w = &omega[k];
        let uk: Vec<f64> = (0..n).map(|i| clamp_action(case, i, policy(k, i, w[i]))).collect();
        let p = injection_at(case, events, k, dt);
        if k < steps {
            let (th, om) = if diverged_at.is_some() {
                (theta[k].clone(), omega[k].clone())
            } else {
                let (th, om) = euler_update(case, &p, &theta[k], w, &uk, dt);
                if is_diverged(&om, &th) {
                    diverged_at = Some(k + 1);
                    if om.iter().chain(&th).all(|x| x.is_finite()) {
                        (th, om)
                    } else {
                        (theta[k].clone(), omega[k].clone())
                    }
                } else {
                    (th, om)
                }
            };
            theta.push(th);
            omega.push(om);
        }
        u.push(uk);
        injection.push(p);
    }
    Trajectory {
        dt,
        theta,
        omega,
        u,
        injection,
        scenario: Scenario { label: String::new(), events: events.to_vec() },
        diverged: diverged_at.is_some(),
        diverged_at,
    }
}

/// `K` steps from `(theta0, omega0)` under a deterministic controller.
pub fn rollout<C: Controller + ?Sized>(
    case: &NetworkCase,
    theta0: &[f64],
    omega0: &[f64],
    controller: &C,
    steps: usize,
    dt: f64,
    events: &[DisturbanceEvent],
) -> Trajectory {
    rollout_policy(case, theta0, omega0, |_, i, w| controller.action(i, w), steps, dt, events)
}

pub fn rollout_with<C: Controller + ?Sized>(
    case: &NetworkCase,
    theta0: &[f64],
    omega0: &[f64],
    controller: &C,
    opts: &RolloutOptions,
) -> Trajectory {
    match opts.integrator {
        Integrator::Euler => rollout(case, theta0, omega0, controller, opts.steps, opts.dt, &opts.events),
        Integrator::Rk4 => rollout_rk4(case, theta0, omega0, controller, opts),
    }
}

fn rollout_rk4<C: Controller + ?Sized>(
    case: &NetworkCase,
    theta0: &[f64],
    omega0: &[f64],
    controller: &C,
    opts: &RolloutOptions,
) -> Trajectory {
    let n = case.n;
    let dt = opts.dt;
    let mut theta = vec![theta0.to_vec()];
    let mut omega = vec![omega0.to_vec()];
    let mut u = Vec::new();
    let mut injection = Vec::new();
    let mut diverged_at = is_diverged(omega0, theta0).then_some(0);
    for k in 0..=opts.steps {
        let p = injection_at(case, &opts.events, k, dt);
        u.push((0..n).map(|i| clamp_action(case, i, controller.action(i, omega[k][i]))).collect());
        if k < opts.steps {
            let (th, om) = if diverged_at.is_some() {
                (theta[k].clone(), omega[k].clone())
            } else {
                let (th, om) = rk4_update(case, &p, &theta[k], &omega[k], controller, dt);
                if is_diverged(&om, &th) {
                    diverged_at = Some(k + 1);
                    if om.iter().chain(&th).all(|x| x.is_finite()) {
                        (th, om)
                    } else {
                        (theta[k].clone(), omega[k].clone())
                    }
                } else {
                    (th, om)
                }
            };
            theta.push(th);
            omega.push(om);
        }
        injection.push(p);
    }
    Trajectory {
        dt,
        theta,
        omega,
        u,
        injection,
        scenario: Scenario { label: String::new(), events: opts.events.clone() },
        diverged: diverged_at.is_some(),
        diverged_at,
    }
}

/// Initial condition of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitState {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
}

impl InitState {
    /// Shifts the state by an operating point.
    pub fn around(&self, theta_center: &[f64], omega_center: f64) -> Self {
        Self {
            theta: self.theta.iter().zip(theta_center).map(|(d, c)| d + c).collect(),
            omega: self.omega.iter().map(|w| w + omega_center).collect(),
        }
    }
}

/// Uniform initial-state ranges. Frequency is given in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitSpec {
    /// Half-width of the angle offsets (rad).
    pub delta_half_width: f64,
    /// Half-width of the frequency offsets (Hz).
    pub omega_half_width_hz: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self { delta_half_width: 0.05, omega_half_width_hz: 0.1 }
    }
}

/// `batch` draws with `δ_i ~ U[-a, a]` and `ω_i ~ 2π U[-b, b]`.
pub fn sample_initial_states(n: usize, ranges: &InitSpec, batch: usize, seed: u64, index: u64) -> Vec<InitState> {
    let mut rng = substream(seed, Stream::InitStates, index);
    sample_initial_states_from(n, ranges, batch, &mut rng)
}

pub fn sample_initial_states_from<R: Rng + ?Sized>(n: usize, ranges: &InitSpec, batch: usize, rng: &mut R) -> Vec<InitState> {
    let w = ranges.omega_half_width_hz * std::f64::consts::TAU;
    let d = ranges.delta_half_width;
    (0..batch)
        .map(|_| {
            let theta = (0..n).map(|_| d * (2.0 * rng.random::<f64>() - 1.0)).collect();
            let omega = (0..n).map(|_| w * (2.0 * rng.random::<f64>() - 1.0)).collect();
            InitState { theta, omega }
        })
        .collect()
}

/// Independent rollouts in parallel; output order matches `inits`.
pub fn rollout_batch<C: Controller + ?Sized>(
    case: &NetworkCase,
    inits: &[InitState],
    controller: &C,
    opts: &RolloutOptions,
) -> Vec<Trajectory> {
    inits
        .par_iter()
        .map(|s| rollout_with(case, &s.theta, &s.omega, controller, opts))
        .collect()
}
