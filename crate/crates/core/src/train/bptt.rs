//! Loss and its gradient through the unrolled Euler recurrence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, MonotoneParams};
use crate::power_net::NetworkCase;
use crate::sim::{self, InitState, Trajectory};

/// Batch-averaged loss split per bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `max_k |ω_i(k)|` (rad/s).
    pub maxdev: Vec<f64>,
    /// `(1/K) Σ_{k>=1} u_i(k)²`.
    pub action: Vec<f64>,
}

impl LossBreakdown {
    pub fn zeros(n: usize) -> Self {
        Self { total: 0.0, maxdev: vec![0.0; n], action: vec![0.0; n] }
    }

    fn from_terms(maxdev: Vec<f64>, action: Vec<f64>, gamma: &[f64]) -> Self {
        let total = (0..maxdev.len()).map(|i| maxdev[i] + gamma[i] * action[i]).sum();
        Self { total, maxdev, action }
    }

    pub fn maxdev_sum(&self) -> f64 {
        self.maxdev.iter().sum()
    }

    pub fn action_sum(&self) -> f64 {
        self.action.iter().sum()
    }

    /// `|total - Σ_i (maxdev_i + γ_i action_i)|`.
    pub fn decomposition_error(&self, gamma: &[f64]) -> f64 {
        let sum: f64 = (0..self.maxdev.len()).map(|i| self.maxdev[i] + gamma[i] * self.action[i]).sum();
        (self.total - sum).abs()
    }
}

/// Stage of the first maximum of `|ω_i(k)|` for every bus.
fn argmax_stages(traj: &Trajectory) -> Vec<usize> {
    let n = traj.n();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..traj.omega.len() {
                if traj.omega[k][i].abs() > traj.omega[best][i].abs() {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Loss of a single trajectory.
pub fn trajectory_loss(traj: &Trajectory, gamma: &[f64]) -> LossBreakdown {
    let n = traj.n();
    let stages = traj.stages().max(1) as f64;
    let maxdev = argmax_stages(traj).iter().enumerate().map(|(i, &k)| traj.omega[k][i].abs()).collect();
    let action = (0..n)
        .map(|i| traj.u[1..].iter().map(|u| u[i] * u[i]).sum::<f64>() / stages)
        .collect();
    LossBreakdown::from_terms(maxdev, action, gamma)
}

/// Batch-averaged loss.
pub fn loss(batch: &[Trajectory], gamma: &[f64]) -> LossBreakdown {
    average(batch.iter().map(|t| trajectory_loss(t, gamma)), gamma.len(), gamma)
}

pub(crate) fn average(parts: impl Iterator<Item = LossBreakdown>, n: usize, gamma: &[f64]) -> LossBreakdown {
    let mut maxdev = vec![0.0; n];
    let mut action = vec![0.0; n];
    let mut count = 0usize;
    for p in parts {
        for i in 0..n {
            maxdev[i] += p.maxdev[i];
            action[i] += p.action[i];
        }
        count += 1;
    }
    if count > 0 {
        for i in 0..n {
            maxdev[i] /= count as f64;
            action[i] /= count as f64;
        }
    }
    LossBreakdown::from_terms(maxdev, action, gamma)
}

/// Adds `d loss(traj) / d hats` into `grad` (flat layout of
/// [`MonotoneParams::flatten`]).
///
/// The max term back-propagates only through its first argmax stage; the
/// clamp and ReLU kinks use the inactive branch.
pub fn trajectory_grad(case: &NetworkCase, params: &MonotoneParams, traj: &Trajectory, gamma: &[f64], grad: &mut [f64]) {
    let n = case.n;
    let big_k = traj.stages();
    let dt = traj.dt;
    let stride = params.stride();
    let kstar = argmax_stages(traj);
    let inv_k = 1.0 / big_k.max(1) as f64;

    let mut lw = vec![0.0; n];
    let mut lt = vec![0.0; n];

    // Terms that read stage k directly: the max and the action cost.
    let direct = |k: usize, scale_extra: &[f64], lw: &mut [f64], grad: &mut [f64]| {
        for i in 0..n {
            if kstar[i] == k {
                lw[i] += traj.omega[k][i].signum() * (traj.omega[k][i] != 0.0) as u8 as f64;
            }
            let action = if k >= 1 { 2.0 * gamma[i] * inv_k * traj.u[k][i] } else { 0.0 };
            let scale = action + scale_extra[i];
            if scale != 0.0 {
                let chunk = &mut grad[i * stride..(i + 1) * stride];
                let (_, du) = params.bus(i).eval_with_grad(traj.omega[k][i], scale, chunk);
                lw[i] += scale * du;
            }
        }
    };

    direct(big_k, &vec![0.0; n], &mut lw, grad);
    for k in (1..=big_k).rev() {
        let prev = k - 1;
        let th = &traj.theta[prev];
        let a: Vec<f64> = (0..n).map(|i| lw[i] * dt / case.inertia[i]).collect();
        let mut new_lt = lt.clone();
        for e in case.edges() {
            let d = (a[e.i] - a[e.j]) * e.b * (th[e.i] - th[e.j]).cos();
            new_lt[e.i] -= d;
            new_lt[e.j] += d;
        }
        let mut new_lw: Vec<f64> = (0..n)
            .map(|i| lw[i] * (1.0 - dt * case.damping[i] / case.inertia[i]) + lt[i] * dt)
            .collect();
        let through_u: Vec<f64> = a.iter().map(|x| -x).collect();
        direct(prev, &through_u, &mut new_lw, grad);
        lw = new_lw;
        lt = new_lt;
    }
}

/// Loss and gradient over a batch of initial states.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub loss: LossBreakdown,
    pub grad: Vec<f64>,
    /// Rollouts that diverged and were left out of the gradient.
    pub diverged: usize,
}

/// Rolls out every initial state under `params` and returns the
/// batch-averaged loss and its gradient. Diverged rollouts still count in
/// the loss but contribute no gradient.
pub fn bptt_grad(
    case: &NetworkCase,
    params: &MonotoneParams,
    inits: &[InitState],
    steps: usize,
    dt: f64,
    gamma: &[f64],
) -> BatchGrad {
    let per: Vec<(LossBreakdown, Option<Vec<f64>>)> = inits
        .par_iter()
        .map(|s| {
            let traj = sim::rollout(case, &s.theta, &s.omega, params, steps, dt, &[]);
            let l = trajectory_loss(&traj, gamma);
            if traj.diverged {
                (l, None)
            } else {
                let mut g = vec![0.0; params.len()];
                trajectory_grad(case, params, &traj, gamma, &mut g);
                (l, Some(g))
            }
        })
        .collect();
    let mut grad = vec![0.0; params.len()];
    let mut diverged = 0;
    for (_, g) in &per {
        match g {
            Some(g) => grad.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => diverged += 1,
        }
    }
    let scale = 1.0 / inits.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    let loss = average(per.into_iter().map(|(l, _)| l), case.n, gamma);
    BatchGrad { loss, grad, diverged }
}

/// Batch-averaged loss of any controller (no gradient).
pub fn evaluate<C: Controller + ?Sized>(
    case: &NetworkCase,
    controller: &C,
    inits: &[InitState],
    steps: usize,
    dt: f64,
    gamma: &[f64],
) -> (LossBreakdown, usize) {
    let per: Vec<(LossBreakdown, bool)> = inits
        .par_iter()
        .map(|s| {
            let traj = sim::rollout(case, &s.theta, &s.omega, controller, steps, dt, &[]);
            (trajectory_loss(&traj, gamma), traj.diverged)
        })
        .collect();
    let diverged = per.iter().filter(|p| p.1).count();
    (average(per.into_iter().map(|p| p.0), case.n, gamma), diverged)
}
