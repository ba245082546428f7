//! Baselines on the same loss: linear droop tuned by projected gradient, and
//! a REINFORCE-trained monotone controller.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bptt::{average, bptt_grad, evaluate, trajectory_loss, LossBreakdown};
use super::{initial_params, operating_point, training_batch, AdamState, EpisodeLog, TrainConfig, TrainOutcome};
use crate::controller::MonotoneParams;
use crate::error::{Error, Result};
use crate::power_net::NetworkCase;
use crate::rng::{substream, Stream};
use crate::sim;

/// Batch index reserved for the fixed droop-tuning batch.
const DROOP_BATCH: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DroopConfig {
    /// Shared gains scanned before the gradient phase. Must include the
    /// endpoints one wants the result to dominate.
    pub grid: Vec<f64>,
    pub lr: f64,
    /// Gradient iterations; `None` uses the training episode count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
}

impl Default for DroopConfig {
    fn default() -> Self {
        Self {
            grid: vec![0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 7.5, 10.0, 15.0, 20.0, 30.0, 50.0, 100.0],
            lr: 0.2,
            iterations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroopFit {
    pub gains: Vec<f64>,
    pub loss: LossBreakdown,
    /// `(k, loss)` for every scanned shared gain.
    pub grid: Vec<(f64, f64)>,
    pub log: Vec<EpisodeLog>,
}

impl DroopFit {
    pub fn params(&self, case: &NetworkCase) -> Result<MonotoneParams> {
        MonotoneParams::droop(case, &self.gains)
    }
}

/// Tunes per-bus droop gains `u_i = clamp(k_i ω_i)` on a fixed batch drawn
/// from the training distribution. A shared-gain scan picks the start point;
/// projected Adam then refines every gain. The best evaluated gains win.
pub fn fit_droop(case: &NetworkCase, cfg: &TrainConfig, droop: &DroopConfig) -> Result<DroopFit> {
    cfg.validate(case.n)?;
    if droop.grid.iter().any(|k| !(*k >= 0.0)) {
        return Err(Error::Config("droop grid gains must be >= 0".into()));
    }
    let gamma = cfg.gamma_vec(case.n);
    let center = operating_point(case)?;
    let batch = training_batch(case, &center, &cfg.init_states, cfg.batch, cfg.seed, DROOP_BATCH);

    let mut best: Option<(Vec<f64>, LossBreakdown)> = None;
    let consider = |gains: &[f64], l: LossBreakdown, best: &mut Option<(Vec<f64>, LossBreakdown)>| {
        if best.as_ref().is_none_or(|(_, b)| l.total < b.total) {
            *best = Some((gains.to_vec(), l));
        }
    };
    let mut grid = Vec::with_capacity(droop.grid.len());
    for &k in &droop.grid {
        let gains = vec![k; case.n];
        let (l, _) = evaluate(case, &MonotoneParams::droop(case, &gains)?, &batch, cfg.stages, cfg.dt, &gamma);
        grid.push((k, l.total));
        consider(&gains, l, &mut best);
    }

    let mut gains = best.as_ref().map(|b| b.0.clone()).unwrap_or_else(|| vec![0.0; case.n]);
    let mut adam = AdamState::new(case.n);
    let mut log = Vec::new();
    for it in 0..droop.iterations.unwrap_or(cfg.episodes) {
        let params = MonotoneParams::droop(case, &gains)?;
        let bg = bptt_grad(case, &params, &batch, cfg.stages, cfg.dt, &gamma);
        if bg.diverged == batch.len() {
            break;
        }
        let lr = droop.lr * cfg.lr_decay.powi((it / cfg.lr_decay_every) as i32);
        log.push(EpisodeLog { episode: it, lr, loss: bg.loss.clone(), diverged: bg.diverged });
        if bg.diverged == 0 {
            consider(&gains, bg.loss, &mut best);
        }
        // q̂ and ẑ are tied to the same gain in the m = 1 family.
        let g: Vec<f64> = (0..case.n).map(|i| bg.grad[4 * i] + bg.grad[4 * i + 2]).collect();
        adam.update(&mut gains, &g, lr);
        gains.iter_mut().for_each(|k| *k = k.max(0.0));
    }
    let (gains, loss) = best.expect("grid or iterations evaluated at least once");
    Ok(DroopFit { gains, loss, grid, log })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgConfig {
    /// Standard deviation of the additive Gaussian exploration (p.u.).
    pub sigma: f64,
    pub lr: f64,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self { sigma: 0.05, lr: 0.01 }
    }
}

/// REINFORCE on the same monotone parameterization.
///
/// The policy is `a = clamp(μ_φ(ω) + σ ξ)` with `ξ ~ N(0, 1)` drawn per bus
/// and stage; the episodic loss is scored against a batch-mean baseline.
/// Evaluation uses the noise-free mean.
pub fn train_pg(case: &NetworkCase, cfg: &TrainConfig, pg: &PgConfig) -> Result<TrainOutcome> {
    cfg.validate(case.n)?;
    if !(pg.sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be > 0, got {}", pg.sigma)));
    }
    let gamma = cfg.gamma_vec(case.n);
    let center = operating_point(case)?;
    let mut params = initial_params(case, cfg)?;
    let mut adam = AdamState::new(params.len());
    let mut log = Vec::with_capacity(cfg.episodes);
    for ep in 0..cfg.episodes {
        let inits = training_batch(case, &center, &cfg.init_states, cfg.batch, cfg.seed, ep as u64);
        let samples: Vec<(LossBreakdown, Option<Vec<f64>>)> = inits
            .par_iter()
            .enumerate()
            .map(|(h, s)| {
                let mut rng = substream(cfg.seed, Stream::PgNoise, ((ep as u64) << 32) | h as u64);
                let (traj, score) = noisy_rollout(case, &params, &s.theta, &s.omega, cfg.stages, cfg.dt, pg.sigma, &mut rng);
                let l = trajectory_loss(&traj, &gamma);
                (l, (!traj.diverged).then_some(score))
            })
            .collect();
        let valid: Vec<(f64, &Vec<f64>)> = samples.iter().filter_map(|(l, s)| s.as_ref().map(|s| (l.total, s))).collect();
        if valid.is_empty() {
            return Err(Error::PersistentDivergence { episode: ep });
        }
        let baseline = valid.iter().map(|v| v.0).sum::<f64>() / valid.len() as f64;
        let mut grad = vec![0.0; params.len()];
        for (l, s) in &valid {
            let w = (l - baseline) / valid.len() as f64;
            grad.iter_mut().zip(s.iter()).for_each(|(g, x)| *g += w * x);
        }
        let diverged = samples.len() - valid.len();
        let loss = average(samples.into_iter().map(|s| s.0), case.n, &gamma);
        let lr = pg.lr * cfg.lr_decay.powi((ep / cfg.lr_decay_every) as i32);
        log.push(EpisodeLog { episode: ep, lr, loss, diverged });
        super::adam_step(&mut adam, &mut params, &grad, lr);
    }
    Ok(TrainOutcome { params, log })
}

/// Rollout under the Gaussian policy, returning the trajectory and
/// `Σ_{k,i} ∇_φ log π(a_i(k) | ω_i(k))`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn noisy_rollout<R: Rng + ?Sized>(
    case: &NetworkCase,
    params: &MonotoneParams,
    theta0: &[f64],
    omega0: &[f64],
    steps: usize,
    dt: f64,
    sigma: f64,
    rng: &mut R,
) -> (sim::Trajectory, Vec<f64>) {
    let stride = params.stride();
    let mut score = vec![0.0; params.len()];
    let inv_var = 1.0 / (sigma * sigma);
    let traj = sim::rollout_policy(
        case,
        theta0,
        omega0,
        |_, i, w| {
            let xi: f64 = rng.sample(StandardNormal);
            let mu = params.eval(i, w);
            let a = mu + sigma * xi;
            let chunk = &mut score[i * stride..(i + 1) * stride];
            params.bus(i).eval_with_grad(w, (a - mu) * inv_var, chunk);
            a
        },
        steps,
        dt,
        &[],
    );
    (traj, score)
}
