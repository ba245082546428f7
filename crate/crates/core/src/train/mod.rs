//! Training: BPTT through the unrolled Euler rollout,
//! plus the optimized-droop and REINFORCE baselines.

mod adam;
mod baselines;
mod bptt;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use baselines::{fit_droop, train_pg, DroopConfig, DroopFit, PgConfig};
pub use bptt::{bptt_grad, evaluate, loss, trajectory_grad, trajectory_loss, BatchGrad, LossBreakdown};

use crate::controller::{InitConfig, MonotoneParams};
use crate::error::{Error, Result};
use crate::power_net::{Equilibrium, NetworkCase};
use crate::rng::{substream, Stream};
use crate::sim::{sample_initial_states, InitSpec, InitState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub batch: usize,
    pub stages: usize,
    pub dt: f64,
    pub gamma: f64,
    /// Overrides `gamma` bus by bus.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_per_bus: Option<Vec<f64>>,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub m: usize,
    pub seed: u64,
    pub init_states: InitSpec,
    pub param_init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 600,
            batch: 800,
            stages: 200,
            dt: 0.01,
            gamma: 0.01,
            gamma_per_bus: None,
            lr: 0.05,
            lr_decay: 0.7,
            lr_decay_every: 30,
            m: 20,
            seed: 0,
            init_states: InitSpec::default(),
            param_init: InitConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale variant: 200 episodes of 64 rollouts.
    pub fn reduced() -> Self {
        Self { episodes: 200, batch: 64, ..Self::default() }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch == 0 || self.stages == 0 || self.m == 0 || self.lr_decay_every == 0 {
            return bad("batch, stages, m and lr_decay_every must be >= 1".into());
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return bad("lr and lr_decay must be > 0".into());
        }
        if let Some(g) = &self.gamma_per_bus {
            if g.len() != n {
                return bad(format!("gamma_per_bus has {} entries, case has {n} buses", g.len()));
            }
        }
        if self.gamma_vec(n).iter().any(|g| !(*g >= 0.0)) {
            return bad("gamma must be >= 0".into());
        }
        Ok(())
    }

    pub fn gamma_vec(&self, n: usize) -> Vec<f64> {
        self.gamma_per_bus.clone().unwrap_or_else(|| vec![self.gamma; n])
    }

    /// `lr · decay^⌊episode / every⌋`.
    pub fn lr_at(&self, episode: usize) -> f64 {
        self.lr * self.lr_decay.powi((episode / self.lr_decay_every) as i32)
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub diverged: usize,
}

impl EpisodeLog {
    pub const CSV_HEADER: &'static str = "episode,total,maxdev,action";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.episode, self.loss.total, self.loss.maxdev_sum(), self.loss.action_sum())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MonotoneParams,
    pub log: Vec<EpisodeLog>,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from(EpisodeLog::CSV_HEADER);
        s.push('\n');
        for row in &self.log {
            s.push_str(&row.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Operating point the initial states are drawn around: the uncontrolled
/// equilibrium. Any controller with `u(0) = 0` shares it when `Σ p_m = 0`.
pub fn operating_point(case: &NetworkCase) -> Result<Equilibrium> {
    Equilibrium::compute(case, &|_: usize, _: f64| 0.0)
}

/// Batch `index` of the training distribution for `seed`.
pub fn training_batch(case: &NetworkCase, center: &Equilibrium, ranges: &InitSpec, batch: usize, seed: u64, index: u64) -> Vec<InitState> {
    sample_initial_states(case.n, ranges, batch, seed, index)
        .iter()
        .map(|s| s.around(&center.delta_star, center.omega_star))
        .collect()
}

/// Initial controller for a config: random hats from the param-init stream.
pub fn initial_params(case: &NetworkCase, cfg: &TrainConfig) -> Result<MonotoneParams> {
    MonotoneParams::random(case, cfg.m, cfg.param_init, &mut substream(cfg.seed, Stream::ParamInit, 0))
}

/// Runs `cfg.episodes` rounds of sample → rollout → loss → BPTT → Adam.
pub fn train(case: &NetworkCase, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(case.n)?;
    train_from(case, cfg, initial_params(case, cfg)?)
}

/// [`train`] from given initial parameters.
pub fn train_from(case: &NetworkCase, cfg: &TrainConfig, mut params: MonotoneParams) -> Result<TrainOutcome> {
    cfg.validate(case.n)?;
    if params.n() != case.n {
        return Err(Error::Config(format!("params have {} buses, case has {}", params.n(), case.n)));
    }
    let gamma = cfg.gamma_vec(case.n);
    let center = operating_point(case)?;
    let mut adam = AdamState::new(params.len());
    let mut log = Vec::with_capacity(cfg.episodes);
    for ep in 0..cfg.episodes {
        let inits = training_batch(case, &center, &cfg.init_states, cfg.batch, cfg.seed, ep as u64);
        let bg = bptt_grad(case, &params, &inits, cfg.stages, cfg.dt, &gamma);
        if bg.diverged == inits.len() {
            return Err(Error::PersistentDivergence { episode: ep });
        }
        if bg.diverged > 0 {
            log::warn!("episode {ep}: {} of {} rollouts diverged and were skipped", bg.diverged, inits.len());
        }
        let lr = cfg.lr_at(ep);
        log::debug!("episode {ep}: loss {:.6} lr {lr:.4}", bg.loss.total);
        log.push(EpisodeLog { episode: ep, lr, loss: bg.loss, diverged: bg.diverged });
        adam_step(&mut adam, &mut params, &bg.grad, lr);
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::power_net::bundled;

    fn small() -> TrainConfig {
        TrainConfig { episodes: 20, batch: 8, stages: 50, m: 4, seed: 3, ..TrainConfig::default() }
    }

    #[test]
    fn zero_episodes_returns_init() {
        let c = bundled::case3();
        let cfg = TrainConfig { episodes: 0, ..small() };
        let out = train(&c, &cfg).unwrap();
        assert_eq!(out.params, initial_params(&c, &cfg).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.05);
        assert_eq!(cfg.lr_at(29), 0.05);
        assert!((cfg.lr_at(30) - 0.035).abs() < 1e-15);
        assert!((cfg.lr_at(65) - 0.05 * 0.49).abs() < 1e-15);
    }

    #[test]
    fn deterministic_and_structure_preserving() {
        let c = bundled::case3();
        let a = train(&c, &small()).unwrap();
        let b = train(&c, &small()).unwrap();
        assert_eq!(a.loss_csv(), b.loss_csv());
        assert_eq!(a.params, b.params);
        for (i, bus) in a.params.buses().iter().enumerate() {
            bus.validate(i).unwrap();
        }
        let gamma = small().gamma_vec(3);
        assert!(a.log.iter().all(|e| e.loss.decomposition_error(&gamma) <= 1e-12));
    }

    #[test]
    fn rejects_bad_config() {
        let c = bundled::case3();
        assert!(train(&c, &TrainConfig { dt: 0.0, ..small() }).is_err());
        assert!(train(&c, &TrainConfig { gamma: -1.0, ..small() }).is_err());
        assert!(train(&c, &TrainConfig { gamma_per_bus: Some(vec![0.1]), ..small() }).is_err());
    }
}
