use std::fmt::Write as _;

use serde::Serialize;
use stablefreq_core::lyapunov::{certify_controller, CertifyOptions};
use stablefreq_core::rng::{substream, Stream};
use stablefreq_core::sim::{self, sample_initial_states_from, InitSpec, InitState, RolloutOptions, Trajectory};
use stablefreq_core::train::{self, evaluate, operating_point, training_batch, TrainOutcome};
use stablefreq_core::{fit_monotone, Controller, MonotoneParams, NetworkCase};

use crate::artifacts::RunArtifacts;
use crate::config::ExperimentConfig;
use crate::CliError;

/// What a command produced and whether it counts as a refutation.
pub struct Outcome {
    pub artifacts: RunArtifacts,
    pub refuted: bool,
}

impl Outcome {
    fn ok(artifacts: RunArtifacts) -> Self {
        Self { artifacts, refuted: false }
    }
}

fn start(cfg: &ExperimentConfig, command: &str) -> Result<RunArtifacts, CliError> {
    // The output location is not part of the experiment.
    let mut canonical = cfg.clone();
    canonical.out = None;
    let json = canonical.canonical_json();
    let mut art = RunArtifacts::new(&cfg.out_dir()?, command, &json, cfg.seed)?;
    let mut pretty = serde_json::to_string_pretty(&canonical).expect("config serializes");
    pretty.push('\n');
    art.write("config.json", pretty)?;
    Ok(art)
}

fn params_json(p: &MonotoneParams) -> serde_json::Value {
    serde_json::to_value(p.to_file()).expect("params serialize")
}

fn write_training(art: &mut RunArtifacts, out: &TrainOutcome, params_name: &str, loss_name: &str) -> Result<(), CliError> {
    art.write_json(params_name, &params_json(&out.params))?;
    art.write(loss_name, out.loss_csv())
}

pub fn train(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let case = cfg.load_case()?;
    let tc = cfg.train_config()?;
    let mut art = start(cfg, "train")?;
    let out = train::train(&case, &tc).map_err(CliError::core)?;
    write_training(&mut art, &out, "params.json", "loss.csv")?;
    Ok(Outcome::ok(art.finish()?))
}

pub fn pg_train(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let case = cfg.load_case()?;
    let tc = cfg.train_config()?;
    let mut art = start(cfg, "pg-train")?;
    let out = train::train_pg(&case, &tc, &cfg.pg).map_err(CliError::core)?;
    write_training(&mut art, &out, "params.json", "loss.csv")?;
    Ok(Outcome::ok(art.finish()?))
}

pub fn droop_fit(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let case = cfg.load_case()?;
    let tc = cfg.train_config()?;
    let mut art = start(cfg, "droop-fit")?;
    let fit = train::fit_droop(&case, &tc, &cfg.droop).map_err(CliError::core)?;
    art.write_json("droop.json", &fit)?;
    art.write_json("params.json", &params_json(&fit.params(&case).map_err(CliError::core)?))?;
    Ok(Outcome::ok(art.finish()?))
}

pub fn certify(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let section = cfg
        .certify
        .as_ref()
        .ok_or_else(|| CliError::Config("missing \"certify\" section".into()))?;
    let case = cfg.load_case()?;
    let controller = cfg.load_controller(&section.controller)?;
    let opts = CertifyOptions { seed: cfg.require_seed()?, ..section.options.clone() };
    let mut art = start(cfg, "certify")?;
    let report = certify_controller(&case, &controller, &opts);
    art.write_json("report.json", &report)?;
    let mut csv = String::from("t,V,Vdot\n");
    for (k, (v, vd)) in report.v_series.iter().zip(&report.vdot_series).enumerate() {
        writeln!(csv, "{},{v},{vd}", k as f64 * report.series_dt).unwrap();
    }
    art.write("series.csv", csv)?;
    match &report.verdict {
        stablefreq_core::Verdict::Certified => log::info!("certified (epsilon* = {:.6e})", report.epsilon_star),
        stablefreq_core::Verdict::Refuted(why) => log::warn!("refuted: {why}"),
    }
    Ok(Outcome { refuted: !report.verdict.is_certified(), artifacts: art.finish()? })
}

#[derive(Serialize)]
struct RolloutSummary {
    file: String,
    diverged: bool,
    diverged_at: Option<usize>,
    /// `max_i |ω_i(K)|` (rad/s).
    final_max_abs_omega: f64,
}

fn write_trajectory(art: &mut RunArtifacts, case: &NetworkCase, stem: &str, t: &Trajectory) -> Result<(), CliError> {
    let mut buf = Vec::new();
    t.write_csv(case, &mut buf).expect("writing to memory");
    art.write(&format!("{stem}.csv"), buf)?;
    art.write_json(&format!("{stem}.json"), &t.metadata())
}

/// Index of the initial-state batch used by `simulate`.
const SIMULATE_BATCH: u64 = 1 << 41;

pub fn simulate(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let section = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::Config("missing \"simulate\" section".into()))?;
    let mut case = cfg.load_case()?;
    if let Some(w) = section.wide_bounds {
        let mut file = case.to_file();
        file.u_max = vec![w; case.n];
        file.u_min = Some(vec![-w; case.n]);
        case = NetworkCase::from_file(file).map_err(CliError::core)?;
    }
    for e in &section.events {
        e.validate(case.n).map_err(CliError::core)?;
    }
    let controller = section.controller.build(cfg, &case)?;
    let seed = cfg.require_seed()?;
    let center = operating_point(&case).map_err(CliError::core)?;
    let inits = training_batch(&case, &center, &section.init_states, section.rollouts, seed, SIMULATE_BATCH);
    let opts = RolloutOptions {
        steps: section.steps,
        dt: section.dt,
        integrator: section.integrator,
        events: section.events.clone(),
    };
    let mut art = start(cfg, "simulate")?;
    let trajs = sim::rollout_batch(&case, &inits, &controller, &opts);
    let mut summary = Vec::new();
    for (h, t) in trajs.iter().enumerate() {
        let stem = format!("rollout_{h:03}");
        write_trajectory(&mut art, &case, &stem, t)?;
        summary.push(RolloutSummary {
            file: format!("{stem}.csv"),
            diverged: t.diverged,
            diverged_at: t.diverged_at,
            final_max_abs_omega: t.omega.last().unwrap().iter().fold(0.0, |a, w| a.max(w.abs())),
        });
    }
    let diverged = summary.iter().filter(|s| s.diverged).count();
    art.write_json("summary.json", &serde_json::json!({ "rollouts": summary, "diverged": diverged }))?;
    Ok(Outcome::ok(art.finish()?))
}

/// One column of the comparison sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub omega_bar_hz: f64,
    pub bptt: f64,
    pub droop: f64,
    pub pg: f64,
    /// Mean `Σ_i |ω_i(0)|`: the part of the loss no controller can change.
    pub floor: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub rows: Vec<SweepRow>,
    pub droop_gains: Vec<f64>,
    /// `1 - Σ bptt / Σ droop` over the sweep.
    pub improvement_vs_droop: f64,
    pub improvement_vs_pg: f64,
    /// Best possible improvement over droop given the floor.
    pub improvement_ceiling_vs_droop: f64,
    pub bptt_diverged: usize,
    pub train_seconds: TrainSeconds,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSeconds {
    pub bptt: f64,
    pub droop: f64,
    pub pg: f64,
}

/// Test set for column `j` of the sweep.
pub fn sweep_inits(case: &NetworkCase, center: &stablefreq_core::Equilibrium, ranges: &InitSpec, batch: usize, seed: u64, j: u64) -> Vec<InitState> {
    let mut rng = substream(seed, Stream::Evaluation, j);
    sample_initial_states_from(case.n, ranges, batch, &mut rng)
        .iter()
        .map(|s| s.around(&center.delta_star, center.omega_star))
        .collect()
}

pub fn compare(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let case = cfg.load_case()?;
    let tc = cfg.train_config()?;
    let cs = &cfg.compare;
    cs.step_load.validate(case.n).map_err(CliError::core)?;
    let mut art = start(cfg, "compare")?;

    let clock = std::time::Instant::now();
    let droop = train::fit_droop(&case, &tc, &cfg.droop).map_err(CliError::core)?;
    let droop_secs = clock.elapsed().as_secs_f64();
    let droop_params = droop.params(&case).map_err(CliError::core)?;
    log::info!("droop gains {:?}", droop.gains);

    let clock = std::time::Instant::now();
    let bptt = if cs.warm_start {
        let init = MonotoneParams::droop_embedded(&case, &droop.gains, tc.m, cs.warm_start_spacing).map_err(CliError::core)?;
        train::train_from(&case, &tc, init)
    } else {
        train::train(&case, &tc)
    }
    .map_err(CliError::core)?;
    let bptt_secs = clock.elapsed().as_secs_f64();

    let clock = std::time::Instant::now();
    let pg = train::train_pg(&case, &tc, &cfg.pg).map_err(CliError::core)?;
    let pg_secs = clock.elapsed().as_secs_f64();

    art.write_json("droop.json", &droop)?;
    write_training(&mut art, &bptt, "params_bptt.json", "loss_bptt.csv")?;
    write_training(&mut art, &pg, "params_pg.json", "loss_pg.csv")?;

    let center = operating_point(&case).map_err(CliError::core)?;
    let gamma = tc.gamma_vec(case.n);
    let mut rows = Vec::new();
    let mut bptt_diverged = 0;
    for (j, &wbar) in cs.omega_bars_hz.iter().enumerate() {
        let ranges = InitSpec { delta_half_width: cs.delta_half_width, omega_half_width_hz: wbar };
        let inits = sweep_inits(&case, &center, &ranges, cs.test_batch, tc.seed, j as u64);
        let eval = |c: &MonotoneParams| evaluate(&case, c, &inits, tc.stages, tc.dt, &gamma);
        let (lb, db) = eval(&bptt.params);
        bptt_diverged += db;
        let floor = inits
            .iter()
            .map(|s| s.omega.iter().map(|w| w.abs()).sum::<f64>())
            .sum::<f64>()
            / inits.len().max(1) as f64;
        rows.push(SweepRow {
            omega_bar_hz: wbar,
            bptt: lb.total,
            droop: eval(&droop_params).0.total,
            pg: eval(&pg.params).0.total,
            floor,
        });
    }
    let sum = |f: fn(&SweepRow) -> f64| rows.iter().map(f).sum::<f64>();
    let (sb, sd, sp, sf) = (sum(|r| r.bptt), sum(|r| r.droop), sum(|r| r.pg), sum(|r| r.floor));
    let mut table = String::from("omega_bar_hz,bptt,droop,pg,floor\n");
    for r in &rows {
        writeln!(table, "{},{},{},{},{}", r.omega_bar_hz, r.bptt, r.droop, r.pg, r.floor).unwrap();
    }
    art.write("loss_table.csv", table)?;

    let controllers: [(&str, &dyn Controller); 3] =
        [("bptt", &bptt.params), ("droop", &droop_params), ("pg", &pg.params)];
    for (name, c) in controllers {
        let eq = stablefreq_core::Equilibrium::compute(&case, c).map_err(CliError::core)?;
        let omega0 = vec![eq.omega_star; case.n];
        let mut t = sim::rollout(&case, &eq.delta_star, &omega0, c, cs.step_load_steps, tc.dt, &[cs.step_load]);
        t.scenario.label = format!("step load, {name}");
        write_trajectory(&mut art, &case, &format!("step_load_{name}"), &t)?;
    }

    let summary = CompareSummary {
        rows,
        droop_gains: droop.gains.clone(),
        improvement_vs_droop: 1.0 - sb / sd,
        improvement_vs_pg: 1.0 - sb / sp,
        improvement_ceiling_vs_droop: 1.0 - sf / sd,
        bptt_diverged,
        train_seconds: TrainSeconds { bptt: bptt_secs, droop: droop_secs, pg: pg_secs },
    };
    log::info!(
        "improvement vs droop {:.3}% (ceiling {:.3}%), vs pg {:.3}%",
        100.0 * summary.improvement_vs_droop,
        100.0 * summary.improvement_ceiling_vs_droop,
        100.0 * summary.improvement_vs_pg
    );
    // Wall-clock times would break byte-identical reruns; log them instead.
    log::info!("training seconds: {:?}", summary.train_seconds);
    let mut stable = serde_json::to_value(&summary).expect("summary serializes");
    stable.as_object_mut().unwrap().remove("train_seconds");
    art.write_json("summary.json", &stable)?;
    Ok(Outcome::ok(art.finish()?))
}

pub fn approx_fit(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let section = cfg
        .approx_fit
        .as_ref()
        .ok_or_else(|| CliError::Config("missing \"approx_fit\" section".into()))?;
    let target = section.target.clone();
    let fit = fit_monotone(|x| target.eval(x), section.x_lo, section.x_hi, section.grid_n).map_err(CliError::core)?;
    let mut art = start(cfg, "approx-fit")?;
    art.write_json("fit.json", &fit)?;
    let dense = 10 * section.grid_n;
    let mut csv = String::from("x,target,fit\n");
    for k in 0..=dense {
        let x = section.x_lo + (section.x_hi - section.x_lo) * k as f64 / dense as f64;
        writeln!(csv, "{x},{},{}", target.eval(x), fit.params.eval(x)).unwrap();
    }
    art.write("fit.csv", csv)?;
    log::info!("sup error {:.3e} (bound {:.3e})", fit.sup_error, fit.error_bound);
    Ok(Outcome::ok(art.finish()?))
}
