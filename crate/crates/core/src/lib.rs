//! Monotone neural frequency controllers for swing-equation networks, with
//! an executable Lyapunov certificate and BPTT training.
//!
//! Internal units: angles in rad, frequency deviations in rad/s, power in
//! per-unit. Hz only appears at I/O boundaries.

pub mod controller;
pub mod error;
pub mod linalg;
pub mod lyapunov;
pub mod power_net;
pub mod rng;
pub mod sim;
pub mod train;

pub use controller::{
    fit_monotone, AnyController, BusParams, Controller, ControllerFile, InitConfig, MonotoneFit, MonotoneParams,
    ParamsFile, TabulatedController,
};
pub use error::{Error, Result};
pub use lyapunov::{certify_controller, CertifyOptions, LyapunovReport, Verdict};
pub use power_net::{bundled, load_case, CaseFile, Equilibrium, NetworkCase};
pub use sim::{DisturbanceEvent, InitSpec, InitState, Integrator, RolloutOptions, Trajectory};
pub use train::{fit_droop, train, train_pg, DroopConfig, DroopFit, EpisodeLog, LossBreakdown, PgConfig, TrainConfig, TrainOutcome};
