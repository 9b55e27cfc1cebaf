//! Universal differential equation model of soil organic carbon depth
//! profiles: advection-diffusion transport plus neural production and
//! respiration terms driven by soil-health covariates.

pub mod config;
pub mod error;
pub mod experiments;
mod fastmath;
pub mod gradient;
pub mod grid;
pub mod integrator;
pub mod io;
pub mod matrix;
pub mod nn;
pub mod pde;
pub mod report;
pub mod rng;
pub mod synthetic;
pub mod training;
pub mod tuning;

pub use error::{Error, Result};
pub use grid::{make_grid, DepthGrid, DriverSample, SocProfile, TransportParams};
pub use integrator::{integrate, safe_solve, IntegratorConfig, Method, Precision, SolveOutcome, SolveStatus};
pub use matrix::Matrix;
pub use nn::{init_params, Activation, MlpSpec, UdeParams};
pub use pde::{rhs, RhsContext};
pub use rng::RandomStream;
pub use synthetic::{build_dataset, Dataset, DatasetSpec, DriverField, NoiseKind, NoiseSpec};
pub use config::RunConfig;
pub use experiments::{run_case, CaseMetrics, CaseReport, CaseSpec, RunMode};
pub use training::{train, LossConfig, TrainConfig, TrainHistory};
pub use tuning::{run_search, SearchOutcome, SearchSpace};
