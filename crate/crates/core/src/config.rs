//! Run configuration: every default the experiments use, in one TOML
//! document that can be dumped, edited and read back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{CaseSpec, DEFAULT_TUNING_BUDGET};
use crate::integrator::Precision;
use crate::synthetic::DatasetSpec;
use crate::training::{LossConfig, TrainConfig};

pub const DEFAULT_SEED: u64 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Threads for tuning sweeps and the `all` command.
    pub workers: usize,
    /// (Adam, L-BFGS) iterations per tuning trial.
    pub tuning_budget: (usize, usize),
    /// Base dataset; each case sets its own target time and noise.
    pub dataset: DatasetSpec,
    /// Collocation layout; each case sets its own loss weights.
    pub loss: LossConfig,
    /// Optimiser settings; each case sets its own learning rate and budget.
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            precision: Precision::F64,
            workers: 1,
            tuning_budget: DEFAULT_TUNING_BUDGET,
            dataset: DatasetSpec::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises")
    }

    pub fn case(&self, id: u8) -> Result<CaseSpec> {
        let train = TrainConfig {
            precision: self.precision,
            ..self.train.clone()
        };
        CaseSpec::with_defaults(id, self.seed, &self.dataset, &self.loss, &train, self.tuning_budget)
    }
}
