//! TOML configuration schema: one section per component config, every field
//! optional with the shipped defaults.

use serde::{Deserialize, Serialize};

use rawgrl::net::ScenarioConfig;
use rawgrl::online::OnlineConfig;
use rawgrl::sim::MacConfig;
use rawgrl::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub realizations: usize,
    pub sim_slots: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { realizations: 1000, sim_slots: 2000, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub scenario: ScenarioConfig,
    pub mac: MacConfig,
    pub train: TrainConfig,
    pub online: OnlineConfig,
    pub eval: EvalConfig,
}

impl AppConfig {
    pub fn validate(&self) -> rawgrl::Result<()> {
        self.scenario.validate()?;
        self.mac.validate()?;
        self.train.validate()?;
        if self.eval.realizations == 0 {
            return Err(rawgrl::Error::InvalidArgument(
                "eval.realizations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}
