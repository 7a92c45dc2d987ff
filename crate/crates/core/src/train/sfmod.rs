//! Spot plus rolling front-month forward model.

use serde::{Deserialize, Serialize};

use super::{fit, TrainConfig, TrainError, TrainingLog};
use crate::episode::{simulate, ScenarioPath};
use crate::market::ScenarioSet;
use crate::policy::{Architecture, PolicyParams};
use crate::storage::{EpisodeLedger, StorageSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SfmodConfig {
    #[serde(flatten)]
    pub base: TrainConfig,
    /// Forward liquidity cap as a fraction of capacity per month.
    pub alpha: f64,
}

impl Default for SfmodConfig {
    fn default() -> Self {
        Self::reference_sfmod()
    }
}

impl SfmodConfig {
    /// As the spot-only defaults with batch size 100, risk aversion 10 and
    /// `alpha = 0.5`.
    pub fn reference_sfmod() -> Self {
        Self {
            base: TrainConfig {
                batch_size: 100,
                risk_aversion: 10.0,
                ..TrainConfig::reference_smod()
            },
            alpha: 0.5,
        }
    }

    pub fn validate(&self, available: usize) -> Result<(), TrainError> {
        let mut errors = self.base.problems(available);
        if !(0.0..=1.0).contains(&self.alpha) {
            errors.push(format!("alpha {} must lie in [0, 1]", self.alpha));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(errors))
        }
    }
}

/// Runs one episode trading spot and the front-month forward; returns the
/// ledger and terminal wealth of both legs.
pub fn simulate_episode_sfmod(
    params: &PolicyParams,
    scenarios: &ScenarioSet,
    scenario: usize,
    spec: &StorageSpec,
) -> Result<(EpisodeLedger, f64), TrainError> {
    let path = ScenarioPath::from_set(scenarios, scenario, true)?;
    let ledger = simulate(params, spec, scenarios.calendar(), &path);
    let w = ledger.wealth;
    Ok((ledger, w))
}

/// Trains the two-head network. The storage spec's `alpha` is replaced by
/// `config.alpha`.
pub fn train_sfmod(
    config: &SfmodConfig,
    scenarios: &ScenarioSet,
    spec: &StorageSpec,
) -> Result<(PolicyParams, TrainingLog), TrainError> {
    config.validate(scenarios.scenarios())?;
    let spec = spec.clone().with_alpha(config.alpha)?;
    fit(
        &config.base,
        Architecture::spot_forward(config.base.hidden.clone()),
        scenarios,
        &spec,
        true,
    )
}
