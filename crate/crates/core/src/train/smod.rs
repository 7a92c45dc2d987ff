//! Spot-only model.

use super::{fit, TrainConfig, TrainError, TrainingLog};
use crate::episode::{simulate, ScenarioPath};
use crate::market::{Calendar, ScenarioSet};
use crate::policy::{Architecture, PolicyParams};
use crate::storage::{EpisodeLedger, StorageSpec};

/// Runs one spot-only episode; returns the ledger and terminal wealth.
pub fn simulate_episode_smod(
    params: &PolicyParams,
    spot: &[f64],
    spec: &StorageSpec,
    calendar: &Calendar,
) -> (EpisodeLedger, f64) {
    let ledger = simulate(
        params,
        spec,
        calendar,
        &ScenarioPath::spot_only(spot.to_vec()),
    );
    let w = ledger.wealth;
    (ledger, w)
}

/// Trains the spot-only network.
pub fn train_smod(
    config: &TrainConfig,
    scenarios: &ScenarioSet,
    spec: &StorageSpec,
) -> Result<(PolicyParams, TrainingLog), TrainError> {
    fit(
        config,
        Architecture::spot(config.hidden.clone()),
        scenarios,
        spec,
        false,
    )
}
