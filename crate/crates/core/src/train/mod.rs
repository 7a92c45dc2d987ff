//! Policy training by Adam on the negative expected exponential utility of
//! terminal wealth.
//!
//! Wealth enters the utility in numéraire units, `x = W / N - w * v / c`,
//! where `N` defaults to `c` times the mean training spot price, `v` is the
//! episode's constraint violation in MWh and `w` the penalty weight.

mod sfmod;
mod smod;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adam::{AdamState, StepOutcome};
use crate::autodiff::{Backend, Eval, Tape, TapeError, Var};
use crate::episode::{run, NetworkActor, ScenarioPath};
use crate::market::{Calendar, MarketError, ScenarioSet};
use crate::policy::{Architecture, NormStats, PolicyError, PolicyParams, SubnetScheme};
use crate::report::{PnLReport, ReportError};
use crate::storage::{EpisodeLedger, StorageError, StorageSpec};

pub use sfmod::{simulate_episode_sfmod, train_sfmod, SfmodConfig};
pub use smod::{simulate_episode_smod, train_smod};

/// Largest exponent evaluated exactly inside the utility. Beyond it the
/// exponential is continued by its tangent line.
pub const MAX_EXPONENT: f64 = 50.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        last_good: Box<PolicyParams>,
    },
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub risk_aversion: f64,
    /// The first `train_count` scenarios train the network.
    pub train_count: usize,
    /// The next `val_count` scenarios select the best epoch.
    pub val_count: usize,
    pub seed: u64,
    /// Numéraire units per unit of violation relative to capacity.
    pub penalty_weight: f64,
    /// Wealth scale inside the utility; `None` uses `c` times the mean
    /// training spot price.
    pub numeraire: Option<f64>,
    /// Return the parameters of the best validation epoch instead of the last.
    pub keep_best: bool,
    pub hidden: Vec<usize>,
    pub subnets: SubnetScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::reference_smod()
    }
}

impl TrainConfig {
    /// 1000 epochs on 900 scenarios, validation on 100, learning rate 0.05,
    /// batch size 64, risk aversion 3, twelve monthly sub-networks with one
    /// hidden layer of 16 units.
    pub fn reference_smod() -> Self {
        Self {
            epochs: 1000,
            batch_size: 64,
            learning_rate: 0.05,
            risk_aversion: 3.0,
            train_count: 900,
            val_count: 100,
            seed: 0,
            penalty_weight: 10.0,
            numeraire: None,
            keep_best: true,
            hidden: vec![16],
            subnets: SubnetScheme::Monthly,
        }
    }

    /// Lists every violated constraint; `available` is the number of scenarios.
    pub fn validate(&self, available: usize) -> Result<(), TrainError> {
        let errors = self.problems(available);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(errors))
        }
    }

    pub(crate) fn problems(&self, available: usize) -> Vec<String> {
        let mut e = Vec::new();
        if self.epochs == 0 {
            e.push("epochs must be at least 1".to_string());
        }
        if self.train_count == 0 {
            e.push("train_count must be at least 1".to_string());
        }
        if self.batch_size == 0 || self.batch_size > self.train_count {
            e.push(format!(
                "batch_size {} must lie in 1..={}",
                self.batch_size, self.train_count
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            e.push(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(self.risk_aversion > 0.0 && self.risk_aversion.is_finite()) {
            e.push(format!(
                "risk_aversion {} must be positive",
                self.risk_aversion
            ));
        }
        if !(self.penalty_weight > 0.0 && self.penalty_weight.is_finite()) {
            e.push(format!(
                "penalty_weight {} must be positive",
                self.penalty_weight
            ));
        }
        if let Some(n) = self.numeraire {
            if !(n > 0.0 && n.is_finite()) {
                e.push(format!("numeraire {n} must be positive"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            e.push(
                "hidden layer widths must be positive and at least one layer is required"
                    .to_string(),
            );
        }
        if self.train_count + self.val_count > available {
            e.push(format!(
                "train_count + val_count = {} exceeds the {available} available scenarios",
                self.train_count + self.val_count
            ));
        }
        e
    }
}

/// `U(x) = (1 - exp(-r x)) / r`, continued linearly for `-r x > MAX_EXPONENT`.
pub fn exp_utility(x: f64, r: f64) -> f64 {
    exp_utility_on(&mut Eval, x, r).0
}

/// Utility on a backend; the flag reports whether the exponent was clamped.
pub fn exp_utility_on<B: Backend>(b: &mut B, x: B::Value, r: f64) -> (B::Value, bool) {
    let e = b.scale(x, -r);
    let clamped = b.value(e) > MAX_EXPONENT;
    let ex = if clamped {
        let tangent = b.offset(e, 1.0 - MAX_EXPONENT);
        b.scale(tangent, MAX_EXPONENT.exp())
    } else {
        b.exp(e)
    };
    let neg = b.scale(ex, -1.0 / r);
    (b.offset(neg, 1.0 / r), clamped)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean negative utility over the epoch's training batches.
    pub train_loss: f64,
    pub train_utility: f64,
    /// Mean terminal P&L of the training episodes seen in the epoch.
    pub mean_pnl: f64,
    pub val_loss: Option<f64>,
    pub val_utility: Option<f64>,
    pub val_mean_pnl: Option<f64>,
    pub skipped_steps: u64,
    pub clamped_utilities: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub selected_epoch: usize,
    pub numeraire: f64,
}

impl TrainingLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())
    }
}

/// Objective constants shared by every episode of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub risk_aversion: f64,
    pub numeraire: f64,
    pub penalty_weight: f64,
    pub capacity: f64,
}

impl Objective {
    fn scaled_wealth<B: Backend>(
        &self,
        b: &mut B,
        wealth: B::Value,
        violation: B::Value,
    ) -> B::Value {
        let x = b.scale(wealth, 1.0 / self.numeraire);
        let per_c = if self.capacity > 0.0 {
            1.0 / self.capacity
        } else {
            1.0
        };
        let pen = b.scale(violation, self.penalty_weight * per_c);
        b.sub(x, pen)
    }

    /// Negative utility on a backend; the flag reports a clamped exponent.
    pub fn loss_on<B: Backend>(
        &self,
        b: &mut B,
        wealth: B::Value,
        violation: B::Value,
    ) -> (B::Value, bool) {
        let x = self.scaled_wealth(b, wealth, violation);
        let (u, clamped) = exp_utility_on(b, x, self.risk_aversion);
        (b.scale(u, -1.0), clamped)
    }
}

/// Loss and terminal P&L of one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeScore {
    pub loss: f64,
    pub pnl: f64,
    pub clamped: bool,
}

/// Loss of one episode and its gradient with respect to `theta`.
pub fn episode_gradient(
    tape: &mut Tape,
    params: &PolicyParams,
    spec: &StorageSpec,
    calendar: &Calendar,
    path: &ScenarioPath,
    trade: bool,
    obj: &Objective,
) -> Result<(EpisodeScore, Vec<f64>), TrainError> {
    tape.clear();
    let theta: Vec<Var> = params.theta().iter().map(|&t| tape.leaf(t)).collect();
    let mut actor = NetworkActor::<Tape> {
        params,
        theta: &theta,
    };
    let out = run(tape, spec, calendar, path, &mut actor, trade);
    let (loss, clamped) = obj.loss_on(tape, out.wealth, out.violation);
    let score = EpisodeScore {
        loss: tape.value(loss),
        pnl: out.ledger.wealth,
        clamped,
    };
    let grads = tape.backward(loss)?;
    let g = match theta.first() {
        Some(&first) => grads.range(first, theta.len()).to_vec(),
        None => Vec::new(),
    };
    Ok((score, g))
}

/// Loss and P&L of one episode without gradients.
pub fn episode_score(
    params: &PolicyParams,
    spec: &StorageSpec,
    calendar: &Calendar,
    path: &ScenarioPath,
    trade: bool,
    obj: &Objective,
) -> (EpisodeScore, EpisodeLedger) {
    let mut actor = NetworkActor::<Eval> {
        params,
        theta: params.theta(),
    };
    let out = run(&mut Eval, spec, calendar, path, &mut actor, trade);
    let (loss, clamped) = obj.loss_on(&mut Eval, out.wealth, out.violation);
    (
        EpisodeScore {
            loss,
            pnl: out.ledger.wealth,
            clamped,
        },
        out.ledger,
    )
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut n, mut s) = (0usize, 0.0);
    for v in values {
        n += 1;
        s += v;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Normalization statistics from the training rows only.
pub fn fit_norm(train: &[ScenarioPath], spec: &StorageSpec, trade: bool) -> NormStats {
    let spot: Vec<f64> = train.iter().flat_map(|p| p.spot.iter().copied()).collect();
    let forward: Option<Vec<f64>> = trade.then(|| {
        train
            .iter()
            .flat_map(|p| {
                p.spot
                    .iter()
                    .enumerate()
                    .map(move |(k, &s)| p.front.get(k).copied().flatten().map_or(s, |f| f.0))
            })
            .collect()
    });
    NormStats::fit(spec.days(), spec.capacity(), &spot, forward.as_deref())
}

fn default_numeraire(train: &[ScenarioPath], spec: &StorageSpec) -> f64 {
    let m = mean(train.iter().flat_map(|p| p.spot.iter().copied()));
    let n = spec.capacity() * m;
    if n > 0.0 && n.is_finite() {
        n
    } else {
        1.0
    }
}

/// Shared training loop for both models.
pub(crate) fn fit(
    config: &TrainConfig,
    arch: Architecture,
    scenarios: &ScenarioSet,
    spec: &StorageSpec,
    trade: bool,
) -> Result<(PolicyParams, TrainingLog), TrainError> {
    let mut problems = config.problems(scenarios.scenarios());
    if scenarios.days() != spec.days() {
        problems.push(format!(
            "scenarios have {} days but the storage spec has {}",
            scenarios.days(),
            spec.days()
        ));
    }
    if trade && !scenarios.has_forwards() {
        problems.push("forward trading requires forward curves in the scenario set".to_string());
    }
    if !problems.is_empty() {
        return Err(TrainError::Config(problems));
    }
    let calendar = scenarios.calendar();
    let train = ScenarioPath::all(&scenarios.rows(0, config.train_count), trade)?;
    let val = ScenarioPath::all(&scenarios.rows(config.train_count, config.val_count), trade)?;

    let norm = fit_norm(&train, spec, trade);
    let day_map = config.subnets.day_map(calendar);
    let mut params = PolicyParams::init(arch, day_map, norm, config.seed)?;
    let obj = Objective {
        risk_aversion: config.risk_aversion,
        numeraire: config
            .numeraire
            .unwrap_or_else(|| default_numeraire(&train, spec)),
        penalty_weight: config.penalty_weight,
        capacity: spec.capacity(),
    };

    let n_params = params.theta().len();
    let mut adam = AdamState::new(n_params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog {
        numeraire: obj.numeraire,
        ..Default::default()
    };
    let mut best: Option<(f64, usize, PolicyParams)> = None;
    let mut grad = vec![0.0; n_params];

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let skipped_before = adam.incidents;
        let mut losses = Vec::with_capacity(train.len());
        let mut pnls = Vec::with_capacity(train.len());
        let mut clamped = 0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(EpisodeScore, Vec<f64>), TrainError>> = batch
                .par_iter()
                .map_init(Tape::new, |tape, &i| {
                    episode_gradient(tape, &params, spec, calendar, &train[i], trade, &obj)
                })
                .collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let inv = 1.0 / batch.len() as f64;
            for r in results {
                let (score, g) = r?;
                losses.push(score.loss);
                pnls.push(score.pnl);
                clamped += score.clamped as usize;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi * inv;
                }
            }
            let snapshot = params.clone();
            if adam.step(params.theta_mut(), &grad, config.learning_rate)
                == StepOutcome::SkippedNonFinite
            {
                log::warn!("epoch {epoch}: non-finite gradient, step skipped");
            }
            if params.theta().iter().any(|t| !t.is_finite()) {
                return Err(TrainError::Diverged {
                    epoch,
                    reason: "non-finite parameters".into(),
                    last_good: Box::new(snapshot),
                });
            }
        }
        let train_loss = mean(losses.iter().copied());
        if !train_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                reason: format!("training loss {train_loss}"),
                last_good: Box::new(best.map_or(params, |b| b.2)),
            });
        }

        let (val_loss, val_pnl, select_loss) = if val.is_empty() {
            (None, None, train_loss)
        } else {
            let scores: Vec<EpisodeScore> = val
                .par_iter()
                .map(|p| episode_score(&params, spec, calendar, p, trade, &obj).0)
                .collect();
            clamped += scores.iter().filter(|s| s.clamped).count();
            let l = mean(scores.iter().map(|s| s.loss));
            (Some(l), Some(mean(scores.iter().map(|s| s.pnl))), l)
        };
        if best.as_ref().is_none_or(|b| select_loss < b.0) {
            best = Some((select_loss, epoch, params.clone()));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            train_utility: -train_loss,
            mean_pnl: mean(pnls.iter().copied()),
            val_loss,
            val_utility: val_loss.map(|l| -l),
            val_mean_pnl: val_pnl,
            skipped_steps: adam.incidents - skipped_before,
            clamped_utilities: clamped,
        };
        log::debug!(
            "epoch {epoch}: train loss {:.6}, mean pnl {:.2}",
            record.train_loss,
            record.mean_pnl
        );
        log.records.push(record);
    }

    let params = match best {
        Some((_, epoch, p)) if config.keep_best => {
            log.selected_epoch = epoch;
            p
        }
        _ => {
            log.selected_epoch = config.epochs - 1;
            params
        }
    };
    Ok((params, log))
}

/// Simulates every scenario with the policy and summarizes terminal P&L.
pub fn evaluate(
    params: &PolicyParams,
    scenarios: &ScenarioSet,
    spec: &StorageSpec,
) -> Result<PnLReport, TrainError> {
    let ledgers = simulate_all(params, scenarios, spec)?;
    Ok(PnLReport::from_ledgers(
        model_label(params),
        &ledgers,
        spec.capacity(),
        crate::report::DEFAULT_BINS,
    )?)
}

/// Episode ledgers of every scenario, in scenario order.
pub fn simulate_all(
    params: &PolicyParams,
    scenarios: &ScenarioSet,
    spec: &StorageSpec,
) -> Result<Vec<EpisodeLedger>, TrainError> {
    let trade = params.output_dim() == 2;
    if params.days() != scenarios.days() || spec.days() != scenarios.days() {
        return Err(TrainError::Config(vec![format!(
            "policy covers {} days, storage {} days, scenarios {} days",
            params.days(),
            spec.days(),
            scenarios.days()
        )]));
    }
    if trade && !scenarios.has_forwards() {
        return Err(TrainError::Config(vec![
            "forward policy requires forward curves in the scenario set".to_string(),
        ]));
    }
    let paths = ScenarioPath::all(scenarios, trade)?;
    let calendar = scenarios.calendar();
    Ok(paths
        .par_iter()
        .map(|p| crate::episode::simulate(params, spec, calendar, p))
        .collect())
}

fn model_label(params: &PolicyParams) -> &'static str {
    if params.output_dim() == 2 {
        "sfmod"
    } else {
        "smod"
    }
}
