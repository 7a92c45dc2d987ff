//! Least-squares Monte-Carlo benchmark for the spot-only problem.
//!
//! Backward induction over a per-day storage grid
//! `{0, t_k / (G - 1), ..., t_k}` with `t_k = min(c, sum_{j >= k} |l_j|)`,
//! so every node can still be emptied by maturity. For each day `k` and each
//! node `g'` of day `k + 1` the realized values `V_{k+1}(g', i)` are regressed
//! on a standardized polynomial in `S_k^i`. At a node the action maximizes
//! immediate cash plus the continuation estimate, linearly interpolated in the
//! next level; the realized value of that action feeds the next regression.
//!
//! Candidate actions are the interval ends, zero, an even grid of
//! `action_grid_size` points and every action landing exactly on a node of
//! the next grid. With linear interpolation and no transaction cost the
//! objective is piecewise linear in the action with kinks only at those
//! nodes, so the choice is exact over the whole interval.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Eval;
use crate::episode::{run, Actor, Decision, ScenarioPath};
use crate::market::{Calendar, ScenarioSet};
use crate::policy::Features;
use crate::report::{PnLReport, ReportError, DEFAULT_BINS};
use crate::storage::{
    aggregate_bounds, terminal_reachable, Bounds, EpisodeLedger, StorageSpec, WithdrawalOverride,
};

const FORMAT: &str = "gas-storage-lsmc";
const VERSION: u32 = 1;
const MAX_RIDGE_RETRIES: usize = 30;

#[derive(Debug, Error)]
pub enum LsmcError {
    #[error("invalid LSMC configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("policy table covers {table} days with capacity {table_capacity}, storage has {days} days and capacity {capacity}")]
    Mismatch {
        table: usize,
        table_capacity: f64,
        days: usize,
        capacity: f64,
    },
    #[error("regression on day {day} stayed singular after {MAX_RIDGE_RETRIES} ridge increases")]
    Singular { day: usize },
    #[error("policy table file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Report(#[from] ReportError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsmcConfig {
    pub storage_grid_size: usize,
    pub action_grid_size: usize,
    pub basis_degree: usize,
    /// Ridge penalty per scenario on the non-constant basis coefficients.
    pub regularization: f64,
}

impl Default for LsmcConfig {
    fn default() -> Self {
        Self {
            storage_grid_size: 101,
            action_grid_size: 11,
            basis_degree: 3,
            regularization: 1e-8,
        }
    }
}

impl LsmcConfig {
    pub fn validate(&self) -> Result<(), LsmcError> {
        let errors = self.problems();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(LsmcError::Config(errors))
        }
    }

    pub(crate) fn problems(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.storage_grid_size < 2 {
            e.push(format!(
                "storage_grid_size {} must be at least 2",
                self.storage_grid_size
            ));
        }
        if self.action_grid_size < 2 {
            e.push(format!(
                "action_grid_size {} must be at least 2",
                self.action_grid_size
            ));
        }
        if self.basis_degree < 1 {
            e.push("basis_degree must be at least 1".to_string());
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            e.push(format!(
                "regularization {} must be nonnegative",
                self.regularization
            ));
        }
        e
    }
}

/// Fitted continuation regressions, enough to replay the policy on any
/// scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsmcPolicy {
    format: String,
    version: u32,
    config: LsmcConfig,
    capacity: f64,
    /// Top of the storage grid per day `0..=K`.
    grid_top: Vec<f64>,
    /// Per day `k < K`: `(degree + 1) x G` coefficients, column-major by node
    /// of day `k + 1`.
    coefficients: Vec<Vec<f64>>,
    basis_shift: Vec<f64>,
    basis_scale: Vec<f64>,
    /// Ridge increases needed to factor singular regressions.
    pub incidents: usize,
}

/// Result of [`lsmc_solve`].
#[derive(Debug, Clone)]
pub struct LsmcSolution {
    pub policy: LsmcPolicy,
    /// Terminal P&L of the greedy replay on the fitting scenarios.
    pub pnl: Vec<f64>,
    pub ledgers: Vec<EpisodeLedger>,
    /// Mean realized value at day 0 from the backward sweep.
    pub backward_value: f64,
}

fn node(top: f64, g: usize, nodes: usize) -> f64 {
    if g + 1 == nodes {
        top
    } else {
        top * g as f64 / (nodes - 1) as f64
    }
}

/// Linear interpolation of node values on `[0, top]`.
fn interpolate(values: &[f64], top: f64, level: f64) -> f64 {
    let n = values.len();
    if top <= 0.0 {
        return values[0];
    }
    let pos = (level / top * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
    let i = (pos.floor() as usize).min(n - 2);
    let w = pos - i as f64;
    values[i] + w * (values[i + 1] - values[i])
}

/// Admissible spot interval with the reachability guard and override.
fn admissible(spec: &StorageSpec, level: f64, day: usize, forced: bool) -> Bounds {
    let (lo, hi) = aggregate_bounds(&mut Eval, spec, level, day);
    let hi = hi.min(spec.drain_capacity(day + 1) - level);
    let hi = if forced || hi < lo { lo } else { hi };
    Bounds { lo, hi }
}

fn immediate_cash(action: f64, price: f64, kappa: f64) -> f64 {
    let mut cash = -action * price;
    if kappa != 0.0 {
        cash -= (action * price).abs() * kappa;
    }
    cash
}

/// Greedy action at `level` given next-day continuation node values.
fn best_action(
    spec: &StorageSpec,
    level: f64,
    price: f64,
    bounds: Bounds,
    continuation: &[f64],
    next_top: f64,
    action_grid: usize,
) -> f64 {
    let Bounds { lo, hi } = bounds;
    let score = |a: f64| {
        immediate_cash(a, price, spec.kappa()) + interpolate(continuation, next_top, level + a)
    };
    // Idling wins ties; others must improve by more than rounding noise.
    let start = if lo <= 0.0 && hi >= 0.0 { 0.0 } else { lo };
    let mut best = (start, score(start));
    let mut consider = |a: f64| {
        let s = score(a);
        if s > best.1 + 1e-12 * (best.1.abs() + s.abs() + 1.0) {
            best = (a, s);
        }
    };
    consider(lo);
    consider(hi);
    if hi > lo {
        for m in 1..action_grid - 1 {
            consider(lo + (hi - lo) * m as f64 / (action_grid - 1) as f64);
        }
        let nodes = continuation.len();
        if next_top > 0.0 {
            let step = next_top / (nodes - 1) as f64;
            let first = ((level + lo) / step).ceil().max(0.0) as usize;
            let last = (((level + hi) / step).floor() as usize).min(nodes - 1);
            for g in first..=last {
                let a = node(next_top, g, nodes) - level;
                if a > lo && a < hi {
                    consider(a);
                }
            }
        }
    }
    best.0
}

impl LsmcPolicy {
    pub fn config(&self) -> &LsmcConfig {
        &self.config
    }

    pub fn days(&self) -> usize {
        self.coefficients.len()
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    fn basis(&self, day: usize, price: f64, out: &mut [f64]) {
        let z = (price - self.basis_shift[day]) / self.basis_scale[day];
        let mut p = 1.0;
        for o in out.iter_mut() {
            *o = p;
            p *= z;
        }
    }

    /// Estimated values at the day `day + 1` grid nodes given `S_day`.
    pub fn continuation(&self, day: usize, price: f64) -> Vec<f64> {
        let dim = self.config.basis_degree + 1;
        let mut phi = vec![0.0; dim];
        self.basis(day, price, &mut phi);
        self.coefficients[day]
            .chunks(dim)
            .map(|beta| beta.iter().zip(&phi).map(|(b, x)| b * x).sum())
            .collect()
    }

    /// Greedy spot action at the actual level.
    pub fn action(
        &self,
        spec: &StorageSpec,
        day: usize,
        level: f64,
        price: f64,
        forced: bool,
    ) -> f64 {
        let bounds = admissible(spec, level, day, forced);
        let cont = self.continuation(day, price);
        best_action(
            spec,
            level,
            price,
            bounds,
            &cont,
            self.grid_top[day + 1],
            self.config.action_grid_size,
        )
    }

    fn check(&self, spec: &StorageSpec) -> Result<(), LsmcError> {
        if self.days() != spec.days() || self.capacity != spec.capacity() {
            return Err(LsmcError::Mismatch {
                table: self.days(),
                table_capacity: self.capacity,
                days: spec.days(),
                capacity: spec.capacity(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), LsmcError> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LsmcError> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if p.format != FORMAT || p.version != VERSION {
            return Err(LsmcError::Format(format!(
                "expected {FORMAT} version {VERSION}, found {} version {}",
                p.format, p.version
            )));
        }
        if p.config.validate().is_err()
            || p.grid_top.len() != p.coefficients.len() + 1
            || p.basis_shift.len() != p.coefficients.len()
            || p.basis_scale.len() != p.coefficients.len()
            || p.coefficients
                .iter()
                .any(|c| c.len() != (p.config.basis_degree + 1) * p.config.storage_grid_size)
        {
            return Err(LsmcError::Format("inconsistent table dimensions".into()));
        }
        Ok(p)
    }
}

struct LsmcActor<'a> {
    policy: &'a LsmcPolicy,
    spec: &'a StorageSpec,
    over: WithdrawalOverride,
}

impl Actor<Eval> for LsmcActor<'_> {
    fn decide(&mut self, _b: &mut Eval, f: &Features, level: f64) -> Decision<f64> {
        let forced = self
            .over
            .update(terminal_reachable(self.spec, level, f.day + 1));
        Decision::Fixed {
            spot: self.policy.action(self.spec, f.day, level, f.spot, forced),
            forward: 0.0,
        }
    }
}

fn replay_all(
    policy: &LsmcPolicy,
    spec: &StorageSpec,
    calendar: &Calendar,
    set: &ScenarioSet,
) -> Vec<EpisodeLedger> {
    (0..set.scenarios())
        .into_par_iter()
        .map(|i| {
            let path = ScenarioPath::spot_only(set.spot_row(i).to_vec());
            let mut actor = LsmcActor {
                policy,
                spec,
                over: WithdrawalOverride::default(),
            };
            run(&mut Eval, spec, calendar, &path, &mut actor, false).ledger
        })
        .collect()
}

/// Ridge least squares for all right-hand sides at once; returns
/// coefficients per column of `y` and the number of ridge increases.
fn regress(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    ridge: f64,
    day: usize,
) -> Result<(DMatrix<f64>, usize), LsmcError> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let m = x.nrows() as f64;
    let mut lambda = ridge;
    for attempt in 0..=MAX_RIDGE_RETRIES {
        let mut a = xtx.clone();
        for j in 1..a.nrows() {
            a[(j, j)] += lambda * m;
        }
        if let Some(chol) = a.cholesky() {
            let diag = chol.l_dirty().diagonal();
            let (min, max) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), d| {
                (lo.min(*d), hi.max(*d))
            });
            let beta = chol.solve(&xty);
            if min > 1e-7 * max && beta.iter().all(|b| b.is_finite()) {
                return Ok((beta, attempt));
            }
        }
        lambda = (lambda * 10.0).max(1e-10);
        log::warn!("day {day}: singular regression, ridge raised to {lambda}");
    }
    Err(LsmcError::Singular { day })
}

/// Fits the policy on `scenarios` and replays it on the same scenarios.
pub fn lsmc_solve(
    scenarios: &ScenarioSet,
    spec: &StorageSpec,
    config: &LsmcConfig,
) -> Result<LsmcSolution, LsmcError> {
    let mut problems = config.problems();
    if scenarios.days() != spec.days() {
        problems.push(format!(
            "scenarios have {} days but the storage spec has {}",
            scenarios.days(),
            spec.days()
        ));
    }
    if !problems.is_empty() {
        return Err(LsmcError::Config(problems));
    }
    let days = spec.days();
    let m = scenarios.scenarios();
    let nodes = config.storage_grid_size;
    let dim = config.basis_degree + 1;
    let grid_top: Vec<f64> = (0..=days).map(|k| spec.reachable_cap(k)).collect();

    let mut coefficients = vec![Vec::new(); days];
    let mut basis_shift = vec![0.0; days];
    let mut basis_scale = vec![1.0; days];
    let mut incidents = 0;
    // values[i * nodes + g] = realized value from node g of the next day.
    let mut values = vec![0.0; m * nodes];

    for k in (0..days).rev() {
        let prices: Vec<f64> = (0..m).map(|i| scenarios.spot(i, k)).collect();
        let mean = prices.iter().sum::<f64>() / m as f64;
        let var = prices.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / m as f64;
        let std = var.sqrt();
        let mut beta = DMatrix::zeros(dim, nodes);
        if m > 1 && std > 1e-12 * mean.abs().max(1.0) {
            basis_shift[k] = mean;
            basis_scale[k] = std;
            let x = DMatrix::from_fn(m, dim, |i, j| ((prices[i] - mean) / std).powi(j as i32));
            let y = DMatrix::from_fn(m, nodes, |i, g| values[i * nodes + g]);
            let (b, extra) = regress(&x, &y, config.regularization, k)?;
            incidents += extra;
            beta = b;
        } else {
            basis_shift[k] = mean;
            for g in 0..nodes {
                beta[(0, g)] = (0..m).map(|i| values[i * nodes + g]).sum::<f64>() / m as f64;
            }
        }
        coefficients[k] = beta.as_slice().to_vec();

        let (top, next_top) = (grid_top[k], grid_top[k + 1]);
        let coef = &coefficients[k];
        let (shift, scale) = (basis_shift[k], basis_scale[k]);
        let next: Vec<f64> = values
            .par_chunks(nodes)
            .enumerate()
            .flat_map_iter(|(i, realized)| {
                let price = prices[i];
                let z = (price - shift) / scale;
                let cont: Vec<f64> = coef
                    .chunks(dim)
                    .map(|b| {
                        let mut acc = 0.0;
                        let mut p = 1.0;
                        for bj in b {
                            acc += bj * p;
                            p *= z;
                        }
                        acc
                    })
                    .collect();
                let out: Vec<f64> = (0..nodes)
                    .map(|g| {
                        let level = node(top, g, nodes);
                        let forced = !terminal_reachable(spec, level, k + 1);
                        let bounds = admissible(spec, level, k, forced);
                        let a = best_action(
                            spec,
                            level,
                            price,
                            bounds,
                            &cont,
                            next_top,
                            config.action_grid_size,
                        );
                        immediate_cash(a, price, spec.kappa())
                            + interpolate(realized, next_top, level + a)
                    })
                    .collect();
                out
            })
            .collect();
        values = next;
    }
    let backward_value =
        (0..m).map(|i| values[i * nodes]).sum::<f64>() / m as f64 - spec.overhead();

    let policy = LsmcPolicy {
        format: FORMAT.into(),
        version: VERSION,
        config: config.clone(),
        capacity: spec.capacity(),
        grid_top,
        coefficients,
        basis_shift,
        basis_scale,
        incidents,
    };
    let ledgers = replay_all(&policy, spec, scenarios.calendar(), scenarios);
    Ok(LsmcSolution {
        pnl: ledgers.iter().map(|l| l.wealth).collect(),
        policy,
        ledgers,
        backward_value,
    })
}

/// Replays a fitted policy on (possibly fresh) scenarios.
pub fn lsmc_evaluate(
    policy: &LsmcPolicy,
    scenarios: &ScenarioSet,
    spec: &StorageSpec,
) -> Result<PnLReport, LsmcError> {
    let ledgers = lsmc_ledgers(policy, scenarios, spec)?;
    Ok(PnLReport::from_ledgers(
        "lsmc",
        &ledgers,
        spec.capacity(),
        DEFAULT_BINS,
    )?)
}

/// Episode ledgers of the greedy replay, in scenario order.
pub fn lsmc_ledgers(
    policy: &LsmcPolicy,
    scenarios: &ScenarioSet,
    spec: &StorageSpec,
) -> Result<Vec<EpisodeLedger>, LsmcError> {
    policy.check(spec)?;
    if scenarios.days() != spec.days() {
        return Err(LsmcError::Config(vec![format!(
            "scenarios have {} days but the storage spec has {}",
            scenarios.days(),
            spec.days()
        )]));
    }
    Ok(replay_all(policy, spec, scenarios.calendar(), scenarios))
}

/// Mean in-sample P&L for each `(storage grid, action grid)` pair.
pub fn refinement_study(
    scenarios: &ScenarioSet,
    spec: &StorageSpec,
    base: &LsmcConfig,
    grids: &[(usize, usize)],
) -> Result<Vec<f64>, LsmcError> {
    grids
        .iter()
        .map(|&(g, a)| {
            let config = LsmcConfig {
                storage_grid_size: g,
                action_grid_size: a,
                ..base.clone()
            };
            let sol = lsmc_solve(scenarios, spec, &config)?;
            Ok(sol.pnl.iter().sum::<f64>() / sol.pnl.len() as f64)
        })
        .collect()
}
