//! One pass of a trading strategy through one scenario.
//!
//! The same loop serves training (on a [`Tape`](crate::autodiff::Tape)),
//! evaluation (on [`Eval`]) and replay of recorded actions. Per day:
//!
//! 1. aggregate bounds `max(l_k, -H_k) <= h^S_k + d <= min(u_k, c - H_k)`;
//! 2. the upper bound is also capped at `sum_{j > k} |l_j| - H_k` so that
//!    `H_{k+1}` can always be drained by maturity;
//! 3. if `H_k > sum_{j > k} |l_j|` on any day, the override pins the action
//!    to its lower bound on that and every later day;
//! 4. the spot bounds are the aggregate bounds shifted by the delivery `d`;
//! 5. the forward action, when a contract is tradable, is mapped onto
//!    `[-alpha c / len_j, alpha c / len_j]` and accumulated into `d^j`;
//! 6. cash and level are updated.

use crate::autodiff::{Backend, Eval};
use crate::market::{Calendar, MarketError, ScenarioSet};
use crate::policy::{squash_on, Features, PolicyParams};
use crate::storage::{
    aggregate_bounds, terminal_reachable, Bounds, EpisodeLedger, StorageSpec, WithdrawalOverride,
};

/// Market data of one scenario as seen by the episode loop.
#[derive(Debug, Clone)]
pub struct ScenarioPath {
    pub spot: Vec<f64>,
    /// Front-month forward price and month per day, `None` where no forward is
    /// quoted. Empty for spot-only episodes.
    pub front: Vec<Option<(f64, usize)>>,
}

impl ScenarioPath {
    pub fn spot_only(spot: Vec<f64>) -> Self {
        Self {
            spot,
            front: Vec::new(),
        }
    }

    pub fn from_set(
        set: &ScenarioSet,
        scenario: usize,
        with_forwards: bool,
    ) -> Result<Self, MarketError> {
        let spot = set.spot_row(scenario).to_vec();
        let front = if with_forwards {
            (0..set.days())
                .map(|k| {
                    Ok(set
                        .rolling_front_month(scenario, k)?
                        .map(|f| (f.price, f.month)))
                })
                .collect::<Result<_, MarketError>>()?
        } else {
            Vec::new()
        };
        Ok(Self { spot, front })
    }

    pub fn all(set: &ScenarioSet, with_forwards: bool) -> Result<Vec<Self>, MarketError> {
        (0..set.scenarios())
            .map(|i| Self::from_set(set, i, with_forwards))
            .collect()
    }

    fn front_on(&self, day: usize) -> Option<(f64, usize)> {
        self.front.get(day).copied().flatten()
    }
}

/// What the strategy does on a day.
pub enum Decision<V> {
    /// Network outputs in `(0, 1)`, to be mapped onto the admissible intervals.
    Raw { spot: V, forward: Option<V> },
    /// Explicit actions (replay).
    Fixed { spot: f64, forward: f64 },
}

/// Source of daily decisions.
pub trait Actor<B: Backend> {
    fn decide(&mut self, b: &mut B, features: &Features, level: B::Value) -> Decision<B::Value>;
}

/// A policy network with its parameters already placed on the backend.
pub struct NetworkActor<'a, B: Backend> {
    pub params: &'a PolicyParams,
    pub theta: &'a [B::Value],
}

impl<B: Backend> Actor<B> for NetworkActor<'_, B> {
    fn decide(&mut self, b: &mut B, features: &Features, level: B::Value) -> Decision<B::Value> {
        let x = self.params.inputs(b, features, level);
        let out = self.params.forward_on(b, self.theta, features.day, &x);
        Decision::Raw {
            spot: out[0],
            forward: out.get(1).copied(),
        }
    }
}

/// Replays recorded actions.
pub struct ReplayActor<'a> {
    pub spot: &'a [f64],
    pub forward: &'a [f64],
}

impl<B: Backend> Actor<B> for ReplayActor<'_> {
    fn decide(&mut self, _b: &mut B, f: &Features, _level: B::Value) -> Decision<B::Value> {
        Decision::Fixed {
            spot: self.spot[f.day],
            forward: self.forward.get(f.day).copied().unwrap_or(0.0),
        }
    }
}

/// Result of one episode.
pub struct Outcome<V> {
    /// Terminal P&L (currency) as a backend value, overhead included.
    pub wealth: V,
    /// Constraint violation (MWh) as a backend value, zero when feasible.
    pub violation: V,
    pub ledger: EpisodeLedger,
}

/// Runs the daily loop. `trade_forwards` enables the front-month leg; it
/// requires `path.front` to be populated.
pub fn run<B: Backend, A: Actor<B>>(
    b: &mut B,
    spec: &StorageSpec,
    calendar: &Calendar,
    path: &ScenarioPath,
    actor: &mut A,
    trade_forwards: bool,
) -> Outcome<B::Value> {
    let days = spec.days();
    debug_assert_eq!(path.spot.len(), days);
    debug_assert_eq!(calendar.days(), days);
    let months = calendar.months();
    let tol = spec.daily_tol();

    let mut level = b.constant(0.0);
    let mut cash = b.constant(-spec.overhead());
    let mut deliveries: Vec<Option<B::Value>> = vec![None; months];
    let mut over = WithdrawalOverride::default();
    let mut violation = b.constant(0.0);

    let mut ledger = EpisodeLedger {
        levels: Vec::with_capacity(days + 1),
        spot_actions: Vec::with_capacity(days),
        forward_actions: Vec::with_capacity(days),
        forward_months: Vec::with_capacity(days),
        deliveries: vec![0.0; months],
        spot_bounds: Vec::with_capacity(days),
        cash_deltas: Vec::with_capacity(days),
        forced: Vec::with_capacity(days),
        infeasible_days: Vec::new(),
        overhead: spec.overhead(),
        wealth: 0.0,
        violation: 0.0,
    };
    ledger.levels.push(0.0);

    for k in 0..days {
        let month = calendar.month_of(k);
        // Deliveries of month j were fixed on day n_j - 1, before this loop
        // reaches month j.
        let delivery = deliveries[month];
        let (lo_agg, hi_agg) = aggregate_bounds(b, spec, level, k);
        let neg = b.scale(level, -1.0);
        let drain_room = b.offset(neg, spec.drain_capacity(k + 1));
        let mut hi_agg = b.min(hi_agg, drain_room);
        let h_now = b.value(level);
        let forced = over.update(terminal_reachable(spec, h_now, k + 1));
        if forced {
            hi_agg = lo_agg;
        }
        let (lo, mut hi) = match delivery {
            Some(d) => (b.sub(lo_agg, d), b.sub(hi_agg, d)),
            None => (lo_agg, hi_agg),
        };
        let (lo_v, hi_v) = (b.value(lo), b.value(hi));
        if lo_v > hi_v + tol {
            ledger.infeasible_days.push(k);
            ledger.violation += lo_v - hi_v;
            let gap = b.sub(lo, hi);
            violation = b.add(violation, gap);
            hi = lo;
        }

        let front = if trade_forwards {
            path.front_on(k)
        } else {
            None
        };
        let features = Features {
            day: k,
            level: h_now,
            spot: path.spot[k],
            forward: front.map(|(p, _)| p),
        };
        let decision = actor.decide(b, &features, level);

        // Contract J (delivering in the final month) is never traded.
        let tradable = front.filter(|&(_, j)| j + 1 < months);
        let (spot_action, forward_action) = match decision {
            Decision::Raw { spot, forward } => {
                let s = squash_on(b, spot, lo, hi);
                let f = match (tradable, forward) {
                    (Some((_, j)), Some(raw)) => {
                        let cap = spec.forward_cap(calendar.month_len(j));
                        let lo_f = b.constant(-cap);
                        let hi_f = b.constant(cap);
                        Some(squash_on(b, raw, lo_f, hi_f))
                    }
                    _ => None,
                };
                (s, f)
            }
            Decision::Fixed { spot, forward } => {
                let f = tradable.map(|_| b.constant(forward));
                (b.constant(spot), f)
            }
        };

        let spot_price = path.spot[k];
        let mut delta = b.scale(spot_action, -spot_price);
        if spec.kappa() != 0.0 {
            let flow = b.scale(spot_action, spot_price);
            let abs = b.abs(flow);
            let cost = b.scale(abs, spec.kappa());
            delta = b.sub(delta, cost);
        }
        let mut fwd_value = 0.0;
        let mut fwd_month = None;
        if let (Some(f), Some((price, j))) = (forward_action, tradable) {
            let notional = b.scale(f, price * calendar.month_len(j) as f64);
            delta = b.sub(delta, notional);
            deliveries[j] = Some(match deliveries[j] {
                Some(acc) => b.add(acc, f),
                None => f,
            });
            fwd_value = b.value(f);
            fwd_month = Some(j);
        }
        cash = b.add(cash, delta);
        let net = match delivery {
            Some(d) => b.add(spot_action, d),
            None => spot_action,
        };
        level = b.add(level, net);

        ledger.spot_actions.push(b.value(spot_action));
        ledger.forward_actions.push(fwd_value);
        ledger.forward_months.push(fwd_month);
        ledger.spot_bounds.push(Bounds {
            lo: b.value(lo),
            hi: b.value(hi),
        });
        ledger.cash_deltas.push(b.value(delta));
        ledger.forced.push(forced);
        ledger.levels.push(b.value(level));
    }

    for (j, d) in deliveries.iter().enumerate() {
        if let Some(d) = d {
            ledger.deliveries[j] = b.value(*d);
        }
    }
    let terminal = b.value(level);
    if terminal.abs() > spec.terminal_tol() {
        ledger.violation += terminal.abs();
        let residue = b.abs(level);
        violation = b.add(violation, residue);
    }
    ledger.wealth = b.value(cash);
    Outcome {
        wealth: cash,
        violation,
        ledger,
    }
}

/// Plain evaluation of a policy network on one scenario.
pub fn simulate(
    params: &PolicyParams,
    spec: &StorageSpec,
    calendar: &Calendar,
    path: &ScenarioPath,
) -> EpisodeLedger {
    let mut actor = NetworkActor::<Eval> {
        params,
        theta: params.theta(),
    };
    let trade = params.output_dim() == 2;
    run(&mut Eval, spec, calendar, path, &mut actor, trade).ledger
}

/// Re-simulates recorded actions. Forward actions on days without a
/// tradable contract are ignored.
pub fn replay(
    spec: &StorageSpec,
    calendar: &Calendar,
    path: &ScenarioPath,
    spot_actions: &[f64],
    forward_actions: &[f64],
) -> EpisodeLedger {
    let mut actor = ReplayActor {
        spot: spot_actions,
        forward: forward_actions,
    };
    let trade = !path.front.is_empty();
    run(&mut Eval, spec, calendar, path, &mut actor, trade).ledger
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::market::{gen_forward_curves, gen_spot_paths, MarketModelParams};
    use crate::policy::{Architecture, NormStats, SubnetScheme};
    use crate::storage::{delivery_quantity, step_cash, storage_level};
    use approx::assert_relative_eq;

    fn setup(alpha: f64) -> (StorageSpec, ScenarioSet) {
        let p = MarketModelParams::default();
        let cal = Calendar::uniform(60, 4).unwrap();
        let set = gen_forward_curves(gen_spot_paths(&p, 3, cal, 7).unwrap(), &p).unwrap();
        let spec = StorageSpec::two_regime(60, 40_000.0)
            .unwrap()
            .with_alpha(alpha)
            .unwrap();
        (spec, set)
    }

    fn policy(set: &ScenarioSet, spec: &StorageSpec, forwards: bool, seed: u64) -> PolicyParams {
        let front: Vec<f64> = (0..set.scenarios())
            .flat_map(|i| set.front_month_series(i).unwrap())
            .flatten()
            .collect();
        let norm = NormStats::fit(
            set.days(),
            spec.capacity(),
            set.spot_matrix(),
            forwards.then_some(front.as_slice()),
        );
        let arch = if forwards {
            Architecture::spot_forward(vec![6])
        } else {
            Architecture::spot(vec![6])
        };
        PolicyParams::init(
            arch,
            SubnetScheme::Monthly.day_map(set.calendar()),
            norm,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn network_episodes_are_feasible() {
        let (spec, set) = setup(0.5);
        for forwards in [false, true] {
            let p = policy(&set, &spec, forwards, 3);
            for i in 0..set.scenarios() {
                let path = ScenarioPath::from_set(&set, i, forwards).unwrap();
                let l = simulate(&p, &spec, set.calendar(), &path);
                l.check_feasibility(&spec, set.calendar()).unwrap();
                assert!(l.infeasible_days.is_empty());
                assert_eq!(l.violation, 0.0);
            }
        }
    }

    #[test]
    fn replay_reproduces_cash_and_levels_exactly() {
        let (spec, set) = setup(0.3);
        let p = policy(&set, &spec, true, 5);
        let path = ScenarioPath::from_set(&set, 1, true).unwrap();
        let l = simulate(&p, &spec, set.calendar(), &path);
        let r = replay(
            &spec,
            set.calendar(),
            &path,
            &l.spot_actions,
            &l.forward_actions,
        );
        assert_eq!(l.wealth.to_bits(), r.wealth.to_bits());
        assert_eq!(l.levels, r.levels);
        assert_eq!(l.deliveries, r.deliveries);
    }

    #[test]
    fn ledger_is_additive_and_conserves_gas() {
        let (spec, set) = setup(0.3);
        let spec = spec.with_costs(0.01, 123.0).unwrap();
        let p = policy(&set, &spec, true, 8);
        let cal = set.calendar();
        let path = ScenarioPath::from_set(&set, 2, true).unwrap();
        let l = simulate(&p, &spec, cal, &path);
        let mut cash = -spec.overhead();
        for k in 0..l.days() {
            let fwd = l.forward_months[k].map(|j| crate::storage::ForwardTrade {
                action: l.forward_actions[k],
                price: path.front[k].unwrap().0,
                month_len: cal.month_len(j),
            });
            let delta = step_cash(l.spot_actions[k], path.spot[k], spec.kappa(), fwd);
            assert_eq!(delta.to_bits(), l.cash_deltas[k].to_bits());
            cash += delta;
        }
        assert_eq!(cash.to_bits(), l.wealth.to_bits());
        // Every unit injected (spot + deliveries) is withdrawn again.
        let net: f64 = (0..l.days())
            .map(|k| l.spot_actions[k] + l.delivery_on(cal, k))
            .sum();
        assert!(net.abs() <= 1e-6 * spec.capacity());
        for n in [0, 17, 44, 60] {
            let h = storage_level(&spec, cal, &l.spot_actions, &l.deliveries, n).unwrap();
            assert_relative_eq!(h, l.levels[n], epsilon = 1e-6);
        }
        for j in 1..cal.months() {
            let traded: Vec<f64> = (0..l.days())
                .filter(|&k| l.forward_months[k] == Some(j))
                .map(|k| l.forward_actions[k])
                .collect();
            assert_relative_eq!(l.deliveries[j], delivery_quantity(&traded), epsilon = 1e-9);
        }
        assert_eq!(l.deliveries[0], 0.0);
    }

    #[test]
    fn last_contract_is_never_traded() {
        let (spec, set) = setup(1.0);
        let p = policy(&set, &spec, true, 1);
        let cal = set.calendar();
        let path = ScenarioPath::from_set(&set, 0, true).unwrap();
        let l = simulate(&p, &spec, cal, &path);
        let last = cal.months() - 1;
        assert_eq!(l.deliveries[last], 0.0);
        for k in 0..l.days() {
            assert_ne!(l.forward_months[k], Some(last));
            if k >= cal.month_start(last - 1) {
                assert_eq!(l.forward_actions[k], 0.0);
            }
        }
    }

    #[test]
    fn tape_and_eval_agree() {
        let (spec, set) = setup(0.2);
        let p = policy(&set, &spec, true, 2);
        let path = ScenarioPath::from_set(&set, 0, true).unwrap();
        let plain = simulate(&p, &spec, set.calendar(), &path);
        let mut tape = Tape::new();
        let theta: Vec<_> = p.theta().iter().map(|&x| tape.leaf(x)).collect();
        let mut actor = NetworkActor::<Tape> {
            params: &p,
            theta: &theta,
        };
        let out = run(&mut tape, &spec, set.calendar(), &path, &mut actor, true);
        assert_eq!(tape.value(out.wealth).to_bits(), plain.wealth.to_bits());
        assert_eq!(out.ledger, plain);
    }

    #[test]
    fn degenerate_storage_never_trades() {
        let spec = StorageSpec::constant(5, 0.0, 10.0, -10.0)
            .unwrap()
            .with_costs(0.0, 7.0)
            .unwrap();
        let cal = Calendar::uniform(5, 1).unwrap();
        let norm = NormStats::fit(5, 0.0, &[1.0, 3.0], None);
        let p = PolicyParams::init(Architecture::spot(vec![4]), vec![0; 5], norm, 0).unwrap();
        let path = ScenarioPath::spot_only(vec![5.0, 2.0, 8.0, 1.0, 9.0]);
        let l = simulate(&p, &spec, &cal, &path);
        assert!(l.spot_actions.iter().all(|&a| a == 0.0));
        assert_eq!(l.wealth, -7.0);
    }
}
