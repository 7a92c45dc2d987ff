//! Storage facility description and the daily/terminal constraint algebra.
//!
//! Sign convention: positive actions inject, negative actions withdraw. The
//! fill level `H_n` counts the working gas before the action of day `n`, so
//! `H_0 = 0` and `H_{n+1} = H_n + h^S_n + d^{j(n)}` where `d^{j(n)}` is the
//! daily delivery of the forward covering day `n`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Backend, Eval};
use crate::market::Calendar;

/// Relative tolerance for daily bound checks (times capacity).
pub const DAILY_TOLERANCE: f64 = 1e-9;
/// Relative tolerance for the empty-at-maturity check (times capacity).
pub const TERMINAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StorageError {
    #[error("storage spec field `{field}` is invalid: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("day {day}: no feasible action, lower bound {lo} exceeds upper bound {hi} ({cause})")]
    Infeasible {
        day: usize,
        lo: f64,
        hi: f64,
        cause: String,
    },
    #[error("day {day}: storage level {level} outside [0, {capacity}]")]
    LevelOutOfRange {
        day: usize,
        level: f64,
        capacity: f64,
    },
    #[error("day {day}: {what}")]
    Violation { day: usize, what: String },
}

/// Physical and contractual storage parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StorageSpecFields", into = "StorageSpecFields")]
pub struct StorageSpec {
    capacity: f64,
    injection: Vec<f64>,
    withdrawal: Vec<f64>,
    kappa: f64,
    overhead: f64,
    alpha: f64,
    // drain[k] = sum_{j >= k} |withdrawal_j|, length days + 1.
    drain: Vec<f64>,
}

/// Serialized form of [`StorageSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageSpecFields {
    pub capacity: f64,
    pub injection: Vec<f64>,
    pub withdrawal: Vec<f64>,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub overhead: f64,
    #[serde(default)]
    pub alpha: f64,
}

impl TryFrom<StorageSpecFields> for StorageSpec {
    type Error = StorageError;
    fn try_from(f: StorageSpecFields) -> Result<Self, StorageError> {
        StorageSpec::new(
            f.capacity,
            f.injection,
            f.withdrawal,
            f.kappa,
            f.overhead,
            f.alpha,
        )
    }
}

impl From<StorageSpec> for StorageSpecFields {
    fn from(s: StorageSpec) -> Self {
        Self {
            capacity: s.capacity,
            injection: s.injection,
            withdrawal: s.withdrawal,
            kappa: s.kappa,
            overhead: s.overhead,
            alpha: s.alpha,
        }
    }
}

fn bad(field: &'static str, reason: impl Into<String>) -> StorageError {
    StorageError::InvalidSpec {
        field,
        reason: reason.into(),
    }
}

impl StorageSpec {
    pub fn new(
        capacity: f64,
        injection: Vec<f64>,
        withdrawal: Vec<f64>,
        kappa: f64,
        overhead: f64,
        alpha: f64,
    ) -> Result<Self, StorageError> {
        if !(capacity.is_finite() && capacity >= 0.0) {
            return Err(bad(
                "capacity",
                format!("{capacity} must be finite and >= 0"),
            ));
        }
        if injection.len() != withdrawal.len() {
            return Err(bad(
                "withdrawal",
                format!(
                    "{} withdrawal bounds for {} injection bounds",
                    withdrawal.len(),
                    injection.len()
                ),
            ));
        }
        if injection.is_empty() {
            return Err(bad("injection", "need at least one day"));
        }
        if let Some((k, u)) = injection
            .iter()
            .enumerate()
            .find(|(_, u)| !(u.is_finite() && **u > 0.0))
        {
            return Err(bad("injection", format!("day {k}: {u} must be > 0")));
        }
        if let Some((k, l)) = withdrawal
            .iter()
            .enumerate()
            .find(|(_, l)| !(l.is_finite() && **l < 0.0))
        {
            return Err(bad("withdrawal", format!("day {k}: {l} must be < 0")));
        }
        if !(0.0..=1.0).contains(&kappa) {
            return Err(bad("kappa", format!("{kappa} must lie in [0, 1]")));
        }
        if !overhead.is_finite() {
            return Err(bad("overhead", "must be finite"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(bad("alpha", format!("{alpha} must lie in [0, 1]")));
        }
        let mut drain = vec![0.0; withdrawal.len() + 1];
        for k in (0..withdrawal.len()).rev() {
            drain[k] = drain[k + 1] - withdrawal[k];
        }
        Ok(Self {
            capacity,
            injection,
            withdrawal,
            kappa,
            overhead,
            alpha,
            drain,
        })
    }

    /// Constant daily rates.
    pub fn constant(
        days: usize,
        capacity: f64,
        injection: f64,
        withdrawal: f64,
    ) -> Result<Self, StorageError> {
        Self::new(
            capacity,
            vec![injection; days],
            vec![withdrawal; days],
            0.0,
            0.0,
            0.0,
        )
    }

    /// Two-regime facility: slow withdrawal (-600/day) until day 170 and fast
    /// (-3072/day) afterwards; fast injection (2808/day) until day 200 and slow
    /// (408/day) afterwards. These are the values for a 351-day horizon; other
    /// horizons rescale the switch days by `days / 351` and the rates by
    /// `351 / days`, which keeps the seasonal throughput comparable.
    pub fn two_regime(days: usize, capacity: f64) -> Result<Self, StorageError> {
        let ratio = days as f64 / 351.0;
        let w_switch = (170.0 * ratio).round() as usize;
        let i_switch = (200.0 * ratio).round() as usize;
        let withdrawal = (0..days)
            .map(|k| if k <= w_switch { -600.0 } else { -3072.0 } / ratio)
            .collect();
        let injection = (0..days)
            .map(|k| if k <= i_switch { 2808.0 } else { 408.0 } / ratio)
            .collect();
        Self::new(capacity, injection, withdrawal, 0.0, 0.0, 0.0)
    }

    pub fn with_costs(mut self, kappa: f64, overhead: f64) -> Result<Self, StorageError> {
        self.kappa = kappa;
        self.overhead = overhead;
        Self::try_from(StorageSpecFields::from(self))
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self, StorageError> {
        self.alpha = alpha;
        Self::try_from(StorageSpecFields::from(self))
    }

    pub fn days(&self) -> usize {
        self.injection.len()
    }
    pub fn capacity(&self) -> f64 {
        self.capacity
    }
    pub fn injection(&self, day: usize) -> f64 {
        self.injection[day]
    }
    pub fn withdrawal(&self, day: usize) -> f64 {
        self.withdrawal[day]
    }
    pub fn kappa(&self) -> f64 {
        self.kappa
    }
    pub fn overhead(&self) -> f64 {
        self.overhead
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Maximal total withdrawal on days `day..K`, `sum_{j >= day} |l_j|`.
    pub fn drain_capacity(&self, day: usize) -> f64 {
        self.drain[day.min(self.days())]
    }

    /// Largest level on `day` from which the storage can still be emptied by
    /// maturity, capped at capacity.
    pub fn reachable_cap(&self, day: usize) -> f64 {
        self.capacity.min(self.drain_capacity(day))
    }

    /// Liquidity cap on the daily forward action for a delivery month of
    /// `month_len` days: `alpha * c / month_len`.
    pub fn forward_cap(&self, month_len: usize) -> f64 {
        self.alpha * self.capacity / month_len as f64
    }

    pub(crate) fn daily_tol(&self) -> f64 {
        DAILY_TOLERANCE * self.capacity.max(1.0)
    }

    pub(crate) fn terminal_tol(&self) -> f64 {
        TERMINAL_TOLERANCE * self.capacity.max(1.0)
    }
}

/// Closed action interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn contains(&self, x: f64, tol: f64) -> bool {
        x >= self.lo - tol && x <= self.hi + tol
    }
}

/// Aggregate daily bounds `max(l_k, -H)` and `min(u_k, c - H)` on a backend.
/// The level term is the first argument, so it receives the gradient on ties.
pub fn aggregate_bounds<B: Backend>(
    b: &mut B,
    spec: &StorageSpec,
    level: B::Value,
    day: usize,
) -> (B::Value, B::Value) {
    let neg_level = b.scale(level, -1.0);
    let lo = b.max_const(neg_level, spec.withdrawal(day));
    let room = b.scale(level, -1.0);
    let room = b.offset(room, spec.capacity());
    let hi = b.min_const(room, spec.injection(day));
    (lo, hi)
}

/// Bounds on the spot action `h^S_k` given level `H_k` and the delivery `d`
/// due on day `k` (pass `0` when no forward is delivering).
pub fn effective_bounds(
    spec: &StorageSpec,
    level: f64,
    day: usize,
    delivery: f64,
) -> Result<Bounds, StorageError> {
    let (lo, hi) = aggregate_bounds(&mut Eval, spec, level, day);
    let (lo, hi) = (lo - delivery, hi - delivery);
    if lo > hi + spec.daily_tol() {
        let cause = if level < 0.0 || level > spec.capacity() {
            format!("level {level} outside [0, {}]", spec.capacity())
        } else {
            format!("delivery {delivery} cannot be absorbed")
        };
        return Err(StorageError::Infeasible { day, lo, hi, cause });
    }
    Ok(Bounds { lo, hi })
}

/// Whether an empty storage at maturity is still reachable from `level` on
/// `day`, i.e. `level <= sum_{j >= day} |l_j|`.
pub fn terminal_reachable(spec: &StorageSpec, level: f64, day: usize) -> bool {
    level <= spec.drain_capacity(day) + spec.daily_tol()
}

/// First day `k` on which `sum_{j > k} |l_j| < c`: from then on a full
/// storage can no longer idle and still be emptied by maturity.
pub fn critical_day(spec: &StorageSpec) -> Option<usize> {
    let c = spec.capacity();
    (0..spec.days()).find(|&k| spec.drain_capacity(k + 1) < c)
}

/// Forced-withdrawal override: with `reachable == false` the upper bound is
/// replaced by the lower one.
pub fn apply_forced_withdrawal(bounds: Bounds, reachable: bool) -> Bounds {
    if reachable {
        bounds
    } else {
        Bounds {
            lo: bounds.lo,
            hi: bounds.lo,
        }
    }
}

/// Sticky override state for one episode: once the reachability check fails
/// on any day, every later day is clamped to maximal withdrawal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WithdrawalOverride {
    active: bool,
}

impl WithdrawalOverride {
    /// Records today's check and reports whether the override applies.
    pub fn update(&mut self, reachable: bool) -> bool {
        self.active |= !reachable;
        self.active
    }

    pub fn is_active(&self) -> bool {
        self.active
    }
}

/// Daily delivery of a monthly forward: the sum of all actions on it.
pub fn delivery_quantity(forward_actions: &[f64]) -> f64 {
    forward_actions.iter().sum()
}

/// Storage level `H_n` from spot actions and monthly deliveries.
///
/// Completed months contribute `d^j * len_j`; the month containing `n`
/// contributes `d^j * (n - n_j)` (deliveries strictly before day `n`).
pub fn storage_level(
    spec: &StorageSpec,
    calendar: &Calendar,
    spot_actions: &[f64],
    deliveries: &[f64],
    n: usize,
) -> Result<f64, StorageError> {
    let mut level: f64 = spot_actions[..n].iter().sum();
    for (j, &d) in deliveries.iter().enumerate().take(calendar.months()) {
        let start = calendar.month_start(j);
        if start >= n {
            break;
        }
        let days = calendar.month_end(j).min(n) - start;
        level += d * days as f64;
    }
    let tol = spec.daily_tol();
    if level < -tol || level > spec.capacity() + tol {
        return Err(StorageError::LevelOutOfRange {
            day: n,
            level,
            capacity: spec.capacity(),
        });
    }
    Ok(level)
}

/// A forward trade booked on the trade date.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardTrade {
    /// Daily delivery rate bought (>0) or sold (<0), MWh/day.
    pub action: f64,
    pub price: f64,
    pub month_len: usize,
}

/// Cash flow of one day: `-h S - |h S| kappa`, plus `-h_F F len` for a forward trade.
pub fn step_cash(
    spot_action: f64,
    spot_price: f64,
    kappa: f64,
    forward: Option<ForwardTrade>,
) -> f64 {
    let flow = spot_action * spot_price;
    let mut cash = -flow;
    if kappa != 0.0 {
        cash -= flow.abs() * kappa;
    }
    if let Some(f) = forward {
        cash -= f.action * (f.price * f.month_len as f64);
    }
    cash
}

/// Day-by-day record of one simulated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLedger {
    /// `H_0 ..= H_K`.
    pub levels: Vec<f64>,
    pub spot_actions: Vec<f64>,
    /// Action on the front-month forward per day (0 when none is traded).
    pub forward_actions: Vec<f64>,
    /// Delivery month of the forward traded on each day.
    pub forward_months: Vec<Option<usize>>,
    /// Daily delivery `d^j` per month; `d^0 = 0`.
    pub deliveries: Vec<f64>,
    /// Admissible interval for the spot action per day.
    pub spot_bounds: Vec<Bounds>,
    pub cash_deltas: Vec<f64>,
    /// Days on which the forced-withdrawal override was active.
    pub forced: Vec<bool>,
    /// Days whose admissible interval was empty.
    pub infeasible_days: Vec<usize>,
    pub overhead: f64,
    /// Terminal P&L including overhead.
    pub wealth: f64,
    /// Constraint violation in MWh (empty interval widths plus terminal residue).
    pub violation: f64,
}

impl EpisodeLedger {
    pub fn days(&self) -> usize {
        self.spot_actions.len()
    }

    pub fn terminal_level(&self) -> f64 {
        *self.levels.last().unwrap_or(&0.0)
    }

    /// Delivery due on `day`.
    pub fn delivery_on(&self, calendar: &Calendar, day: usize) -> f64 {
        self.deliveries[calendar.month_of(day)]
    }

    /// Checks every daily and terminal constraint at the standard tolerances.
    pub fn check_feasibility(
        &self,
        spec: &StorageSpec,
        calendar: &Calendar,
    ) -> Result<(), StorageError> {
        let c = spec.capacity();
        let tol = spec.daily_tol();
        if self.levels.first().copied() != Some(0.0) {
            return Err(StorageError::Violation {
                day: 0,
                what: "storage does not start empty".into(),
            });
        }
        if self.deliveries.first().copied().unwrap_or(0.0) != 0.0 {
            return Err(StorageError::Violation {
                day: 0,
                what: "first month has a delivery obligation".into(),
            });
        }
        for (day, &h) in self.levels.iter().enumerate() {
            if h < -tol || h > c + tol {
                return Err(StorageError::LevelOutOfRange {
                    day,
                    level: h,
                    capacity: c,
                });
            }
        }
        for k in 0..self.days() {
            let total = self.spot_actions[k] + self.delivery_on(calendar, k);
            if total < spec.withdrawal(k) - tol || total > spec.injection(k) + tol {
                return Err(StorageError::Violation {
                    day: k,
                    what: format!(
                        "aggregate action {total} outside [{}, {}]",
                        spec.withdrawal(k),
                        spec.injection(k)
                    ),
                });
            }
            let f = self.forward_actions[k];
            match self.forward_months[k] {
                Some(j) => {
                    if j == 0 || j + 1 >= calendar.months() || k >= calendar.month_start(j) {
                        return Err(StorageError::Violation {
                            day: k,
                            what: format!("forward for month {j} is not tradable"),
                        });
                    }
                    let cap = spec.forward_cap(calendar.month_len(j));
                    if f.abs() > cap + tol {
                        return Err(StorageError::Violation {
                            day: k,
                            what: format!("forward action {f} exceeds liquidity cap {cap}"),
                        });
                    }
                }
                None if f != 0.0 => {
                    return Err(StorageError::Violation {
                        day: k,
                        what: "forward action without a tradable contract".into(),
                    })
                }
                None => {}
            }
        }
        if self.terminal_level().abs() > spec.terminal_tol() {
            return Err(StorageError::Violation {
                day: self.days(),
                what: format!("terminal level {} is not empty", self.terminal_level()),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(c: f64, u: f64, l: f64, days: usize) -> StorageSpec {
        StorageSpec::constant(days, c, u, l).unwrap()
    }

    #[test]
    fn merged_bounds() {
        let s = spec(100.0, 50.0, -30.0, 5);
        assert_eq!(
            effective_bounds(&s, 80.0, 0, 0.0).unwrap(),
            Bounds {
                lo: -30.0,
                hi: 20.0
            }
        );
        assert_eq!(
            effective_bounds(&s, 0.0, 0, 0.0).unwrap(),
            Bounds { lo: 0.0, hi: 50.0 }
        );
        // Delivery of 10/day near the top: spot has to withdraw at least 5.
        assert_eq!(
            effective_bounds(&s, 95.0, 0, 10.0).unwrap(),
            Bounds {
                lo: -40.0,
                hi: -5.0
            }
        );
    }

    #[test]
    fn out_of_range_level_is_infeasible() {
        let s = spec(100.0, 50.0, -30.0, 5);
        let err = effective_bounds(&s, 150.0, 3, 0.0).unwrap_err();
        assert!(matches!(err, StorageError::Infeasible { day: 3, .. }));
    }

    #[test]
    fn reachability_single_day_boundary() {
        let s = spec(100.0, 50.0, -30.0, 5);
        for k in 0..=5 {
            assert!(terminal_reachable(&s, 0.0, k));
        }
        assert!(terminal_reachable(&s, 30.0, 4));
        assert!(!terminal_reachable(&s, 30.0 + 1e-3, 4));
        assert!(terminal_reachable(&s, 150.0, 0));
        assert!(!terminal_reachable(&s, 1.0, 5));
    }

    #[test]
    fn critical_day_matches_scan() {
        let s = StorageSpec::two_regime(351, 250_000.0).unwrap();
        let scan = (0..351)
            .find(|&k| {
                let tail: f64 = ((k + 1)..351).map(|j| -s.withdrawal(j)).sum();
                tail < 250_000.0
            })
            .unwrap();
        assert_eq!(critical_day(&s), Some(scan));
        assert_eq!(scan, 269);
    }

    #[test]
    fn reference_preset_values() {
        let s = StorageSpec::two_regime(351, 250_000.0).unwrap();
        assert_eq!(s.withdrawal(170), -600.0);
        assert_eq!(s.withdrawal(171), -3072.0);
        assert_eq!(s.injection(200), 2808.0);
        assert_eq!(s.injection(201), 408.0);
    }

    #[test]
    fn forced_withdrawal_override() {
        let b = Bounds {
            lo: -30.0,
            hi: 20.0,
        };
        assert_eq!(apply_forced_withdrawal(b, true), b);
        assert_eq!(
            apply_forced_withdrawal(b, false),
            Bounds {
                lo: -30.0,
                hi: -30.0
            }
        );
        let mut o = WithdrawalOverride::default();
        assert!(!o.update(true));
        assert!(o.update(false));
        assert!(o.update(true));
    }

    #[test]
    fn forced_path_empties_before_maturity() {
        // Fill too much, then let the override drain the rest.
        let s = spec(100.0, 50.0, -30.0, 8);
        let mut level: f64 = 0.0;
        let mut over = WithdrawalOverride::default();
        for k in 0..8 {
            let b = effective_bounds(&s, level, k, 0.0).unwrap();
            let forced = over.update(terminal_reachable(&s, level, k + 1));
            let b = apply_forced_withdrawal(b, !forced);
            let action = if forced { b.lo } else { b.hi };
            level += action;
            if forced && level == 0.0 {
                let next = effective_bounds(&s, level, (k + 1).min(7), 0.0).unwrap();
                assert_eq!(
                    apply_forced_withdrawal(next, false),
                    Bounds { lo: 0.0, hi: 0.0 }
                );
            }
        }
        assert!(level.abs() <= 1e-6 * 100.0, "terminal level {level}");
    }

    #[test]
    fn delivery_sums_trades() {
        assert_eq!(delivery_quantity(&[0.0, 0.0]), 0.0);
        assert_eq!(delivery_quantity(&[2.0, -1.0, 4.0]), 5.0);
        assert_eq!(delivery_quantity(&[]), 0.0);
    }

    #[test]
    fn level_with_deliveries() {
        let cal = Calendar::new(90, vec![0, 30, 60]).unwrap();
        let s = spec(1000.0, 50.0, -50.0, 90);
        let spot = vec![0.0; 90];
        let d = [0.0, 2.0, 0.0];
        assert_eq!(storage_level(&s, &cal, &spot, &d, 0).unwrap(), 0.0);
        assert_eq!(storage_level(&s, &cal, &spot, &d, 30).unwrap(), 0.0);
        assert_eq!(storage_level(&s, &cal, &spot, &d, 31).unwrap(), 2.0);
        assert_eq!(storage_level(&s, &cal, &spot, &d, 60).unwrap(), 60.0);
        assert_eq!(storage_level(&s, &cal, &spot, &d, 90).unwrap(), 60.0);

        let mut spot = vec![0.0; 90];
        spot[0] = 5.0;
        spot[3] = -2.0;
        let none = [0.0; 3];
        assert_eq!(storage_level(&s, &cal, &spot, &none, 4).unwrap(), 3.0);
        spot[4] = -10.0;
        assert!(storage_level(&s, &cal, &spot, &none, 5).is_err());
    }

    #[test]
    fn cash_flows() {
        assert_eq!(step_cash(1.0, 2.0, 0.0, None), -2.0);
        assert_relative_eq!(step_cash(-1.0, 2.0, 0.1, None), 1.8);
        let fwd = ForwardTrade {
            action: 1.0,
            price: 3.0,
            month_len: 30,
        };
        assert_eq!(step_cash(0.0, 3.0, 0.0, Some(fwd)), -90.0);
    }

    #[test]
    fn spec_validation() {
        assert!(StorageSpec::constant(3, 10.0, 0.0, -1.0).is_err());
        assert!(StorageSpec::constant(3, 10.0, 1.0, 0.0).is_err());
        assert!(spec(10.0, 1.0, -1.0, 3).with_costs(1.5, 0.0).is_err());
        assert!(spec(10.0, 1.0, -1.0, 3).with_alpha(-0.1).is_err());
        let json = serde_json::to_string(&spec(10.0, 1.0, -1.0, 3)).unwrap();
        let back: StorageSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.drain_capacity(0), 3.0);
    }

    proptest::proptest! {
        #[test]
        fn clipped_actions_keep_level_in_range(
            c in 1.0f64..1e6,
            u_frac in 0.01f64..1.0,
            l_frac in 0.01f64..1.0,
            level_frac in 0.0f64..=1.0,
            raw in -2.0f64..2.0,
        ) {
            let s = spec(c, u_frac * c, -l_frac * c, 4);
            let level = level_frac * c;
            let b = effective_bounds(&s, level, 0, 0.0).unwrap();
            proptest::prop_assert!(b.lo <= 0.0 && 0.0 <= b.hi);
            let action = (raw * c).clamp(b.lo, b.hi);
            let next = level + action;
            proptest::prop_assert!(next >= -1e-9 * c && next <= c * (1.0 + 1e-9));
            let forced = apply_forced_withdrawal(b, false);
            proptest::prop_assert_eq!(forced.hi, forced.lo);
            proptest::prop_assert!(level + forced.lo >= -1e-9 * c);
        }
    }
}
