//! Spot-price scenarios, model-consistent monthly forward curves and the
//! rolling front-month series.
//!
//! The spot model is a seasonal level times the exponential of a mean-reverting
//! Gaussian factor,
//!
//! ```text
//! S_k = seasonal(k) * exp(X_k)
//! seasonal(k) = level + amplitude * cos(2 pi (k - phase) / 365)
//! X_{k+1} = X_k e^{-a} + sigma * sqrt((1 - e^{-2a}) / (2a)) * Z_k
//! ```
//!
//! simulated with the exact one-day transition. Forward prices are the
//! average over the delivery month of the conditional expectation of the spot
//! price, optionally scaled by a constant forward premium `exp(p)`.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("market parameter `{name}` is invalid: {reason}")]
    InvalidParam { name: &'static str, reason: String },
    #[error("scenario matrix of {scenarios} x {days} does not fit in memory")]
    TooLarge { scenarios: usize, days: usize },
    #[error("invalid calendar: {0}")]
    Calendar(String),
    #[error("calendar covers {calendar} days but the scenario set has {scenarios}")]
    CalendarMismatch { calendar: usize, scenarios: usize },
    #[error("forward curves have not been generated for this scenario set")]
    ForwardsMissing,
    #[error("forward for delivery month {month} is not traded on day {day} (delivery starts on day {start})")]
    ForwardNotTradable {
        day: usize,
        month: usize,
        start: usize,
    },
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("csv row {row} col {col}: {reason}")]
    Cell {
        row: usize,
        col: usize,
        reason: String,
    },
    #[error("csv row {row} has {found} columns, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("csv input contains no rows")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MarketError> = std::result::Result<T, E>;

/// Parameters of the seasonal mean-reverting spot model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketModelParams {
    /// Average price level (currency/MWh).
    pub seasonal_level: f64,
    /// Amplitude of the yearly cosine (currency/MWh).
    pub seasonal_amplitude: f64,
    /// Day of the seasonal peak.
    pub seasonal_phase: f64,
    /// Mean-reversion speed per day.
    pub mean_reversion_speed: f64,
    /// Volatility of the log factor per square-root day.
    pub volatility: f64,
    /// Starting value of the log factor.
    pub initial_log_deviation: f64,
    /// Log premium applied to every forward price (`F = e^p * E[avg spot]`).
    #[serde(default)]
    pub forward_premium: f64,
}

impl Default for MarketModelParams {
    fn default() -> Self {
        Self {
            seasonal_level: 20.0,
            seasonal_amplitude: 6.0,
            seasonal_phase: 280.0,
            mean_reversion_speed: 0.05,
            volatility: 0.03,
            initial_log_deviation: 0.0,
            forward_premium: 0.0,
        }
    }
}

impl MarketModelParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("seasonal_level", self.seasonal_level),
            ("seasonal_amplitude", self.seasonal_amplitude),
            ("seasonal_phase", self.seasonal_phase),
            ("mean_reversion_speed", self.mean_reversion_speed),
            ("volatility", self.volatility),
            ("initial_log_deviation", self.initial_log_deviation),
            ("forward_premium", self.forward_premium),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(MarketError::InvalidParam {
                    name,
                    reason: format!("{v} is not finite"),
                });
            }
        }
        if self.volatility < 0.0 {
            return Err(invalid("volatility", "must be >= 0"));
        }
        if self.mean_reversion_speed < 0.0 {
            return Err(invalid("mean_reversion_speed", "must be >= 0"));
        }
        if self.seasonal_amplitude < 0.0 {
            return Err(invalid("seasonal_amplitude", "must be >= 0"));
        }
        if self.seasonal_level <= self.seasonal_amplitude {
            return Err(invalid(
                "seasonal_level",
                "must exceed seasonal_amplitude so the seasonal curve stays positive",
            ));
        }
        Ok(())
    }

    pub fn seasonal(&self, day: usize) -> f64 {
        let angle = 2.0 * std::f64::consts::PI * (day as f64 - self.seasonal_phase) / 365.0;
        self.seasonal_level + self.seasonal_amplitude * angle.cos()
    }

    /// Standard deviation of the one-day factor innovation.
    fn step_sd(&self) -> f64 {
        self.volatility * variance_factor(self.mean_reversion_speed, 1.0).sqrt()
    }

    /// `E[S_d | X_k = x]` for `d >= k`.
    pub fn conditional_spot_mean(&self, x: f64, from: usize, day: usize) -> f64 {
        debug_assert!(day >= from);
        let tau = (day - from) as f64;
        let a = self.mean_reversion_speed;
        let mean = x * (-a * tau).exp();
        let var = self.volatility * self.volatility * variance_factor(a, tau);
        self.seasonal(day) * (mean + 0.5 * var).exp()
    }
}

fn invalid(name: &'static str, reason: &str) -> MarketError {
    MarketError::InvalidParam {
        name,
        reason: reason.to_string(),
    }
}

/// `(1 - e^{-2 a tau}) / (2a)`, with the `a -> 0` limit `tau`.
fn variance_factor(a: f64, tau: f64) -> f64 {
    if a * tau < 1e-10 {
        tau
    } else {
        -(-2.0 * a * tau).exp_m1() / (2.0 * a)
    }
}

/// Trading-day calendar split into delivery months.
///
/// `month_starts = [n_0 = 0, n_1, ..., n_J]` with `n_J < days`. Month `j`
/// covers `[n_j, n_{j+1} - 1]`, where `n_{J+1} = days`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calendar {
    days: usize,
    month_starts: Vec<usize>,
}

impl Calendar {
    pub fn new(days: usize, month_starts: Vec<usize>) -> Result<Self> {
        if days < 2 {
            return Err(MarketError::Calendar(format!(
                "need at least 2 days, got {days}"
            )));
        }
        if month_starts.first() != Some(&0) {
            return Err(MarketError::Calendar(
                "month_starts must begin with 0".into(),
            ));
        }
        if month_starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MarketError::Calendar(
                "month_starts must be strictly increasing".into(),
            ));
        }
        if *month_starts.last().unwrap() >= days {
            return Err(MarketError::Calendar(format!(
                "last month start {} must be below the horizon {days}",
                month_starts.last().unwrap()
            )));
        }
        Ok(Self { days, month_starts })
    }

    /// `months` months of (nearly) equal length: `n_j = round(j * days / months)`.
    pub fn uniform(days: usize, months: usize) -> Result<Self> {
        if months == 0 || months > days {
            return Err(MarketError::Calendar(format!(
                "cannot split {days} days into {months} months"
            )));
        }
        let starts = (0..months)
            .map(|j| ((j * days) as f64 / months as f64).round() as usize)
            .collect();
        Self::new(days, starts)
    }

    pub fn days(&self) -> usize {
        self.days
    }

    pub fn month_starts(&self) -> &[usize] {
        &self.month_starts
    }

    /// Number of months `J + 1`.
    pub fn months(&self) -> usize {
        self.month_starts.len()
    }

    pub fn month_start(&self, month: usize) -> usize {
        self.month_starts[month]
    }

    /// Exclusive end of month `j` (`n_{j+1}`, or `days` for the last month).
    pub fn month_end(&self, month: usize) -> usize {
        self.month_starts
            .get(month + 1)
            .copied()
            .unwrap_or(self.days)
    }

    /// Number of delivery days in month `j`.
    pub fn month_len(&self, month: usize) -> usize {
        self.month_end(month) - self.month_start(month)
    }

    /// Month containing `day`.
    pub fn month_of(&self, day: usize) -> usize {
        debug_assert!(day < self.days);
        self.month_starts.partition_point(|&s| s <= day) - 1
    }

    /// Front month at `day`: the first month whose delivery has not started,
    /// `min { j : n_j > day }`. `None` from `n_J` onwards.
    pub fn front_month(&self, day: usize) -> Option<usize> {
        let j = self.month_starts.partition_point(|&s| s <= day);
        (j < self.months()).then_some(j)
    }
}

/// Scenario matrix plus its calendar and, once generated, forward curves.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    scenarios: usize,
    calendar: Calendar,
    /// Row-major `scenarios x days`.
    spot: Vec<f64>,
    /// Row-major `scenarios x days x months`; NaN where not tradable.
    forwards: Option<Vec<f64>>,
    seed: Option<u64>,
}

/// Price and delivery month of the rolling front-month forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontMonth {
    pub price: f64,
    pub month: usize,
}

impl ScenarioSet {
    /// Wraps a row-major `scenarios x calendar.days()` spot matrix.
    pub fn from_spot(spot: Vec<f64>, scenarios: usize, calendar: Calendar) -> Result<Self> {
        let days = calendar.days();
        let expected = scenarios
            .checked_mul(days)
            .ok_or(MarketError::TooLarge { scenarios, days })?;
        if spot.len() != expected {
            return Err(MarketError::OutOfRange(format!(
                "spot matrix has {} entries, expected {scenarios} x {days}",
                spot.len()
            )));
        }
        for (idx, &p) in spot.iter().enumerate() {
            if !(p.is_finite() && p > 0.0) {
                return Err(MarketError::Cell {
                    row: idx / days,
                    col: idx % days,
                    reason: format!("price {p} is not positive"),
                });
            }
        }
        Ok(Self {
            scenarios,
            calendar,
            spot,
            forwards: None,
            seed: None,
        })
    }

    pub fn scenarios(&self) -> usize {
        self.scenarios
    }

    pub fn days(&self) -> usize {
        self.calendar.days()
    }

    pub fn calendar(&self) -> &Calendar {
        &self.calendar
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn spot_row(&self, scenario: usize) -> &[f64] {
        let k = self.days();
        &self.spot[scenario * k..(scenario + 1) * k]
    }

    pub fn spot(&self, scenario: usize, day: usize) -> f64 {
        self.spot[scenario * self.days() + day]
    }

    pub fn spot_matrix(&self) -> &[f64] {
        &self.spot
    }

    pub fn has_forwards(&self) -> bool {
        self.forwards.is_some()
    }

    /// Replaces the month boundaries. Drops forwards, which depend on them.
    pub fn with_calendar(mut self, calendar: Calendar) -> Result<Self> {
        if calendar.days() != self.days() {
            return Err(MarketError::CalendarMismatch {
                calendar: calendar.days(),
                scenarios: self.days(),
            });
        }
        self.calendar = calendar;
        self.forwards = None;
        Ok(self)
    }

    /// Keeps only the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let k = self.days();
        let m = self.calendar.months();
        let mut spot = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            spot.extend_from_slice(self.spot_row(r));
        }
        let forwards = self.forwards.as_ref().map(|f| {
            let mut out = Vec::with_capacity(rows.len() * k * m);
            for &r in rows {
                out.extend_from_slice(&f[r * k * m..(r + 1) * k * m]);
            }
            out
        });
        Self {
            scenarios: rows.len(),
            calendar: self.calendar.clone(),
            spot,
            forwards,
            seed: self.seed,
        }
    }

    /// Contiguous row range `[start, start + count)`.
    pub fn rows(&self, start: usize, count: usize) -> Self {
        let idx: Vec<usize> = (start..start + count).collect();
        self.select(&idx)
    }

    /// `F(day, n_j, n_{j+1} - 1)` for scenario `scenario`.
    pub fn forward(&self, scenario: usize, day: usize, month: usize) -> Result<f64> {
        let f = self.forwards.as_ref().ok_or(MarketError::ForwardsMissing)?;
        self.check_index(scenario, day)?;
        if month >= self.calendar.months() {
            return Err(MarketError::OutOfRange(format!("month {month}")));
        }
        let start = self.calendar.month_start(month);
        if day >= start {
            return Err(MarketError::ForwardNotTradable { day, month, start });
        }
        let m = self.calendar.months();
        Ok(f[(scenario * self.days() + day) * m + month])
    }

    /// Rolling front-month forward on `day`, or `None` once no month with a
    /// later delivery start remains (`day >= n_J`).
    pub fn rolling_front_month(&self, scenario: usize, day: usize) -> Result<Option<FrontMonth>> {
        self.check_index(scenario, day)?;
        match self.calendar.front_month(day) {
            None => Ok(None),
            Some(month) => Ok(Some(FrontMonth {
                price: self.forward(scenario, day, month)?,
                month,
            })),
        }
    }

    /// Front-month price for every day of a scenario (`None` from `n_J` on).
    pub fn front_month_series(&self, scenario: usize) -> Result<Vec<Option<f64>>> {
        (0..self.days())
            .map(|k| Ok(self.rolling_front_month(scenario, k)?.map(|f| f.price)))
            .collect()
    }

    fn check_index(&self, scenario: usize, day: usize) -> Result<()> {
        if scenario >= self.scenarios || day >= self.days() {
            return Err(MarketError::OutOfRange(format!(
                "scenario {scenario}, day {day} (set is {} x {})",
                self.scenarios,
                self.days()
            )));
        }
        Ok(())
    }

    /// Writes the spot matrix as headerless CSV, one scenario per row.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        for i in 0..self.scenarios {
            w.write_record(self.spot_row(i).iter().map(|p| p.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for ScenarioSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} scenarios x {} days, {} months",
            self.scenarios,
            self.days(),
            self.calendar.months()
        )
    }
}

/// Simulates `scenarios` spot paths over `calendar.days()` days.
///
/// Scenario `i` draws from its own ChaCha stream `i` under `seed`, so the
/// result does not depend on how rows are scheduled across threads.
pub fn gen_spot_paths(
    params: &MarketModelParams,
    scenarios: usize,
    calendar: Calendar,
    seed: u64,
) -> Result<ScenarioSet> {
    params.validate()?;
    let days = calendar.days();
    if scenarios == 0 {
        return Err(MarketError::OutOfRange("need at least one scenario".into()));
    }
    let total = scenarios
        .checked_mul(days)
        .filter(|n| n.checked_mul(std::mem::size_of::<f64>()).is_some())
        .ok_or(MarketError::TooLarge { scenarios, days })?;

    let decay = (-params.mean_reversion_speed).exp();
    let sd = params.step_sd();
    let seasonal: Vec<f64> = (0..days).map(|k| params.seasonal(k)).collect();
    let mut spot = vec![0.0; total];
    spot.par_chunks_mut(days).enumerate().for_each(|(i, row)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut x = params.initial_log_deviation;
        for (k, out) in row.iter_mut().enumerate() {
            if k > 0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = x * decay + sd * z;
            }
            *out = seasonal[k] * x.exp();
        }
    });
    let mut set = ScenarioSet::from_spot(spot, scenarios, calendar)?;
    set.seed = Some(seed);
    Ok(set)
}

/// Fills model-consistent monthly forward curves.
///
/// The factor value is recovered from the spot price as
/// `X_k = ln(S_k / seasonal(k))`, so this also works on ingested scenarios.
pub fn gen_forward_curves(set: ScenarioSet, params: &MarketModelParams) -> Result<ScenarioSet> {
    params.validate()?;
    let mut set = set;
    let days = set.days();
    let cal = set.calendar.clone();
    let months = cal.months();
    let premium = params.forward_premium.exp();
    let mut forwards = vec![f64::NAN; set.scenarios * days * months];
    let spot = &set.spot;
    forwards
        .par_chunks_mut(days * months)
        .enumerate()
        .for_each(|(i, block)| {
            for k in 0..days {
                let x = (spot[i * days + k] / params.seasonal(k)).ln();
                for j in 1..months {
                    let start = cal.month_start(j);
                    if k >= start {
                        continue;
                    }
                    let end = cal.month_end(j);
                    let mut acc = 0.0;
                    for d in start..end {
                        acc += params.conditional_spot_mean(x, k, d);
                    }
                    block[k * months + j] = premium * acc / (end - start) as f64;
                }
            }
        });
    set.forwards = Some(forwards);
    Ok(set)
}

/// Reads a headerless (or single-header) CSV spot matrix, one scenario per row.
///
/// The result carries a single-month calendar; attach the real month
/// boundaries with [`ScenarioSet::with_calendar`].
pub fn ingest_csv(path: &Path, has_header: bool) -> Result<ScenarioSet> {
    let file = std::fs::File::open(path)?;
    read_csv(file, has_header)
}

pub fn read_csv<R: std::io::Read>(reader: R, has_header: bool) -> Result<ScenarioSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut spot = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let expected = *width.get_or_insert(rec.len());
        if rec.len() != expected {
            return Err(MarketError::Ragged {
                row,
                expected,
                found: rec.len(),
            });
        }
        for (col, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| MarketError::Cell {
                row,
                col,
                reason: format!("`{cell}` is not a number"),
            })?;
            if !(v.is_finite() && v > 0.0) {
                return Err(MarketError::Cell {
                    row,
                    col,
                    reason: format!("price {v} is not positive"),
                });
            }
            spot.push(v);
        }
        rows += 1;
    }
    let days = width.ok_or(MarketError::Empty)?;
    let calendar = Calendar::new(days.max(2), vec![0]).map_err(|_| MarketError::Cell {
        row: 0,
        col: 0,
        reason: "need at least two days per scenario".into(),
    })?;
    ScenarioSet::from_spot(spot, rows, calendar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat(level: f64) -> MarketModelParams {
        MarketModelParams {
            seasonal_level: level,
            seasonal_amplitude: 0.0,
            seasonal_phase: 0.0,
            mean_reversion_speed: 0.0,
            volatility: 0.0,
            initial_log_deviation: 0.0,
            forward_premium: 0.0,
        }
    }

    #[test]
    fn zero_noise_paths_follow_the_seasonal_curve() {
        let p = MarketModelParams {
            volatility: 0.0,
            ..Default::default()
        };
        let set = gen_spot_paths(&p, 3, Calendar::uniform(40, 4).unwrap(), 1).unwrap();
        for i in 0..3 {
            for k in 0..40 {
                assert_eq!(set.spot(i, k), p.seasonal(k));
            }
        }
    }

    #[test]
    fn all_dynamics_off_gives_constant_price() {
        let set = gen_spot_paths(&flat(17.5), 2, Calendar::uniform(10, 2).unwrap(), 9).unwrap();
        assert!(set.spot_matrix().iter().all(|&s| s == 17.5));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let p = MarketModelParams::default();
        let cal = Calendar::uniform(30, 3).unwrap();
        let a = gen_spot_paths(&p, 2, cal.clone(), 42).unwrap();
        let b = gen_spot_paths(&p, 2, cal.clone(), 42).unwrap();
        let c = gen_spot_paths(&p, 2, cal, 43).unwrap();
        assert!(a
            .spot_matrix()
            .iter()
            .zip(b.spot_matrix())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a.spot_matrix(), c.spot_matrix());
    }

    #[test]
    fn substreams_do_not_depend_on_row_count() {
        let p = MarketModelParams::default();
        let cal = Calendar::uniform(20, 2).unwrap();
        let small = gen_spot_paths(&p, 2, cal.clone(), 5).unwrap();
        let big = gen_spot_paths(&p, 7, cal, 5).unwrap();
        assert_eq!(small.spot_row(1), big.spot_row(1));
    }

    #[test]
    fn rejects_bad_parameters() {
        let p = MarketModelParams {
            volatility: f64::NAN,
            ..MarketModelParams::default()
        };
        assert!(matches!(
            gen_spot_paths(&p, 1, Calendar::uniform(10, 1).unwrap(), 0),
            Err(MarketError::InvalidParam {
                name: "volatility",
                ..
            })
        ));
        let mut p = MarketModelParams::default();
        p.seasonal_amplitude = p.seasonal_level;
        assert!(p.validate().is_err());
        let p = MarketModelParams::default();
        assert!(matches!(
            gen_spot_paths(&p, usize::MAX / 2, Calendar::uniform(10, 1).unwrap(), 0),
            Err(MarketError::TooLarge { .. })
        ));
    }

    #[test]
    fn seasonality_sign_winter_above_summer() {
        let p = MarketModelParams::default();
        let set = gen_spot_paths(&p, 200, Calendar::uniform(351, 12).unwrap(), 3).unwrap();
        let col_mean = |k: usize| (0..200).map(|i| set.spot(i, k)).sum::<f64>() / 200.0;
        // Peak near the phase, trough half a year earlier.
        let winter = col_mean(p.seasonal_phase as usize);
        let summer = col_mean(p.seasonal_phase as usize - 182);
        assert!(winter > summer);
    }

    #[test]
    fn zero_volatility_forward_is_mean_of_seasonal_values() {
        let p = MarketModelParams {
            volatility: 0.0,
            initial_log_deviation: 0.2,
            ..Default::default()
        };
        let cal = Calendar::uniform(60, 4).unwrap();
        let set = gen_spot_paths(&p, 1, cal.clone(), 0).unwrap();
        let set = gen_forward_curves(set, &p).unwrap();
        // With zero noise the factor decays deterministically, so forwards are
        // constant in k and equal the average of the deterministic path.
        for j in 1..cal.months() {
            let (s, e) = (cal.month_start(j), cal.month_end(j));
            let expected: f64 = (s..e).map(|d| set.spot(0, d)).sum::<f64>() / (e - s) as f64;
            for k in 0..s {
                assert_relative_eq!(
                    set.forward(0, k, j).unwrap(),
                    expected,
                    max_relative = 1e-12
                );
            }
        }
        let p0 = MarketModelParams {
            volatility: 0.0,
            ..Default::default()
        };
        let set = gen_forward_curves(gen_spot_paths(&p0, 1, cal.clone(), 0).unwrap(), &p0).unwrap();
        let (s, e) = (cal.month_start(2), cal.month_end(2));
        let seasonal_avg: f64 = (s..e).map(|d| p0.seasonal(d)).sum::<f64>() / (e - s) as f64;
        assert_relative_eq!(
            set.forward(0, 3, 2).unwrap(),
            seasonal_avg,
            max_relative = 1e-12
        );
    }

    #[test]
    fn fast_reversion_one_day_month_forward_is_seasonal_value() {
        // Closed form: E[S_d | X_k] = seasonal(d) exp(x e^{-a} + sigma^2 (1 - e^{-2a}) / (4a)).
        let p = MarketModelParams {
            mean_reversion_speed: 200.0,
            volatility: 0.3,
            initial_log_deviation: 0.5,
            ..Default::default()
        };
        let cal = Calendar::new(10, vec![0, 5, 6]).unwrap();
        let set = gen_forward_curves(gen_spot_paths(&p, 4, cal, 11).unwrap(), &p).unwrap();
        for i in 0..4 {
            let f = set.forward(i, 4, 1).unwrap();
            assert_relative_eq!(f, p.seasonal(5), max_relative = 1e-3);
        }
    }

    #[test]
    fn forward_premium_scales_forwards() {
        let base = MarketModelParams::default();
        let prem = MarketModelParams {
            forward_premium: -0.05,
            ..base.clone()
        };
        let cal = Calendar::uniform(40, 4).unwrap();
        let spot = gen_spot_paths(&base, 2, cal, 1).unwrap();
        let a = gen_forward_curves(spot.clone(), &base).unwrap();
        let b = gen_forward_curves(spot, &prem).unwrap();
        assert_relative_eq!(
            b.forward(1, 3, 2).unwrap(),
            a.forward(1, 3, 2).unwrap() * (-0.05f64).exp(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn forwards_after_delivery_start_are_rejected() {
        let p = MarketModelParams::default();
        let cal = Calendar::new(90, vec![0, 31, 59]).unwrap();
        let set = gen_forward_curves(gen_spot_paths(&p, 1, cal, 0).unwrap(), &p).unwrap();
        assert!(matches!(
            set.forward(0, 31, 1),
            Err(MarketError::ForwardNotTradable {
                day: 31,
                month: 1,
                start: 31
            })
        ));
        let raw = gen_spot_paths(&p, 1, Calendar::uniform(10, 2).unwrap(), 0).unwrap();
        assert!(matches!(
            raw.forward(0, 0, 1),
            Err(MarketError::ForwardsMissing)
        ));
    }

    #[test]
    fn front_month_rolls_at_month_start() {
        let p = MarketModelParams::default();
        let cal = Calendar::new(120, vec![0, 31, 59, 90]).unwrap();
        let set = gen_forward_curves(gen_spot_paths(&p, 1, cal, 0).unwrap(), &p).unwrap();
        let f0 = set.rolling_front_month(0, 0).unwrap().unwrap();
        assert_eq!(f0.month, 1);
        assert_eq!(f0.price, set.forward(0, 0, 1).unwrap());
        assert_eq!(set.rolling_front_month(0, 30).unwrap().unwrap().month, 1);
        assert_eq!(set.rolling_front_month(0, 31).unwrap().unwrap().month, 2);
        assert_eq!(set.rolling_front_month(0, 89).unwrap().unwrap().month, 3);
        assert_eq!(set.rolling_front_month(0, 90).unwrap(), None);
        assert_eq!(set.rolling_front_month(0, 119).unwrap(), None);
    }

    #[test]
    fn csv_parses_rectangular_grid() {
        let set = read_csv("1,2,3\n4,5,6\n".as_bytes(), false).unwrap();
        assert_eq!((set.scenarios(), set.days()), (2, 3));
        assert_eq!(set.spot_row(0), &[1.0, 2.0, 3.0]);
        let with_header = read_csv("d0,d1\n1,2\n".as_bytes(), true).unwrap();
        assert_eq!(with_header.spot_row(0), &[1.0, 2.0]);
    }

    #[test]
    fn csv_reports_cell_location() {
        let err = read_csv("1,2,3\n4,5,abc\n".as_bytes(), false).unwrap_err();
        match err {
            MarketError::Cell { row, col, .. } => assert_eq!((row, col), (1, 2)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            read_csv("1,2,3\n4,5\n".as_bytes(), false),
            Err(MarketError::Ragged {
                row: 1,
                expected: 3,
                found: 2
            })
        ));
        assert!(matches!(
            read_csv("1,2\n0,5\n".as_bytes(), false),
            Err(MarketError::Cell { row: 1, col: 0, .. })
        ));
    }

    #[test]
    fn calendar_lookup() {
        let cal = Calendar::uniform(351, 12).unwrap();
        assert_eq!(cal.months(), 12);
        assert_eq!(cal.month_starts().iter().filter(|&&s| s == 0).count(), 1);
        let total: usize = (0..12).map(|j| cal.month_len(j)).sum();
        assert_eq!(total, 351);
        for k in 0..351 {
            let j = cal.month_of(k);
            assert!(cal.month_start(j) <= k && k < cal.month_end(j));
        }
        assert!(Calendar::new(10, vec![0, 5, 5]).is_err());
        assert!(Calendar::new(10, vec![1, 5]).is_err());
        assert!(Calendar::new(10, vec![0, 10]).is_err());
    }

    #[test]
    fn forwards_match_nested_monte_carlo() {
        let p = MarketModelParams {
            initial_log_deviation: 0.15,
            volatility: 0.05,
            ..MarketModelParams::default()
        };
        let cal = Calendar::uniform(90, 3).unwrap();
        let set = gen_forward_curves(gen_spot_paths(&p, 2, cal.clone(), 17).unwrap(), &p).unwrap();
        let (from, start, end) = (10, cal.month_start(2), cal.month_end(2));
        let x0 = (set.spot(1, from) / p.seasonal(from)).ln();

        let a = p.mean_reversion_speed;
        let sd = p.volatility * ((1.0 - (-2.0 * a).exp()) / (2.0 * a)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let averages: Vec<f64> = (0..n)
            .map(|_| {
                let mut x = x0;
                let mut total = 0.0;
                for d in from + 1..end {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x = x * (-a).exp() + sd * z;
                    if d >= start {
                        total += p.seasonal(d) * x.exp();
                    }
                }
                total / (end - start) as f64
            })
            .collect();
        let mean = averages.iter().sum::<f64>() / n as f64;
        let var = averages
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let forward = set.forward(1, from, 2).unwrap();
        assert!(
            (forward - mean).abs() <= 4.0 * se,
            "forward {forward}, simulated {mean} +- {se}"
        );
    }

    proptest::proptest! {
        #[test]
        fn csv_round_trip(rows in 1usize..5, days in 2usize..12, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spot: Vec<f64> = (0..rows * days).map(|_| rand::Rng::random_range(&mut rng, 0.01..500.0)).collect();
            let set = ScenarioSet::from_spot(spot, rows, Calendar::uniform(days, 1).unwrap()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("s.csv");
            set.export_csv(&path).unwrap();
            let back = ingest_csv(&path, false).unwrap();
            proptest::prop_assert_eq!(back.spot_matrix(), set.spot_matrix());
            proptest::prop_assert_eq!(back.scenarios(), rows);
        }
    }
}
