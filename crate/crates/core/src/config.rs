//! Run configuration for the command-line tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lsmc::LsmcConfig;
use crate::market::{
    gen_forward_curves, gen_spot_paths, ingest_csv, Calendar, MarketError, MarketModelParams,
    ScenarioSet,
};
use crate::storage::{StorageError, StorageSpec};
use crate::train::{SfmodConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("unknown preset `{0}` (expected reference-smod or reference-sfmod)")]
    Preset(String),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Smod,
    Sfmod,
    Lsmc,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Smod => "smod",
            ModelKind::Sfmod => "sfmod",
            ModelKind::Lsmc => "lsmc",
        }
    }
}

/// Scenario source: either synthetic (`count` and `days`) or a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub count: Option<usize>,
    pub days: Option<usize>,
    pub csv: Option<PathBuf>,
    pub has_header: bool,
    /// Number of equal delivery months; ignored when `month_starts` is set.
    pub months: usize,
    pub month_starts: Option<Vec<usize>>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            count: None,
            days: None,
            csv: None,
            has_header: false,
            months: 12,
            month_starts: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoragePreset {
    /// Withdrawal -600 then -3072, injection 2808 then 408 (per day, scaled
    /// to the horizon).
    TwoRegime,
    /// Constant `injection` and `withdrawal` rates.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageConfig {
    pub preset: StoragePreset,
    pub capacity: f64,
    pub injection: Option<f64>,
    pub withdrawal: Option<f64>,
    pub kappa: f64,
    pub overhead: f64,
}

impl Default for StorageConfig {
    fn default() -> Self {
        Self {
            preset: StoragePreset::TwoRegime,
            capacity: 250_000.0,
            injection: None,
            withdrawal: None,
            kappa: 0.0,
            overhead: 0.0,
        }
    }
}

impl StorageConfig {
    pub fn build(&self, days: usize, alpha: f64) -> Result<StorageSpec, StorageError> {
        let spec = match self.preset {
            StoragePreset::TwoRegime => StorageSpec::two_regime(days, self.capacity)?,
            StoragePreset::Constant => StorageSpec::constant(
                days,
                self.capacity,
                self.injection.unwrap_or(0.0),
                self.withdrawal.unwrap_or(0.0),
            )?,
        };
        spec.with_costs(self.kappa, self.overhead)?
            .with_alpha(alpha)
    }
}

/// Which rows the benchmark is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LsmcRows {
    /// The network's training rows.
    Train,
    /// Training and validation rows.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LsmcSection {
    #[serde(flatten)]
    pub solver: LsmcConfig,
    pub fit_on: LsmcRows,
}

impl Default for LsmcSection {
    fn default() -> Self {
        Self {
            solver: LsmcConfig::default(),
            fit_on: LsmcRows::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds scenario generation, network initialization and batch order.
    pub seed: u64,
    pub model: ModelKind,
    pub out: PathBuf,
    pub scenarios: ScenarioConfig,
    pub market: MarketModelParams,
    pub storage: StorageConfig,
    /// Training settings shared by both network models. The batch size and
    /// risk aversion of the forward model come from `[sfmod]` when set there.
    pub train: TrainConfig,
    pub sfmod: SfmodOverrides,
    pub lsmc: LsmcSection,
}

/// Forward-model settings that differ from `[train]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfmodOverrides {
    pub alpha: f64,
    pub batch_size: Option<usize>,
    pub risk_aversion: Option<f64>,
}

impl Default for SfmodOverrides {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            batch_size: None,
            risk_aversion: None,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::reference_smod()
    }
}

impl RunConfig {
    /// 1000 scenarios of 351 days in 12 months, two-regime storage with
    /// capacity 250000, spot-only model with the reference training settings.
    pub fn reference_smod() -> Self {
        Self {
            seed: 0,
            model: ModelKind::Smod,
            out: PathBuf::from("out"),
            scenarios: ScenarioConfig {
                count: Some(1000),
                days: Some(351),
                ..ScenarioConfig::default()
            },
            market: MarketModelParams::default(),
            storage: StorageConfig::default(),
            train: TrainConfig::reference_smod(),
            sfmod: SfmodOverrides::default(),
            lsmc: LsmcSection::default(),
        }
    }

    /// As [`RunConfig::reference_smod`] with the forward model, batch size 100,
    /// risk aversion 10 and `alpha = 0.5`.
    pub fn reference_sfmod() -> Self {
        let sf = SfmodConfig::reference_sfmod();
        Self {
            model: ModelKind::Sfmod,
            sfmod: SfmodOverrides {
                alpha: sf.alpha,
                batch_size: Some(sf.base.batch_size),
                risk_aversion: Some(sf.base.risk_aversion),
            },
            ..Self::reference_smod()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "reference-smod" => Ok(Self::reference_smod()),
            "reference-sfmod" => Ok(Self::reference_sfmod()),
            other => Err(ConfigError::Preset(other.to_string())),
        }
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(e),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn sfmod_config(&self) -> SfmodConfig {
        let mut base = self.train_config();
        if let Some(b) = self.sfmod.batch_size {
            base.batch_size = b;
        }
        if let Some(r) = self.sfmod.risk_aversion {
            base.risk_aversion = r;
        }
        SfmodConfig {
            base,
            alpha: self.sfmod.alpha,
        }
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut e = Vec::new();
        let s = &self.scenarios;
        let synthetic = s.count.is_some() || s.days.is_some();
        match (&s.csv, synthetic) {
            (Some(_), true) => {
                e.push("scenarios: set either `csv` or `count`/`days`, not both".to_string())
            }
            (None, false) => {
                e.push("scenarios: no source (set `csv` or `count` and `days`)".to_string())
            }
            (None, true) => {
                if s.count.unwrap_or(0) == 0 {
                    e.push("scenarios.count must be at least 1".to_string());
                }
                if s.days.unwrap_or(0) == 0 {
                    e.push("scenarios.days must be at least 1".to_string());
                }
            }
            (Some(_), false) => {}
        }
        if s.month_starts.is_none() && s.months == 0 {
            e.push("scenarios.months must be at least 1".to_string());
        }
        if let Err(err) = self.market.validate() {
            e.push(format!("market: {err}"));
        }
        let st = &self.storage;
        if !(st.capacity >= 0.0 && st.capacity.is_finite()) {
            e.push(format!(
                "storage.capacity {} must be nonnegative",
                st.capacity
            ));
        }
        if st.preset == StoragePreset::Constant {
            match st.injection {
                Some(u) if u >= 0.0 => {}
                _ => e.push(
                    "storage.injection must be set and nonnegative for the constant preset"
                        .to_string(),
                ),
            }
            match st.withdrawal {
                Some(l) if l <= 0.0 => {}
                _ => e.push(
                    "storage.withdrawal must be set and nonpositive for the constant preset"
                        .to_string(),
                ),
            }
        }
        if !(st.kappa >= 0.0 && st.kappa.is_finite()) {
            e.push(format!("storage.kappa {} must be nonnegative", st.kappa));
        }
        if !(st.overhead >= 0.0 && st.overhead.is_finite()) {
            e.push(format!(
                "storage.overhead {} must be nonnegative",
                st.overhead
            ));
        }
        let available = if s.csv.is_none() {
            s.count.unwrap_or(0)
        } else {
            usize::MAX
        };
        let train = match self.model {
            ModelKind::Sfmod => self.sfmod_config().base,
            _ => self.train_config(),
        };
        e.extend(
            train
                .problems(available)
                .into_iter()
                .map(|p| format!("train: {p}")),
        );
        if !(0.0..=1.0).contains(&self.sfmod.alpha) {
            e.push(format!(
                "sfmod.alpha {} must lie in [0, 1]",
                self.sfmod.alpha
            ));
        }
        e.extend(
            self.lsmc
                .solver
                .problems()
                .into_iter()
                .map(|p| format!("lsmc: {p}")),
        );
        if e.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(e))
        }
    }

    /// Loads or generates the scenario set; forward curves are attached when
    /// `with_forwards` is set.
    pub fn scenario_set(&self, with_forwards: bool) -> Result<ScenarioSet, ConfigError> {
        let s = &self.scenarios;
        let set = match &s.csv {
            Some(path) => {
                let raw = ingest_csv(path, s.has_header)?;
                let cal = self.calendar(raw.days())?;
                raw.with_calendar(cal)?
            }
            None => {
                let days = s.days.unwrap_or(0);
                gen_spot_paths(
                    &self.market,
                    s.count.unwrap_or(0),
                    self.calendar(days)?,
                    self.seed,
                )?
            }
        };
        if with_forwards {
            Ok(gen_forward_curves(set, &self.market)?)
        } else {
            Ok(set)
        }
    }

    fn calendar(&self, days: usize) -> Result<Calendar, MarketError> {
        match &self.scenarios.month_starts {
            Some(starts) => Calendar::new(days, starts.clone()),
            None => Calendar::uniform(days, self.scenarios.months),
        }
    }

    pub fn storage_spec(&self, days: usize) -> Result<StorageSpec, ConfigError> {
        let alpha = if self.model == ModelKind::Sfmod {
            self.sfmod.alpha
        } else {
            0.0
        };
        Ok(self.storage.build(days, alpha)?)
    }
}
