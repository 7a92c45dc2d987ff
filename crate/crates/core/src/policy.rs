//! Feedforward strategy networks with parameter sharing across days.
//!
//! A policy holds `N` sub-networks of identical shape. Day `k` is served by
//! sub-network `day_to_subnet[k]`. Each sub-network is
//! `sigmoid . A^L . sigmoid . ... . sigmoid . A^1`, i.e. the affine output
//! layer is followed by a sigmoid so that every output lies in `(0, 1)` and
//! can be mapped linearly onto the day's admissible action interval.
//!
//! Parameters live in one flat vector. Sub-network `s` occupies
//! `theta[s * block .. (s + 1) * block]`; inside a block each layer stores
//! its weight matrix row-major (`out x in`) followed by its bias vector.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Backend, Eval};
use crate::market::Calendar;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid normalization statistics: {0}")]
    Norm(String),
    #[error("parameter vector has {found} entries, architecture needs {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error("day map covers {found} days, expected {expected}")]
    DayMap { expected: usize, found: usize },
    #[error("action interval is empty: lower bound {lo} exceeds upper bound {hi}")]
    EmptyInterval { lo: f64, hi: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Layer widths of one sub-network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl Architecture {
    /// Spot-only policy: inputs `(k, H, S)`, one output.
    pub fn spot(hidden: Vec<usize>) -> Self {
        Self {
            input_dim: 3,
            hidden,
            output_dim: 1,
        }
    }

    /// Spot-and-forward policy: inputs `(k, H, S, F)`, two outputs.
    pub fn spot_forward(hidden: Vec<usize>) -> Self {
        Self {
            input_dim: 4,
            hidden,
            output_dim: 2,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !matches!((self.input_dim, self.output_dim), (3, 1) | (4, 2)) {
            return Err(PolicyError::Architecture(format!(
                "unsupported input/output dims {}/{} (expected 3/1 or 4/2)",
                self.input_dim, self.output_dim
            )));
        }
        if self.hidden.contains(&0) {
            return Err(PolicyError::Architecture(
                "hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `(in, out)` of each affine map.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let dims: Vec<usize> = std::iter::once(self.input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect();
        (0..dims.len() - 1).map(move |l| (dims[l], dims[l + 1]))
    }

    /// Parameters per sub-network.
    pub fn block_size(&self) -> usize {
        self.layers().map(|(i, o)| o * i + o).sum()
    }

    pub fn max_width(&self) -> usize {
        self.hidden
            .iter()
            .copied()
            .chain([self.input_dim, self.output_dim])
            .max()
            .unwrap()
    }
}

/// How days are assigned to sub-networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubnetScheme {
    /// One sub-network per calendar month.
    Monthly,
    /// A single network for every day.
    Shared,
    /// One network per day.
    PerDay,
}

impl SubnetScheme {
    pub fn day_map(self, calendar: &Calendar) -> Vec<usize> {
        let days = calendar.days();
        match self {
            SubnetScheme::Monthly => (0..days).map(|k| calendar.month_of(k)).collect(),
            SubnetScheme::Shared => vec![0; days],
            SubnetScheme::PerDay => (0..days).collect(),
        }
    }
}

/// Raw network inputs for one day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Features {
    pub day: usize,
    pub level: f64,
    pub spot: f64,
    /// Front-month forward price (spot-and-forward policies only).
    pub forward: Option<f64>,
}

/// Per-feature affine normalization `(x - shift) / scale`.
///
/// Feature order: day, level, spot, forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

impl NormStats {
    /// Fits statistics on training data only.
    ///
    /// Day maps to `k / (K - 1)`, level to `H / c`, prices are standardized
    /// by their pooled mean and standard deviation. A zero scale (constant
    /// feature) is replaced by one.
    pub fn fit(days: usize, capacity: f64, spot: &[f64], forward: Option<&[f64]>) -> Self {
        let mut shift = vec![0.0, 0.0];
        let mut scale = vec![days.saturating_sub(1) as f64, capacity];
        let (m, s) = mean_std(spot.iter().copied());
        shift.push(m);
        scale.push(s);
        if let Some(f) = forward {
            let (m, s) = mean_std(f.iter().copied());
            shift.push(m);
            scale.push(s);
        }
        const NAMES: [&str; 4] = ["day", "level", "spot", "forward"];
        for (i, s) in scale.iter_mut().enumerate() {
            if !(*s > 0.0 && s.is_finite()) {
                log::warn!(
                    "normalization: feature `{}` has zero scale, using 1",
                    NAMES[i]
                );
                *s = 1.0;
            }
        }
        Self { shift, scale }
    }

    pub fn dims(&self) -> usize {
        self.shift.len()
    }

    pub fn validate(&self, input_dim: usize) -> Result<(), PolicyError> {
        if self.shift.len() != input_dim || self.scale.len() != input_dim {
            return Err(PolicyError::Norm(format!(
                "{} shifts / {} scales for {input_dim} inputs",
                self.shift.len(),
                self.scale.len()
            )));
        }
        if self.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(PolicyError::Norm(
                "scales must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    pub fn normalize(&self, f: &Features) -> Vec<f64> {
        let mut raw = vec![f.day as f64, f.level, f.spot];
        if self.dims() == 4 {
            raw.push(f.forward.unwrap_or(f.spot));
        }
        raw.iter()
            .enumerate()
            .map(|(i, x)| (x - self.shift[i]) / self.scale[i])
            .collect()
    }
}

/// Parameters of a shared-weight strategy network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    arch: Architecture,
    subnets: usize,
    day_to_subnet: Vec<usize>,
    norm: NormStats,
    theta: Vec<f64>,
}

impl PolicyParams {
    pub fn new(
        arch: Architecture,
        day_to_subnet: Vec<usize>,
        norm: NormStats,
        theta: Vec<f64>,
    ) -> Result<Self, PolicyError> {
        arch.validate()?;
        norm.validate(arch.input_dim)?;
        if day_to_subnet.is_empty() {
            return Err(PolicyError::DayMap {
                expected: 1,
                found: 0,
            });
        }
        let subnets = day_to_subnet.iter().max().unwrap() + 1;
        if subnets > day_to_subnet.len() {
            return Err(PolicyError::Architecture(format!(
                "{subnets} sub-networks for {} days",
                day_to_subnet.len()
            )));
        }
        let expected = subnets * arch.block_size();
        if theta.len() != expected {
            return Err(PolicyError::ParamCount {
                expected,
                found: theta.len(),
            });
        }
        Ok(Self {
            arch,
            subnets,
            day_to_subnet,
            norm,
            theta,
        })
    }

    /// Fan-in scaled uniform weights `U(-1/sqrt(in), 1/sqrt(in))`, zero biases.
    pub fn init(
        arch: Architecture,
        day_to_subnet: Vec<usize>,
        norm: NormStats,
        seed: u64,
    ) -> Result<Self, PolicyError> {
        arch.validate()?;
        let subnets = day_to_subnet.iter().max().map_or(0, |m| m + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(subnets * arch.block_size());
        for _ in 0..subnets {
            for (fan_in, out) in arch.layers() {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for _ in 0..out * fan_in {
                    theta.push(rng.random_range(-bound..bound));
                }
                theta.extend(std::iter::repeat_n(0.0, out));
            }
        }
        Self::new(arch, day_to_subnet, norm, theta)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }
    pub fn subnets(&self) -> usize {
        self.subnets
    }
    pub fn days(&self) -> usize {
        self.day_to_subnet.len()
    }
    pub fn subnet_of(&self, day: usize) -> usize {
        self.day_to_subnet[day]
    }
    pub fn day_to_subnet(&self) -> &[usize] {
        &self.day_to_subnet
    }
    pub fn norm(&self) -> &NormStats {
        &self.norm
    }
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }
    pub fn output_dim(&self) -> usize {
        self.arch.output_dim
    }

    /// Normalized input vector for `features` on a backend.
    pub fn inputs<B: Backend>(
        &self,
        b: &mut B,
        features: &Features,
        level: B::Value,
    ) -> Vec<B::Value> {
        let n = &self.norm;
        let mut x = Vec::with_capacity(self.arch.input_dim);
        x.push(b.constant((features.day as f64 - n.shift[0]) / n.scale[0]));
        let lv = b.offset(level, -n.shift[1]);
        x.push(b.scale(lv, 1.0 / n.scale[1]));
        x.push(b.constant((features.spot - n.shift[2]) / n.scale[2]));
        if self.arch.input_dim == 4 {
            let f = features.forward.unwrap_or(features.spot);
            x.push(b.constant((f - n.shift[3]) / n.scale[3]));
        }
        x
    }

    /// Evaluates the sub-network of `day` on normalized `inputs`, with
    /// parameters given as backend values `theta` (same layout as
    /// [`Self::theta`]). Outputs lie in `(0, 1)`.
    pub fn forward_on<B: Backend>(
        &self,
        b: &mut B,
        theta: &[B::Value],
        day: usize,
        inputs: &[B::Value],
    ) -> Vec<B::Value> {
        debug_assert_eq!(inputs.len(), self.arch.input_dim);
        let block = self.arch.block_size();
        let s = self.day_to_subnet[day];
        let params = &theta[s * block..(s + 1) * block];
        let mut offset = 0;
        let mut current: Vec<B::Value> = inputs.to_vec();
        for (fan_in, out) in self.arch.layers() {
            let weights = &params[offset..offset + out * fan_in];
            let biases = &params[offset + out * fan_in..offset + out * fan_in + out];
            offset += out * fan_in + out;
            let mut next = Vec::with_capacity(out);
            for o in 0..out {
                let z = b.affine(biases[o], &weights[o * fan_in..(o + 1) * fan_in], &current);
                next.push(b.sigmoid(z));
            }
            current = next;
        }
        current
    }

    /// Plain evaluation: raw outputs in `(0, 1)` for the given features.
    pub fn forward(&self, features: &Features) -> Vec<f64> {
        let mut e = Eval;
        let x = self.inputs(&mut e, features, features.level);
        self.forward_on(&mut e, &self.theta, features.day, &x)
    }

    /// Spot-and-forward policy whose spot head reproduces this spot-only
    /// policy exactly: the forward input gets zero weight and the forward
    /// head starts at zero (output 0.5).
    pub fn embed_spot_only(&self, forward_norm: (f64, f64)) -> Result<Self, PolicyError> {
        if self.arch.output_dim != 1 {
            return Err(PolicyError::Architecture(
                "policy already has a forward head".into(),
            ));
        }
        let arch = Architecture::spot_forward(self.arch.hidden.clone());
        let old_block = self.arch.block_size();
        let mut theta = Vec::with_capacity(self.subnets * arch.block_size());
        for s in 0..self.subnets {
            let old = &self.theta[s * old_block..(s + 1) * old_block];
            let mut off = 0;
            let layers: Vec<_> = self.arch.layers().collect();
            for (l, &(fan_in, out)) in layers.iter().enumerate() {
                let w = &old[off..off + out * fan_in];
                let bias = &old[off + out * fan_in..off + out * fan_in + out];
                off += out * fan_in + out;
                let first = l == 0;
                let last = l + 1 == layers.len();
                for o in 0..out {
                    theta.extend_from_slice(&w[o * fan_in..(o + 1) * fan_in]);
                    if first {
                        theta.push(0.0);
                    }
                }
                if last {
                    // forward head row
                    theta.extend(std::iter::repeat_n(
                        0.0,
                        if first { fan_in + 1 } else { fan_in },
                    ));
                }
                theta.extend_from_slice(bias);
                if last {
                    theta.push(0.0);
                }
            }
        }
        let mut norm = self.norm.clone();
        norm.shift.push(forward_norm.0);
        norm.scale.push(if forward_norm.1 > 0.0 {
            forward_norm.1
        } else {
            1.0
        });
        Self::new(arch, self.day_to_subnet.clone(), norm, theta)
    }
}

/// Maps a raw output in `[0, 1]` linearly onto `[lo, hi]`. A degenerate
/// interval returns `lo`.
pub fn squash_action(raw: f64, lo: f64, hi: f64) -> Result<f64, PolicyError> {
    if lo > hi {
        return Err(PolicyError::EmptyInterval { lo, hi });
    }
    if lo == hi {
        return Ok(lo);
    }
    Ok(lo + raw * (hi - lo))
}

/// [`squash_action`] on a backend; the caller guarantees `lo <= hi`.
pub fn squash_on<B: Backend>(b: &mut B, raw: B::Value, lo: B::Value, hi: B::Value) -> B::Value {
    let width = b.sub(hi, lo);
    let step = b.mul(raw, width);
    b.add(lo, step)
}

const CHECKPOINT_FORMAT: &str = "gas-storage-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: String,
    params: PolicyParams,
}

/// Writes a versioned JSON checkpoint.
pub fn save_checkpoint(path: &Path, params: &PolicyParams) -> Result<(), PolicyError> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: if params.output_dim() == 1 {
            "smod"
        } else {
            "sfmod"
        }
        .into(),
        params: params.clone(),
    };
    let mut text = serde_json::to_string_pretty(&ck)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, PolicyError> {
    let text = std::fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(PolicyError::Checkpoint(format!(
            "unknown format `{}`",
            ck.format
        )));
    }
    if ck.version != CHECKPOINT_VERSION {
        return Err(PolicyError::Checkpoint(format!(
            "unsupported version {}",
            ck.version
        )));
    }
    let p = ck.params;
    // Re-run validation on untrusted input.
    PolicyParams::new(p.arch, p.day_to_subnet, p.norm, p.theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;

    fn unit_norm(dims: usize) -> NormStats {
        NormStats {
            shift: vec![0.0; dims],
            scale: vec![1.0; dims],
        }
    }

    fn feats(day: usize, level: f64, spot: f64) -> Features {
        Features {
            day,
            level,
            spot,
            forward: None,
        }
    }

    #[test]
    fn zero_network_outputs_one_half() {
        let arch = Architecture::spot(vec![16]);
        let n = arch.block_size();
        let p = PolicyParams::new(arch, vec![0; 5], unit_norm(3), vec![0.0; n]).unwrap();
        assert_eq!(p.forward(&feats(2, 0.3, -4.0)), vec![0.5]);
        let arch = Architecture::spot_forward(vec![4, 3]);
        let n = arch.block_size();
        let p = PolicyParams::new(arch, vec![0; 5], unit_norm(4), vec![0.0; n]).unwrap();
        assert_eq!(p.forward(&feats(1, 0.0, 1.0)), vec![0.5, 0.5]);
    }

    #[test]
    fn single_affine_layer_is_sigmoid_of_input() {
        let arch = Architecture::spot(vec![]);
        // weights (1, 0, 0), bias 0
        let p =
            PolicyParams::new(arch, vec![0; 10], unit_norm(3), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        for x in [0usize, 1, 3, 7] {
            assert_eq!(p.forward(&feats(x, 5.0, 2.0))[0], sigmoid(x as f64));
        }
    }

    #[test]
    fn squash_maps_unit_interval() {
        assert_eq!(squash_action(0.5, -30.0, 20.0).unwrap(), -5.0);
        assert_eq!(squash_action(0.0, -30.0, 20.0).unwrap(), -30.0);
        assert_eq!(squash_action(1.0, -30.0, 20.0).unwrap(), 20.0);
        assert_eq!(squash_action(0.123, 7.0, 7.0).unwrap(), 7.0);
        assert!(matches!(
            squash_action(0.5, 1.0, 0.0),
            Err(PolicyError::EmptyInterval { .. })
        ));
    }

    #[test]
    fn normalization_endpoints_and_centering() {
        let spot = [10.0, 20.0, 30.0];
        let n = NormStats::fit(11, 200.0, &spot, None);
        let full = n.normalize(&feats(10, 200.0, 20.0));
        assert_eq!(full, vec![1.0, 1.0, 0.0]);
        let empty = n.normalize(&feats(0, 0.0, 20.0));
        assert_eq!(empty[..2], [0.0, 0.0]);
        assert_eq!(NormStats::fit(11, 200.0, &spot, None), n);
        let constant = NormStats::fit(11, 200.0, &[5.0, 5.0], None);
        assert_eq!(constant.scale[2], 1.0);
    }

    #[test]
    fn default_architecture_block_shape() {
        let cal = Calendar::uniform(351, 12).unwrap();
        let map = SubnetScheme::Monthly.day_map(&cal);
        let p = PolicyParams::init(Architecture::spot(vec![16]), map, unit_norm(3), 1).unwrap();
        assert_eq!(p.subnets(), 12);
        let layers: Vec<_> = p.arch().layers().collect();
        assert_eq!(layers, vec![(3, 16), (16, 1)]);
        assert_eq!(p.theta().len(), 12 * (3 * 16 + 16 + 16 + 1));
        // Same month, same sub-network.
        assert_eq!(p.subnet_of(0), p.subnet_of(cal.month_end(0) - 1));
        assert_ne!(p.subnet_of(0), p.subnet_of(cal.month_end(0)));
    }

    #[test]
    fn init_is_seeded() {
        let mk = |seed| {
            PolicyParams::init(
                Architecture::spot(vec![16]),
                vec![0, 0, 1],
                unit_norm(3),
                seed,
            )
            .unwrap()
        };
        assert_eq!(mk(4), mk(4));
        assert!(mk(4).theta().iter().zip(mk(5).theta()).any(|(a, b)| a != b));
        let p = mk(4);
        let bound = 1.0 / 3f64.sqrt();
        assert!(p.theta()[..48].iter().all(|w| w.abs() <= bound));
        assert!(p.theta()[48..64].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn construction_rejects_mismatched_shapes() {
        let arch = Architecture::spot(vec![4]);
        assert!(matches!(
            PolicyParams::new(arch.clone(), vec![0, 0], unit_norm(3), vec![0.0; 3]),
            Err(PolicyError::ParamCount { .. })
        ));
        assert!(PolicyParams::new(
            arch.clone(),
            vec![0],
            unit_norm(4),
            vec![0.0; arch.block_size()]
        )
        .is_err());
        let bad = Architecture {
            input_dim: 5,
            hidden: vec![],
            output_dim: 1,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn embedded_spot_head_matches() {
        let cal = Calendar::uniform(30, 3).unwrap();
        let norm = NormStats::fit(30, 100.0, &[1.0, 2.0, 4.0], None);
        let p = PolicyParams::init(
            Architecture::spot(vec![5, 3]),
            SubnetScheme::Monthly.day_map(&cal),
            norm,
            9,
        )
        .unwrap();
        let q = p.embed_spot_only((3.0, 2.0)).unwrap();
        for day in [0, 11, 29] {
            let f = Features {
                day,
                level: 40.0,
                spot: 2.5,
                forward: Some(8.0),
            };
            let a = p.forward(&f);
            let b = q.forward(&f);
            assert_eq!(a[0].to_bits(), b[0].to_bits());
            assert_eq!(b[1], 0.5);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let p =
            PolicyParams::init(Architecture::spot(vec![3]), vec![0, 1], unit_norm(3), 2).unwrap();
        save_checkpoint(&path, &p).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 9");
        std::fs::write(&path, text).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
