//! Hyper-parameter configuration in three modes: documented defaults,
//! manual overrides, and smart (TPE) search.

pub mod search;
pub mod space;
pub mod table;

use std::fmt::{self, Display};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use units_core::error::{param_err, Result};

pub use search::{bayes_optimize, random_search, read_records_jsonl, write_records_jsonl, TuningOutcome, TuningRecord};
pub use space::{Config, Dimension, ParamValue, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigMode {
    #[default]
    Default,
    Manual,
    Smart,
}

impl FromStr for ConfigMode {
    type Err = units_core::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Self::Default),
            "manual" => Ok(Self::Manual),
            "smart" => Ok(Self::Smart),
            other => Err(param_err(format!("unknown mode '{other}' (default, manual, smart)"))),
        }
    }
}

impl Display for ConfigMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Default => "default",
            Self::Manual => "manual",
            Self::Smart => "smart",
        })
    }
}

fn unknown_key(key: &str, valid: &Config) -> units_core::Error {
    let names: Vec<&str> = valid.keys().map(String::as_str).collect();
    param_err(format!("unknown key '{key}'; valid keys: {}", names.join(", ")))
}

/// Parses `key=value` pairs, typing each value like its default.
pub fn parse_overrides<S: AsRef<str>>(pairs: &[S], defaults: &Config) -> Result<Config> {
    let mut out = Config::new();
    for pair in pairs {
        let pair = pair.as_ref();
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| param_err(format!("override '{pair}' is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        let default = defaults.get(k).ok_or_else(|| unknown_key(k, defaults))?;
        out.insert(k.to_string(), default.parse_like(v)?);
    }
    Ok(out)
}

/// `base` with every entry of `patch` replaced.
pub fn patch(base: &Config, patch: &Config) -> Result<Config> {
    let mut out = base.clone();
    for (k, v) in patch {
        if !base.contains_key(k) {
            return Err(unknown_key(k, base));
        }
        out.insert(k.clone(), v.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub config: Config,
    /// Trials of the smart search; empty in the other modes.
    pub records: Vec<TuningRecord>,
}

/// Resolves the full configuration for `mode`.
///
/// Default returns `defaults` verbatim and rejects overrides; manual patches
/// the defaults; smart searches `space` (on top of the patched defaults)
/// for `budget` trials of `objective` (lower is better).
pub fn resolve_config<F, E>(
    mode: ConfigMode,
    defaults: &Config,
    overrides: &Config,
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    mut objective: F,
) -> Result<Resolved>
where
    F: FnMut(&Config) -> std::result::Result<f64, E>,
    E: Display,
{
    let base = patch(defaults, overrides)?;
    match mode {
        ConfigMode::Default => {
            if !overrides.is_empty() {
                return Err(param_err("default mode takes no overrides; use manual mode"));
            }
            Ok(Resolved {
                config: defaults.clone(),
                records: Vec::new(),
            })
        }
        ConfigMode::Manual => Ok(Resolved {
            config: base,
            records: Vec::new(),
        }),
        ConfigMode::Smart => {
            if let Some(k) = space.dims.keys().find(|k| !defaults.contains_key(*k)) {
                return Err(unknown_key(k, defaults));
            }
            let full = |sampled: &Config| patch(&base, sampled);
            let outcome = bayes_optimize(
                |sampled: &Config| -> std::result::Result<f64, String> {
                    let cfg = full(sampled).map_err(|e| e.to_string())?;
                    objective(&cfg).map_err(|e| e.to_string())
                },
                space,
                budget,
                seed,
            )?;
            Ok(Resolved {
                config: full(&outcome.best_config)?,
                records: outcome
                    .records
                    .into_iter()
                    .map(|mut r| {
                        r.config = full(&r.config).unwrap_or(r.config);
                        r
                    })
                    .collect(),
            })
        }
    }
}

/// Deterministic split of `0..n` into (train, holdout) with a holdout
/// fraction of `holdout` (at least one sample on each side when `n >= 2`).
pub fn holdout_split(n: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let k = if n >= 2 {
        ((n as f64 * holdout).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let held = idx.split_off(n - k);
    idx.sort_unstable();
    let mut held = held;
    held.sort_unstable();
    (idx, held)
}

pub const HOLDOUT_FRACTION: f64 = 0.2;
