//! Search spaces and configurations.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use units_core::error::{param_err, Result};

/// One hyper-parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Real(f64),
    Text(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Self::Real(v) => Some(*v),
            Self::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_usize(&self) -> Option<usize> {
        match self {
            Self::Int(v) if *v >= 0 => Some(*v as usize),
            Self::Real(v) if *v >= 0.0 && v.fract() == 0.0 => Some(*v as usize),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Self::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Self::Bool(b) => Some(*b),
            _ => None,
        }
    }

    /// Parses `text` as a value of the same variant as `self`.
    pub fn parse_like(&self, text: &str) -> Result<Self> {
        let bad = || param_err(format!("cannot parse '{text}' as {}", self.type_name()));
        Ok(match self {
            Self::Bool(_) => Self::Bool(text.parse().map_err(|_| bad())?),
            Self::Int(_) => Self::Int(text.parse().map_err(|_| bad())?),
            Self::Real(_) => Self::Real(text.parse().map_err(|_| bad())?),
            Self::Text(_) => Self::Text(text.to_string()),
        })
    }

    fn type_name(&self) -> &'static str {
        match self {
            Self::Bool(_) => "a boolean",
            Self::Int(_) => "an integer",
            Self::Real(_) => "a real number",
            Self::Text(_) => "text",
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bool(v) => write!(f, "{v}"),
            Self::Int(v) => write!(f, "{v}"),
            Self::Real(v) => write!(f, "{v}"),
            Self::Text(v) => f.write_str(v),
        }
    }
}

/// A full or partial configuration, ordered by key.
pub type Config = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Dimension {
    Real { low: f64, high: f64, log: bool },
    Int { low: i64, high: i64 },
    Categorical { choices: Vec<String> },
}

impl Dimension {
    pub fn real(low: f64, high: f64) -> Self {
        Self::Real { low, high, log: false }
    }

    pub fn log_real(low: f64, high: f64) -> Self {
        Self::Real { low, high, log: true }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Real { low, high, log } => {
                if !(low.is_finite() && high.is_finite() && low <= high) {
                    return Err(param_err(format!("empty real range [{low}, {high}]")));
                }
                if *log && *low <= 0.0 {
                    return Err(param_err(format!("log range [{low}, {high}] must be strictly positive")));
                }
            }
            Self::Int { low, high } => {
                if low > high {
                    return Err(param_err(format!("empty integer range [{low}, {high}]")));
                }
            }
            Self::Categorical { choices } => {
                if choices.is_empty() {
                    return Err(param_err("categorical dimension without choices"));
                }
            }
        }
        Ok(())
    }

    /// Position of `v` in `[0, 1]` (log-scaled where configured); the
    /// category index for categorical dimensions.
    pub(crate) fn to_unit(&self, v: &ParamValue) -> Option<f64> {
        match self {
            Self::Real { low, high, log } => {
                let x = v.as_f64()?;
                if high == low {
                    return Some(0.5);
                }
                Some(if *log {
                    (x.ln() - low.ln()) / (high.ln() - low.ln())
                } else {
                    (x - low) / (high - low)
                })
            }
            Self::Int { low, high } => {
                let x = v.as_f64()?;
                Some(if high == low {
                    0.5
                } else {
                    (x - *low as f64 + 0.5) / ((high - low + 1) as f64)
                })
            }
            Self::Categorical { choices } => {
                let s = v.as_str()?;
                choices.iter().position(|c| c == s).map(|i| i as f64)
            }
        }
    }

    pub(crate) fn from_unit(&self, u: f64) -> ParamValue {
        let u = u.clamp(0.0, 1.0);
        match self {
            Self::Real { low, high, log } => ParamValue::Real(if *log {
                (low.ln() + u * (high.ln() - low.ln())).exp().clamp(*low, *high)
            } else {
                low + u * (high - low)
            }),
            Self::Int { low, high } => {
                let span = (high - low + 1) as f64;
                ParamValue::Int((*low + (u * span).floor() as i64).min(*high))
            }
            Self::Categorical { choices } => {
                let i = ((u * choices.len() as f64) as usize).min(choices.len() - 1);
                ParamValue::Text(choices[i].clone())
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> ParamValue {
        match self {
            Self::Categorical { choices } => ParamValue::Text(choices[rng.random_range(0..choices.len())].clone()),
            _ => self.from_unit(rng.random::<f64>()),
        }
    }

    pub fn contains(&self, v: &ParamValue) -> bool {
        match self {
            Self::Real { low, high, .. } => v.as_f64().is_some_and(|x| (*low..=*high).contains(&x)),
            Self::Int { low, high } => matches!(v, ParamValue::Int(x) if (*low..=*high).contains(x)),
            Self::Categorical { choices } => v.as_str().is_some_and(|s| choices.iter().any(|c| c == s)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: BTreeMap<String, Dimension>,
}

impl SearchSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, dim: Dimension) -> Self {
        self.dims.insert(name.into(), dim);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(param_err("search space has no dimensions"));
        }
        for (name, d) in &self.dims {
            d.validate().map_err(|e| param_err(format!("dimension '{name}': {e}")))?;
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Config {
        self.dims.iter().map(|(k, d)| (k.clone(), d.sample(rng))).collect()
    }
}
