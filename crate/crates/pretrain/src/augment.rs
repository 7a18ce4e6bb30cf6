//! Series augmentations used to build contrastive views.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use units_core::data::gaussian;
use units_core::error::{param_err, Error, Result};
use units_core::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Augmentation {
    /// Additive Gaussian noise with standard deviation `sigma`.
    Jitter { sigma: f64 },
    /// Per-channel multiplicative factor drawn from `N(1, sigma)`.
    Scale { sigma: f64 },
    /// Random crop covering `ratio` of the series, linearly resampled back
    /// to full length.
    CropResize { ratio: f64 },
    /// Split into `n` equal segments and shuffle them.
    PermuteSegments { n: usize },
}

impl Augmentation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Jitter { sigma } | Self::Scale { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(param_err(format!("augmentation sigma {sigma} must be finite and >= 0")))
            }
            Self::CropResize { ratio } if !(ratio > 0.0 && ratio <= 1.0) => {
                Err(param_err(format!("crop ratio {ratio} outside (0, 1]")))
            }
            Self::PermuteSegments { n: 0 } => Err(param_err("permute_segments needs n >= 1")),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Jitter { sigma } => write!(f, "jitter({sigma})"),
            Self::Scale { sigma } => write!(f, "scale({sigma})"),
            Self::CropResize { ratio } => write!(f, "crop_resize({ratio})"),
            Self::PermuteSegments { n } => write!(f, "permute_segments({n})"),
        }
    }
}

/// Parses `name(arg)`, e.g. `jitter(0.1)` or `permute_segments(4)`.
impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = s
            .strip_suffix(')')
            .and_then(|body| body.split_once('('))
            .ok_or_else(|| param_err(format!("cannot parse augmentation '{s}'")))?;
        let real = || {
            arg.trim()
                .parse::<f64>()
                .map_err(|_| param_err(format!("bad argument in '{s}'")))
        };
        let aug = match name.trim() {
            "jitter" => Self::Jitter { sigma: real()? },
            "scale" => Self::Scale { sigma: real()? },
            "crop_resize" => Self::CropResize { ratio: real()? },
            "permute_segments" => Self::PermuteSegments {
                n: arg
                    .trim()
                    .parse()
                    .map_err(|_| param_err(format!("bad argument in '{s}'")))?,
            },
            other => return Err(param_err(format!("unknown augmentation policy '{other}'"))),
        };
        aug.validate()?;
        Ok(aug)
    }
}

/// Applies `policy` left to right to a `D x T` sample.
pub fn augment(x: &Matrix, policy: &[Augmentation], rng: &mut impl Rng) -> Result<Matrix> {
    let mut out = x.clone();
    for aug in policy {
        aug.validate()?;
        out = apply_one(&out, *aug, rng);
    }
    Ok(out)
}

fn apply_one(x: &Matrix, aug: Augmentation, rng: &mut impl Rng) -> Matrix {
    let (d, t) = x.shape();
    match aug {
        Augmentation::Jitter { sigma } => {
            if sigma == 0.0 {
                return x.clone();
            }
            let mut out = x.clone();
            for v in out.as_mut_slice() {
                *v += gaussian(rng, sigma);
            }
            out
        }
        Augmentation::Scale { sigma } => {
            if sigma == 0.0 {
                return x.clone();
            }
            let mut out = x.clone();
            for j in 0..d {
                let factor = 1.0 + gaussian(rng, sigma);
                for v in out.row_mut(j) {
                    *v *= factor;
                }
            }
            out
        }
        Augmentation::CropResize { ratio } => {
            let len = ((ratio * t as f64).ceil() as usize).clamp(2.min(t), t);
            if len == t {
                return x.clone();
            }
            let start = rng.random_range(0..=t - len);
            let mut out = Matrix::zeros(d, t);
            for k in 0..t {
                let pos = start as f64 + k as f64 * (len - 1) as f64 / (t - 1).max(1) as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(start + len - 1);
                let w = pos - lo as f64;
                for j in 0..d {
                    out[(j, k)] = (1.0 - w) * x[(j, lo)] + w * x[(j, hi)];
                }
            }
            out
        }
        Augmentation::PermuteSegments { n } => {
            let n = n.min(t);
            if n <= 1 {
                return x.clone();
            }
            let bounds: Vec<usize> = (0..=n).map(|s| s * t / n).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let mut out = Matrix::zeros(d, t);
            let mut k_out = 0;
            for &seg in &order {
                for k in bounds[seg]..bounds[seg + 1] {
                    for j in 0..d {
                        out[(j, k_out)] = x[(j, k)];
                    }
                    k_out += 1;
                }
            }
            out
        }
    }
}
