//! Task declarations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use units_core::error::{param_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Clustering,
    Forecasting,
    AnomalyDetection,
    Imputation,
}

impl TaskKind {
    pub const ALL: [Self; 5] = [
        Self::Classification,
        Self::Clustering,
        Self::Forecasting,
        Self::AnomalyDetection,
        Self::Imputation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Classification => "classification",
            Self::Clustering => "clustering",
            Self::Forecasting => "forecasting",
            Self::AnomalyDetection => "anomaly_detection",
            Self::Imputation => "imputation",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = units_core::Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        match norm.as_str() {
            "anomaly" => Ok(Self::AnomalyDetection),
            _ => Self::ALL
                .into_iter()
                .find(|k| k.name() == norm)
                .ok_or_else(|| param_err(format!("unknown task '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastLoss {
    Mse,
    Mae,
}

impl FromStr for ForecastLoss {
    type Err = units_core::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "mae" => Ok(Self::Mae),
            other => Err(param_err(format!("unknown forecast loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum ThresholdRule {
    Fixed { tau: f64 },
    Quantile { q: f64 },
}

pub const DEFAULT_QUANTILE: f64 = 0.99;

impl Default for ThresholdRule {
    fn default() -> Self {
        Self::Quantile { q: DEFAULT_QUANTILE }
    }
}

/// Which parameter groups fine-tuning may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableGroups {
    pub encoders: bool,
    pub fusion: bool,
    pub head: bool,
}

impl TrainableGroups {
    pub const ALL: Self = Self {
        encoders: true,
        fusion: true,
        head: true,
    };
    pub const HEAD_ONLY: Self = Self {
        encoders: false,
        fusion: false,
        head: true,
    };
}

impl Default for TrainableGroups {
    fn default() -> Self {
        Self::ALL
    }
}

pub const DEFAULT_BETA: f64 = 0.1;
pub const MAX_BETA: f64 = 1e3;
pub const DEFAULT_FINETUNE_EPOCHS: usize = 20;
pub const DEFAULT_FINETUNE_LR: f64 = 1e-4;
pub const DEFAULT_HEAD_LR: f64 = 1e-3;
pub const DEFAULT_IMPUTATION_RATE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    /// Classes (classification) or clusters (clustering).
    pub n_classes: Option<usize>,
    pub horizon: Option<usize>,
    pub forecast_loss: ForecastLoss,
    pub threshold: ThresholdRule,
    /// Fraction of cells masked per step in denoising objectives
    /// (imputation and anomaly detection).
    pub masking_rate: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Encoder learning rate.
    pub lr: f64,
    /// Fusion and head learning rate.
    pub head_lr: f64,
    pub trainable: TrainableGroups,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(task: TaskKind) -> Self {
        Self {
            task,
            n_classes: None,
            horizon: None,
            forecast_loss: ForecastLoss::Mse,
            threshold: ThresholdRule::default(),
            masking_rate: DEFAULT_IMPUTATION_RATE,
            beta: DEFAULT_BETA,
            epochs: DEFAULT_FINETUNE_EPOCHS,
            batch_size: 16,
            lr: DEFAULT_FINETUNE_LR,
            head_lr: DEFAULT_HEAD_LR,
            trainable: TrainableGroups::ALL,
            seed: 0,
        }
    }

    pub fn classification(n_classes: usize) -> Self {
        Self {
            n_classes: Some(n_classes),
            ..Self::new(TaskKind::Classification)
        }
    }

    pub fn clustering(n_clusters: usize) -> Self {
        Self {
            n_classes: Some(n_clusters),
            ..Self::new(TaskKind::Clustering)
        }
    }

    pub fn forecasting(horizon: usize) -> Self {
        Self {
            horizon: Some(horizon),
            ..Self::new(TaskKind::Forecasting)
        }
    }

    pub fn anomaly_detection() -> Self {
        Self::new(TaskKind::AnomalyDetection)
    }

    pub fn imputation() -> Self {
        Self::new(TaskKind::Imputation)
    }

    pub fn validate(&self) -> Result<()> {
        match self.task {
            TaskKind::Classification | TaskKind::Clustering => match self.n_classes {
                None => return Err(param_err(format!("{} requires n_classes", self.task))),
                Some(0) => return Err(param_err("n_classes must be >= 1")),
                Some(1) if self.task == TaskKind::Classification => {
                    return Err(param_err("classification needs at least 2 classes"))
                }
                _ => {}
            },
            TaskKind::Forecasting => match self.horizon {
                None => return Err(param_err("forecasting requires horizon")),
                Some(0) => return Err(param_err("horizon must be >= 1")),
                _ => {}
            },
            _ => {}
        }
        if let ThresholdRule::Quantile { q } = self.threshold {
            if !(q > 0.0 && q < 1.0) {
                return Err(param_err(format!("quantile {q} outside (0, 1)")));
            }
        }
        if let ThresholdRule::Fixed { tau } = self.threshold {
            if !tau.is_finite() {
                return Err(param_err("fixed threshold must be finite"));
            }
        }
        if !(0.0..=1.0).contains(&self.masking_rate) {
            return Err(param_err(format!("masking rate {} outside [0, 1]", self.masking_rate)));
        }
        check_beta(self.beta)?;
        if self.batch_size == 0 {
            return Err(param_err("batch_size must be >= 1"));
        }
        for (name, lr) in [("lr", self.lr), ("head_lr", self.head_lr)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(param_err(format!("{name} must be finite and >= 0, got {lr}")));
            }
        }
        Ok(())
    }
}

/// `β` must be in `[0, 1e3]`: larger values drown the objective term and
/// invite the collapsed solution.
pub fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=MAX_BETA).contains(&beta) {
        return Err(param_err(format!("beta {beta} outside [0, {MAX_BETA}]")));
    }
    Ok(())
}
