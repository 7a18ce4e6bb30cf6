//! Task predictions and evaluation reports in JSON-friendly form.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use units_core::data::{LabelKind, LabelSet, MissingIndex, TimeSeriesDataset};
use units_core::error::{param_err, Result};
use units_core::tensor::Matrix;
use units_tasks::metrics::{
    accuracy, adjusted_rand_index, confusion_matrix, detection_scores, macro_f1, mae, mse, normalized_mutual_info,
    DetectionScores,
};
use units_tasks::{
    anomaly_detect, classify_predict, cluster_predict, forecast_predict, fused_representations, impute_predict,
    mean_impute, TaskKind, TaskModel,
};

/// Fraction of observed cells hidden when imputation is evaluated on a
/// fully observed dataset.
pub const EVAL_MISSING_RATE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Prediction {
    Classification {
        labels: Vec<usize>,
        probabilities: Vec<Vec<f64>>,
    },
    Clustering {
        assignments: Vec<usize>,
    },
    Forecasting {
        /// `N x D x H`.
        forecasts: Vec<Vec<Vec<f64>>>,
    },
    AnomalyDetection {
        threshold: f64,
        /// `N x T`.
        scores: Vec<Vec<f64>>,
        flags: Vec<Vec<bool>>,
    },
    Imputation {
        /// `N x D x T` with the missing cells filled.
        values: Vec<Vec<Vec<f64>>>,
    },
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn nested(x: &TimeSeriesDataset) -> Vec<Vec<Vec<f64>>> {
    (0..x.n_samples()).map(|i| rows(&x.sample(i))).collect()
}

pub fn predict(model: &TaskModel, x: &TimeSeriesDataset, missing: &MissingIndex) -> Result<Prediction> {
    Ok(match model.spec.task {
        TaskKind::Classification => {
            let p = classify_predict(model, x)?;
            Prediction::Classification {
                labels: p.labels,
                probabilities: rows(&p.probabilities),
            }
        }
        TaskKind::Clustering => Prediction::Clustering {
            assignments: cluster_predict(model, x)?,
        },
        TaskKind::Forecasting => Prediction::Forecasting {
            forecasts: forecast_predict(model, x)?.iter().map(rows).collect(),
        },
        TaskKind::AnomalyDetection => {
            let r = anomaly_detect(model, x)?;
            Prediction::AnomalyDetection {
                threshold: r.tau,
                scores: rows(&r.scores),
                flags: r.flags,
            }
        }
        TaskKind::Imputation => Prediction::Imputation {
            values: nested(&impute_predict(model, x, missing)?.completed),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Evaluation {
    Classification {
        n_samples: usize,
        accuracy: f64,
        macro_f1: f64,
        /// Rows are true classes, columns predicted classes.
        confusion_matrix: Vec<Vec<usize>>,
    },
    Clustering {
        n_samples: usize,
        assignments: Vec<usize>,
        ari: Option<f64>,
        nmi: Option<f64>,
        /// First two principal components of the fused representations.
        projection: Vec<[f64; 2]>,
    },
    Forecasting {
        n_samples: usize,
        horizon: usize,
        mse: f64,
        mae: f64,
    },
    AnomalyDetection {
        threshold: f64,
        scores: Vec<Vec<f64>>,
        flags: Vec<Vec<bool>>,
        detection: Option<DetectionScores>,
    },
    Imputation {
        n_cells: usize,
        mse: f64,
        mae: f64,
        baseline_mse: f64,
        baseline_mae: f64,
    },
}

/// Evaluates `model` on `x`.
///
/// Classification needs class labels. Clustering scores ARI/NMI when class
/// labels are given. Forecasting predicts the last `H` steps from the
/// preceding ones. Anomaly detection scores flags against anomaly labels
/// when given. Imputation compares against the per-channel-mean baseline,
/// either at `missing` cells with known targets or, when nothing is
/// missing, at a seeded random mask over observed cells.
pub fn evaluate(
    model: &TaskModel,
    x: &TimeSeriesDataset,
    labels: Option<&LabelSet>,
    missing: &MissingIndex,
    seed: u64,
) -> Result<Evaluation> {
    let class_labels = || -> Option<&[usize]> {
        labels
            .filter(|l| l.kind == LabelKind::Class)
            .and_then(|l| l.class_labels.as_deref())
    };
    match model.spec.task {
        TaskKind::Classification => {
            let truth = class_labels().ok_or_else(|| param_err("classification evaluation needs class labels"))?;
            let c = model.spec.n_classes.unwrap_or(0);
            let pred = classify_predict(model, x)?.labels;
            Ok(Evaluation::Classification {
                n_samples: pred.len(),
                accuracy: accuracy(&pred, truth)?,
                macro_f1: macro_f1(&pred, truth, c)?,
                confusion_matrix: confusion_matrix(&pred, truth, c)?,
            })
        }
        TaskKind::Clustering => {
            let assignments = cluster_predict(model, x)?;
            let (ari, nmi) = match class_labels() {
                Some(t) => (
                    Some(adjusted_rand_index(&assignments, t)?),
                    Some(normalized_mutual_info(&assignments, t)?),
                ),
                None => (None, None),
            };
            Ok(Evaluation::Clustering {
                n_samples: assignments.len(),
                assignments,
                ari,
                nmi,
                projection: pca_2d(&fused_representations(model, x)?),
            })
        }
        TaskKind::Forecasting => {
            let h = model.spec.horizon.ok_or_else(|| param_err("forecasting requires horizon"))?;
            let t = x.len_time();
            units_tasks::model::check_horizon(h, t)?;
            let context = x.slice_time(0, t - h)?;
            let truth = x.slice_time(t - h, h)?;
            let pred: Vec<f64> = forecast_predict(model, &context)?.into_iter().flat_map(Matrix::into_vec).collect();
            Ok(Evaluation::Forecasting {
                n_samples: x.n_samples(),
                horizon: h,
                mse: mse(&pred, truth.values())?,
                mae: mae(&pred, truth.values())?,
            })
        }
        TaskKind::AnomalyDetection => {
            let r = anomaly_detect(model, x)?;
            let detection = match labels.and_then(|l| l.anomaly_flags.as_ref()) {
                Some(truth) => {
                    let truth: Vec<bool> = truth.iter().flatten().copied().collect();
                    let pred: Vec<bool> = r.flags.iter().flatten().copied().collect();
                    Some(detection_scores(&pred, &truth)?)
                }
                None => None,
            };
            Ok(Evaluation::AnomalyDetection {
                threshold: r.tau,
                scores: rows(&r.scores),
                flags: r.flags,
                detection,
            })
        }
        TaskKind::Imputation => evaluate_imputation(model, x, labels, missing, seed),
    }
}

fn evaluate_imputation(
    model: &TaskModel,
    x: &TimeSeriesDataset,
    labels: Option<&LabelSet>,
    missing: &MissingIndex,
    seed: u64,
) -> Result<Evaluation> {
    let (n, d, t) = x.shape();
    let (missing, truth): (MissingIndex, Vec<f64>) = if missing.is_empty() {
        let m = MissingIndex::mcar(n, d, t, EVAL_MISSING_RATE, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let truth = (0..n).flat_map(|i| m.positions(i).map(move |(j, k)| (i, j, k))).map(|(i, j, k)| x.get(i, j, k)).collect();
        (m, truth)
    } else {
        let targets = labels
            .and_then(|l| l.missing_targets.as_ref())
            .ok_or_else(|| param_err("imputation evaluation on missing cells needs missing-target labels"))?;
        let mut truth = Vec::with_capacity(missing.total());
        for i in 0..n {
            for (j, k) in missing.positions(i) {
                let v = targets
                    .iter()
                    .find(|m| (m.sample, m.channel, m.timestep) == (i, j, k))
                    .ok_or_else(|| param_err(format!("no target for missing cell ({i}, {j}, {k})")))?;
                truth.push(v.value);
            }
        }
        (missing.clone(), truth)
    };
    if truth.is_empty() {
        return Err(param_err("imputation evaluation needs at least one missing cell"));
    }
    let imputed = impute_predict(model, x, &missing)?;
    let baseline = mean_impute(x, &missing)?;
    let cells: Vec<(usize, usize, usize)> =
        (0..n).flat_map(|i| missing.positions(i).map(move |(j, k)| (i, j, k))).collect();
    let pred: Vec<f64> = cells.iter().map(|&(i, j, k)| imputed.completed.get(i, j, k)).collect();
    let base: Vec<f64> = cells.iter().map(|&(i, j, k)| baseline.get(i, j, k)).collect();
    Ok(Evaluation::Imputation {
        n_cells: truth.len(),
        mse: mse(&pred, &truth)?,
        mae: mae(&pred, &truth)?,
        baseline_mse: mse(&base, &truth)?,
        baseline_mae: mae(&base, &truth)?,
    })
}

/// Scores of the rows of `z` on its two leading principal components
/// (power iteration with deflation on the covariance).
pub fn pca_2d(z: &Matrix) -> Vec<[f64; 2]> {
    let (n, k) = z.shape();
    if n == 0 || k == 0 {
        return vec![[0.0, 0.0]; n];
    }
    let mean: Vec<f64> = (0..k).map(|c| (0..n).map(|r| z[(r, c)]).sum::<f64>() / n as f64).collect();
    let centered = Matrix::from_vec(n, k, (0..n * k).map(|i| z.as_slice()[i] - mean[i % k]).collect());
    let mut cov = units_core::tensor::matmul(&centered.transpose(), &centered);
    let mut components: Vec<Vec<f64>> = Vec::new();
    for c in 0..2 {
        let mut v: Vec<f64> = (0..k).map(|i| 1.0 + ((i + c) % 3) as f64 * 0.1).collect();
        let mut lambda = 0.0;
        for _ in 0..200 {
            let w: Vec<f64> = (0..k).map(|i| cov.row(i).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-300 {
                v = vec![0.0; k];
                break;
            }
            lambda = norm;
            v = w.into_iter().map(|a| a / norm).collect();
        }
        for i in 0..k {
            for j in 0..k {
                cov[(i, j)] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
    }
    (0..n)
        .map(|r| {
            let row = centered.row(r);
            let p = |c: &Vec<f64>| row.iter().zip(c).map(|(a, b)| a * b).sum();
            [p(&components[0]), p(&components[1])]
        })
        .collect()
}
