//! Inference for the five tasks.

use serde::{Deserialize, Serialize};

use units_core::autodiff::Tape;
use units_core::data::{MissingIndex, MissingTarget, TimeSeriesDataset};
use units_core::error::{param_err, shape_err, Error, Result};
use units_core::tensor::Matrix;

use crate::kmeans::{kmeans, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS};
use crate::model::{fused_normalized, TaskModel};
use crate::spec::{TaskKind, ThresholdRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub labels: Vec<usize>,
    /// `N x C`, rows sum to 1.
    pub probabilities: Matrix,
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fused pooled representations `z'` (`N x K'`) of a raw dataset.
pub fn fused_representations(model: &TaskModel, x: &TimeSeriesDataset) -> Result<Matrix> {
    check_channels(model, x)?;
    fused_normalized(model, &model.normalization.apply(x)?)
}

fn check_channels(model: &TaskModel, x: &TimeSeriesDataset) -> Result<()> {
    if x.n_channels() != model.input_channels {
        return Err(shape_err(format!(
            "model expects {} channels, dataset has {}",
            model.input_channels,
            x.n_channels()
        )));
    }
    Ok(())
}

fn require(model: &TaskModel, task: TaskKind) -> Result<()> {
    if model.spec.task != task {
        return Err(param_err(format!("model was built for {}, not {task}", model.spec.task)));
    }
    if !model.fitted {
        return Err(Error::State(format!("{task} model is not fitted")));
    }
    Ok(())
}

fn head(model: &TaskModel) -> Result<&units_core::model::Linear> {
    model.head.as_ref().ok_or_else(|| Error::State("task head missing".into()))
}

pub fn classify_predict(model: &TaskModel, x: &TimeSeriesDataset) -> Result<ClassPrediction> {
    require(model, TaskKind::Classification)?;
    let z = fused_representations(model, x)?;
    let probabilities = softmax_rows(&head(model)?.apply(&z));
    let labels = (0..probabilities.rows()).map(|r| argmax(probabilities.row(r))).collect();
    Ok(ClassPrediction { labels, probabilities })
}

/// k-means assignments on the fused representations of `x`. Works on a
/// model that was never fine-tuned (pure representation clustering).
pub fn cluster_predict(model: &TaskModel, x: &TimeSeriesDataset) -> Result<Vec<usize>> {
    if model.spec.task != TaskKind::Clustering {
        return Err(param_err(format!("model was built for {}, not clustering", model.spec.task)));
    }
    let c = model.spec.n_classes.ok_or_else(|| param_err("clustering requires n_classes"))?;
    let z = fused_representations(model, x)?;
    Ok(kmeans(&z, c, DEFAULT_RESTARTS, DEFAULT_MAX_ITERS, model.spec.seed)?.assignments)
}

/// `D x H` forecasts following each sample, in original units.
pub fn forecast_predict(model: &TaskModel, x: &TimeSeriesDataset) -> Result<Vec<Matrix>> {
    require(model, TaskKind::Forecasting)?;
    let h = model.spec.horizon.ok_or_else(|| param_err("forecasting requires horizon"))?;
    let d = model.input_channels;
    let z = fused_representations(model, x)?;
    let out = head(model)?.apply(&z);
    Ok((0..out.rows())
        .map(|r| {
            let mut f = Matrix::from_vec(d, h, out.row(r).to_vec());
            for j in 0..d {
                for v in f.row_mut(j) {
                    *v = model.normalization.inverse_value(j, *v);
                }
            }
            f
        })
        .collect())
}

const RECONSTRUCT_CHUNK: usize = 64;

/// Decoder output `x̂` (`D x T`, normalized units) for normalized inputs
/// that already carry zeros at masked cells.
fn reconstruct(model: &TaskModel, inputs: &[Matrix]) -> Result<Vec<Matrix>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(RECONSTRUCT_CHUNK) {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let samples: Vec<Matrix> = chunk.iter().map(Matrix::transpose).collect();
        let z = vars.fused(&mut tape, &model.fusion, &samples, false);
        let h = vars.head.ok_or_else(|| Error::State("task head missing".into()))?;
        let y = h.forward(&mut tape, z);
        let y = tape.value(y);
        let mut row = 0;
        for s in chunk {
            let t = s.cols();
            out.push(y.slice_rows(row, t).transpose());
            row += t;
        }
    }
    Ok(out)
}

/// Anomaly scores plus flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    /// `N x T`, nonnegative.
    pub scores: Matrix,
    pub flags: Vec<Vec<bool>>,
    pub tau: f64,
}

impl AnomalyResult {
    /// Flags are `score > tau`, cell for cell.
    pub fn from_threshold(scores: Matrix, tau: f64) -> Self {
        let flags = (0..scores.rows())
            .map(|r| scores.row(r).iter().map(|&s| s > tau).collect())
            .collect();
        Self { scores, flags, tau }
    }

    pub fn flagged_count(&self) -> usize {
        self.flags.iter().map(|r| r.iter().filter(|&&f| f).count()).sum()
    }
}

/// Masking stride used when scoring: cells `t ≡ r (mod stride)` are hidden
/// in pass `r`, so every score comes from a reconstruction that did not
/// see the cell itself.
pub fn scoring_stride(masking_rate: f64) -> usize {
    if masking_rate <= 0.0 {
        1
    } else {
        ((1.0 / masking_rate).round() as usize).max(2)
    }
}

pub(crate) fn anomaly_scores_normalized(model: &TaskModel, x: &TimeSeriesDataset) -> Result<Matrix> {
    let (n, d, t) = x.shape();
    let stride = scoring_stride(model.spec.masking_rate);
    let samples: Vec<Matrix> = (0..n).map(|i| x.sample(i)).collect();
    let mut scores = Matrix::zeros(n, t);
    for r in 0..stride.min(t) {
        let hidden = |k: usize| stride > 1 && k % stride == r;
        let inputs: Vec<Matrix> = samples
            .iter()
            .map(|s| {
                let mut m = s.clone();
                for k in (0..t).filter(|&k| hidden(k)) {
                    for j in 0..d {
                        m[(j, k)] = 0.0;
                    }
                }
                m
            })
            .collect();
        let recon = reconstruct(model, &inputs)?;
        for (i, (s, xh)) in samples.iter().zip(&recon).enumerate() {
            for k in (0..t).filter(|&k| stride == 1 || k % stride == r) {
                scores[(i, k)] = (0..d).map(|j| (xh[(j, k)] - s[(j, k)]).abs()).sum::<f64>() / d as f64;
            }
        }
    }
    Ok(scores)
}

/// Per-timestep scores `s[i, t]`: mean over channels of `|x̂ - x|`.
pub fn anomaly_scores(model: &TaskModel, x: &TimeSeriesDataset) -> Result<Matrix> {
    require(model, TaskKind::AnomalyDetection)?;
    check_channels(model, x)?;
    anomaly_scores_normalized(model, &model.normalization.apply(x)?)
}

/// Scores of long recordings: each sample is cut into windows, windows are
/// scored independently and overlapping scores are averaged per timestep.
pub fn anomaly_scores_windowed(model: &TaskModel, x: &TimeSeriesDataset, window: usize, stride: usize) -> Result<Matrix> {
    let (n, _, t) = x.shape();
    if window == 0 || stride == 0 || window > t {
        return Err(param_err(format!("window {window} / stride {stride} invalid for T={t}")));
    }
    let windows = units_core::data::slice_windows(x, window, stride)?;
    let per = windows.n_samples() / n;
    let starts = units_core::data::window_starts(t, window, stride);
    let ws = anomaly_scores(model, &windows)?;
    let mut sum = Matrix::zeros(n, t);
    let mut count = Matrix::zeros(n, t);
    for i in 0..n {
        for (w, &s0) in starts.iter().enumerate() {
            for k in 0..window {
                sum[(i, s0 + k)] += ws[(i * per + w, k)];
                count[(i, s0 + k)] += 1.0;
            }
        }
    }
    // A final window aligned to the end covers timesteps the stride skips.
    if starts.last().is_some_and(|&s| s + window < t) {
        let tail = anomaly_scores(model, &x.slice_time(t - window, window)?)?;
        for i in 0..n {
            for k in 0..window {
                sum[(i, t - window + k)] += tail[(i, k)];
                count[(i, t - window + k)] += 1.0;
            }
        }
    }
    Ok(sum.zip_map(&count, |s, c| s / c))
}

/// `q`-quantile with linear interpolation between order statistics at
/// position `(n - 1)·q`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(param_err("quantile of an empty calibration set"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(param_err(format!("quantile {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Flags `scores > τ`, with `τ` fixed or the quantile of `calibration`.
pub fn anomaly_decide(scores: Matrix, rule: ThresholdRule, calibration: &[f64]) -> Result<AnomalyResult> {
    let tau = match rule {
        ThresholdRule::Fixed { tau } => tau,
        ThresholdRule::Quantile { q } => quantile(calibration, q)?,
    };
    Ok(AnomalyResult::from_threshold(scores, tau))
}

/// Scores and flags with the threshold chosen at fine-tuning time.
pub fn anomaly_detect(model: &TaskModel, x: &TimeSeriesDataset) -> Result<AnomalyResult> {
    let scores = anomaly_scores(model, x)?;
    let tau = model.threshold.ok_or_else(|| Error::State("anomaly threshold not set".into()))?;
    Ok(AnomalyResult::from_threshold(scores, tau))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    pub completed: TimeSeriesDataset,
    pub imputed: Vec<MissingTarget>,
}

/// Replaces the cells listed in `missing` with the decoder's output;
/// observed cells are copied through untouched.
pub fn impute_predict(model: &TaskModel, x: &TimeSeriesDataset, missing: &MissingIndex) -> Result<Imputation> {
    require(model, TaskKind::Imputation)?;
    check_channels(model, x)?;
    let (n, d, t) = x.shape();
    missing.validate(d, t)?;
    if missing.n_samples() > n {
        return Err(param_err(format!(
            "missing index covers {} samples, dataset has {n}",
            missing.n_samples()
        )));
    }
    let norm = model.normalization.apply(x)?;
    let inputs: Vec<Matrix> = (0..n)
        .map(|i| {
            let mut s = norm.sample(i);
            for (j, k) in missing.positions(i) {
                s[(j, k)] = 0.0;
            }
            s
        })
        .collect();
    let recon = reconstruct(model, &inputs)?;
    let mut imputed = Vec::with_capacity(missing.total());
    for (i, xh) in recon.iter().enumerate() {
        for (j, k) in missing.positions(i) {
            imputed.push(MissingTarget {
                sample: i,
                channel: j,
                timestep: k,
                value: model.normalization.inverse_value(j, xh[(j, k)]),
            });
        }
    }
    let mut values = x.values().to_vec();
    for m in &imputed {
        values[(m.sample * d + m.channel) * t + m.timestep] = m.value;
    }
    let completed = TimeSeriesDataset::new(n, d, t, values)?
        .with_sample_ids(x.sample_ids().to_vec())?
        .with_channel_names(x.channel_names().to_vec())?;
    Ok(Imputation { completed, imputed })
}

/// Per-sample, per-channel mean of the observed cells, written into the
/// missing cells.
pub fn mean_impute(x: &TimeSeriesDataset, missing: &MissingIndex) -> Result<TimeSeriesDataset> {
    let (n, d, t) = x.shape();
    missing.validate(d, t)?;
    let mut values = x.values().to_vec();
    for i in 0..n {
        for j in 0..d {
            let observed: Vec<f64> = (0..t).filter(|&k| !missing.contains(i, j, k)).map(|k| x.get(i, j, k)).collect();
            let mean = if observed.is_empty() {
                0.0
            } else {
                observed.iter().sum::<f64>() / observed.len() as f64
            };
            for k in (0..t).filter(|&k| missing.contains(i, j, k)) {
                values[(i * d + j) * t + k] = mean;
            }
        }
    }
    TimeSeriesDataset::new(n, d, t, values)
}
