//! Task models `f_T = g_T ∘ fusion ∘ encoders` and their fine-tuning loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use units_core::autodiff::{Tape, Var};
use units_core::data::{sample_binary_mask, LabelKind, LabelSet, MaskGeometry, NormalizationStats, TimeSeriesDataset};
use units_core::error::{param_err, shape_err, Error, Result};
use units_core::model::{stack, Linear, LinearVars, NamedTensor};
use units_core::optim::{gradient_step, OptimizerState};
use units_core::tensor::Matrix;
use units_pretrain::{make_batches, template_loss, PretrainTemplateConfig, PretrainedInstance, StepReport, TemplateVars};

use crate::fusion::{FusionKind, FusionModel, DEFAULT_PROJECTION_DIM};
use crate::kmeans::{kmeans, penalty, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS};
use crate::spec::{check_beta, ForecastLoss, TaskKind, TaskSpec, ThresholdRule};

/// One fine-tuning epoch: mean task loss over its steps and, for
/// clustering, the k-means penalty on the full training set at the start
/// of the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub penalty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskModel {
    pub encoders: Vec<PretrainedInstance>,
    pub fusion: FusionModel,
    /// Task head `g_T`; absent for clustering.
    pub head: Option<Linear>,
    /// `C x K'` centroids of the last k-means run (clustering).
    pub centroids: Option<Matrix>,
    /// Anomaly threshold `τ` chosen at the end of fine-tuning.
    pub threshold: Option<f64>,
    pub normalization: NormalizationStats,
    pub spec: TaskSpec,
    pub input_channels: usize,
    pub fitted: bool,
    pub history: Vec<EpochRecord>,
}

const HEAD_SEED_SALT: u64 = 0x4ead_7a5c;

impl TaskModel {
    /// Task model over pre-trained (fitted) instances.
    pub fn new(encoders: Vec<PretrainedInstance>, fusion: FusionModel, spec: TaskSpec) -> Result<Self> {
        if let Some(m) = encoders.iter().position(|e| !e.fitted) {
            return Err(Error::State(format!(
                "encoder {m} is not pre-trained; use TaskModel::from_scratch for baseline runs"
            )));
        }
        Self::assemble(encoders, fusion, spec)
    }

    /// Baseline model whose encoders start from random initialization.
    pub fn from_scratch(
        configs: &[PretrainTemplateConfig],
        input_channels: usize,
        fusion: FusionKind,
        spec: TaskSpec,
    ) -> Result<Self> {
        let encoders = configs
            .iter()
            .map(|c| PretrainedInstance::initialize(c, input_channels))
            .collect::<Result<Vec<_>>>()?;
        let fusion = default_fusion(fusion, encoders.iter().map(|e| e.encoder.repr_dim()).collect())?;
        Self::assemble(encoders, fusion, spec)
    }

    /// [`TaskModel::new`] with default fusion of the given kind.
    pub fn with_fusion_kind(encoders: Vec<PretrainedInstance>, kind: FusionKind, spec: TaskSpec) -> Result<Self> {
        let fusion = default_fusion(kind, encoders.iter().map(|e| e.encoder.repr_dim()).collect())?;
        Self::new(encoders, fusion, spec)
    }

    fn assemble(encoders: Vec<PretrainedInstance>, fusion: FusionModel, spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let Some(first) = encoders.first() else {
            return Err(param_err("a task model needs at least one encoder"));
        };
        let d = first.encoder.config().input_channels;
        if encoders.iter().any(|e| e.encoder.config().input_channels != d) {
            return Err(shape_err("encoders disagree on the number of input channels"));
        }
        let dims: Vec<usize> = encoders.iter().map(|e| e.encoder.repr_dim()).collect();
        if dims != fusion.input_dims {
            return Err(shape_err(format!(
                "fusion expects representation dims {:?}, encoders produce {dims:?}",
                fusion.input_dims
            )));
        }
        let k = fusion.output_dim();
        let out = match spec.task {
            TaskKind::Classification => spec.n_classes,
            TaskKind::Clustering => None,
            TaskKind::Forecasting => spec.horizon.map(|h| d * h),
            TaskKind::AnomalyDetection | TaskKind::Imputation => Some(d),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ HEAD_SEED_SALT);
        let head = out.map(|o| Linear::new(k, o, &mut rng));
        Ok(Self {
            encoders,
            fusion,
            head,
            centroids: None,
            threshold: None,
            normalization: NormalizationStats::identity(d),
            spec,
            input_channels: d,
            fitted: false,
            history: Vec::new(),
        })
    }

    pub fn with_normalization(mut self, stats: NormalizationStats) -> Result<Self> {
        if stats.shift.len() != self.input_channels || stats.scale.len() != self.input_channels {
            return Err(shape_err("normalization stats do not match the input channels"));
        }
        self.normalization = stats;
        Ok(self)
    }

    /// `K'`.
    pub fn fused_dim(&self) -> usize {
        self.fusion.output_dim()
    }

    /// Handles for every parameter; groups outside the trainable set (or
    /// all groups when `train` is false) become constants.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> TaskVars<'_> {
        let t = self.spec.trainable;
        TaskVars {
            encoders: self.encoders.iter().map(|e| e.bind(tape, train && t.encoders)).collect(),
            fusion: self.fusion.bind(tape, train && t.fusion),
            head: self.head.as_ref().map(|h| h.bind(tape, train && t.head)),
        }
    }

    /// Every tensor with a stable name: `encoders.<m>.<name>`,
    /// `fusion.weight`, `head.weight`, and so on.
    pub fn named_parameters(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (m, e) in self.encoders.iter().enumerate() {
            out.extend(
                e.named_parameters()
                    .into_iter()
                    .map(|p| NamedTensor::new(format!("encoders.{m}.{}", p.name), p.value)),
            );
        }
        if let Some(p) = &self.fusion.projection {
            out.extend(p.named_parameters("fusion"));
        }
        if let Some(h) = &self.head {
            out.extend(h.named_parameters("head"));
        }
        out
    }

    fn check_input(&self, x: &TimeSeriesDataset) -> Result<()> {
        if x.n_channels() != self.input_channels {
            return Err(shape_err(format!(
                "model expects {} channels, dataset has {}",
                self.input_channels,
                x.n_channels()
            )));
        }
        Ok(())
    }
}

fn default_fusion(kind: FusionKind, dims: Vec<usize>) -> Result<FusionModel> {
    match kind {
        FusionKind::Concatenation => FusionModel::concatenation(dims),
        FusionKind::Projection => FusionModel::projection_identity(dims, DEFAULT_PROJECTION_DIM),
    }
}

/// Tape handles of a task model.
pub struct TaskVars<'a> {
    pub encoders: Vec<TemplateVars<'a>>,
    pub fusion: Option<LinearVars>,
    pub head: Option<LinearVars>,
}

impl TaskVars<'_> {
    /// Handles in the order of the model's parameter groups.
    pub fn groups(&self) -> [Vec<Var>; 3] {
        [
            self.encoders.iter().flat_map(TemplateVars::all_vars).collect(),
            self.fusion.iter().flat_map(LinearVars::vars).collect(),
            self.head.iter().flat_map(LinearVars::vars).collect(),
        ]
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.groups().concat()
    }

    /// Fused representations of time-major samples: pooled (`B x K'`) or
    /// per timestep (`sum(T_b) x K'`).
    pub fn fused(&self, tape: &mut Tape, fusion: &FusionModel, samples: &[Matrix], pooled: bool) -> Var {
        let (x, segs) = stack(samples);
        let x = tape.constant(x);
        let parts: Vec<Var> = self
            .encoders
            .iter()
            .map(|e| {
                if pooled {
                    e.encoder.forward_pooled(tape, &e.encoder_vars, x, &segs)
                } else {
                    e.encoder.forward_sequence(tape, &e.encoder_vars, x, &segs)
                }
            })
            .collect();
        fusion.forward(tape, self.fusion, &parts)
    }

    fn head(&self) -> Result<LinearVars> {
        self.head.ok_or_else(|| Error::State("task head missing".into()))
    }
}

/// Samples (`D x T`, normalized) with optional class targets.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub samples: Vec<Matrix>,
    pub labels: Option<Vec<usize>>,
    /// Pooled per-encoder representations (`N x K_m`) of the head inputs,
    /// valid while the encoders stay frozen.
    pub frozen: Option<Vec<Matrix>>,
}

impl TaskData {
    pub fn new(x: &TimeSeriesDataset, labels: Option<Vec<usize>>) -> Self {
        Self {
            samples: (0..x.n_samples()).map(|i| x.sample(i)).collect(),
            labels,
            frozen: None,
        }
    }

    /// Caches the pooled encoder outputs used by pooled-head tasks.
    pub fn freeze_representations(&mut self, model: &TaskModel) -> Result<()> {
        let inputs: Vec<Matrix> = match model.spec.task {
            TaskKind::Classification => self.samples.iter().map(Matrix::transpose).collect(),
            TaskKind::Forecasting => {
                let h = model.spec.horizon.ok_or_else(|| param_err("forecasting requires horizon"))?;
                self.samples.iter().map(|s| time_major_cols(s, 0, s.cols() - h)).collect()
            }
            _ => return Ok(()),
        };
        self.frozen = Some(
            model
                .encoders
                .iter()
                .map(|e| e.encoder.encode_batch(&inputs))
                .collect::<Result<Vec<_>>>()?,
        );
        Ok(())
    }

    /// Fused pooled representations of `batch`, from the cache when present.
    fn pooled(&self, tape: &mut Tape, model: &TaskModel, vars: &TaskVars<'_>, batch: &[usize], inputs: impl FnOnce() -> Vec<Matrix>) -> Var {
        match &self.frozen {
            Some(cache) => {
                let parts: Vec<Var> = cache
                    .iter()
                    .map(|m| {
                        let rows: Vec<Vec<f64>> = batch.iter().map(|&i| m.row(i).to_vec()).collect();
                        tape.constant(Matrix::from_rows(&rows))
                    })
                    .collect();
                model.fusion.forward(tape, vars.fusion, &parts)
            }
            None => vars.fused(tape, &model.fusion, &inputs(), true),
        }
    }
}

fn time_major_cols(x: &Matrix, start: usize, len: usize) -> Matrix {
    let d = x.rows();
    let mut out = Matrix::zeros(len, d);
    for k in 0..len {
        for j in 0..d {
            out[(k, j)] = x[(j, start + k)];
        }
    }
    out
}

/// The task objective on `batch`. Random masks come from `rng`; clustering
/// reads the model's current centroids.
pub fn task_loss(
    tape: &mut Tape,
    model: &TaskModel,
    vars: &TaskVars<'_>,
    data: &TaskData,
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(param_err("empty batch"));
    }
    let spec = &model.spec;
    match spec.task {
        TaskKind::Classification => {
            let labels = data
                .labels
                .as_ref()
                .ok_or_else(|| param_err("classification needs class labels"))?;
            let z = data.pooled(tape, model, vars, batch, || batch.iter().map(|&i| data.samples[i].transpose()).collect());
            let logits = vars.head()?.forward(tape, z);
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            Ok(tape.softmax_cross_entropy(logits, targets, vec![None; batch.len()]))
        }
        TaskKind::Forecasting => {
            let h = spec.horizon.ok_or_else(|| param_err("forecasting requires horizon"))?;
            let t = data.samples[batch[0]].cols();
            check_horizon(h, t)?;
            let d = model.input_channels;
            let mut target = Matrix::zeros(batch.len(), d * h);
            for (r, &i) in batch.iter().enumerate() {
                for j in 0..d {
                    for s in 0..h {
                        target[(r, j * h + s)] = data.samples[i][(j, t - h + s)];
                    }
                }
            }
            let z = data.pooled(tape, model, vars, batch, || {
                batch.iter().map(|&i| time_major_cols(&data.samples[i], 0, t - h)).collect()
            });
            let pred = vars.head()?.forward(tape, z);
            let target = tape.constant(target);
            Ok(forecast_objective(tape, pred, target, spec.forecast_loss))
        }
        TaskKind::AnomalyDetection | TaskKind::Imputation => {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let x = &data.samples[i];
                let m = sample_binary_mask(x.shape(), spec.masking_rate, rng, MaskGeometry::Iid)?;
                let mut masked = x.transpose();
                for k in 0..x.cols() {
                    for j in 0..x.rows() {
                        if !m.get(j, k) {
                            masked[(k, j)] = 0.0;
                        }
                    }
                }
                inputs.push(masked);
                targets.push(x.transpose());
            }
            let z = vars.fused(tape, &model.fusion, &inputs, false);
            let x_hat = vars.head()?.forward(tape, z);
            let (target, _) = stack(&targets);
            let target = tape.constant(target);
            Ok(reconstruction_objective(tape, x_hat, target))
        }
        TaskKind::Clustering => {
            let centroids = model
                .centroids
                .as_ref()
                .ok_or_else(|| Error::State("clustering loss needs centroids".into()))?;
            let mut objective: Option<Var> = None;
            for (inst, v) in model.encoders.iter().zip(&vars.encoders) {
                let l = template_loss(tape, &inst.config, v, &data.samples, batch, rng)?;
                objective = Some(match objective {
                    Some(acc) => tape.add(acc, l),
                    None => l,
                });
            }
            let objective = objective.ok_or_else(|| param_err("no encoders"))?;
            let samples: Vec<Matrix> = batch.iter().map(|&i| data.samples[i].transpose()).collect();
            let z = vars.fused(tape, &model.fusion, &samples, true);
            let pen = kmeans_penalty(tape, z, centroids);
            cluster_fit(tape, objective, pen, spec.beta)
        }
    }
}

pub fn check_horizon(h: usize, t: usize) -> Result<()> {
    if h >= t {
        return Err(param_err(format!("horizon {h} must be smaller than the window length {t}")));
    }
    Ok(())
}

/// Mean squared or absolute error between equally shaped nodes.
pub fn forecast_objective(tape: &mut Tape, pred: Var, target: Var, loss: ForecastLoss) -> Var {
    let diff = tape.sub(pred, target);
    let e = match loss {
        ForecastLoss::Mse => tape.square(diff),
        ForecastLoss::Mae => tape.abs(diff),
    };
    tape.mean(e)
}

/// Full reconstruction MSE `mean((x̂ - x)²)` over every cell.
pub fn reconstruction_objective(tape: &mut Tape, x_hat: Var, x: Var) -> Var {
    forecast_objective(tape, x_hat, x, ForecastLoss::Mse)
}

/// `Σ_i ‖z_i - c_{a(i)}‖₂` with centroids held constant and `a(i)` the
/// nearest centroid of the current `z_i`.
pub fn kmeans_penalty(tape: &mut Tape, z: Var, centroids: &Matrix) -> Var {
    let zv = tape.value(z);
    let mut assigned = Matrix::zeros(zv.rows(), zv.cols());
    for r in 0..zv.rows() {
        let a = crate::kmeans::nearest(zv.row(r), centroids);
        assigned.row_mut(r).copy_from_slice(centroids.row(a));
    }
    let c = tape.constant(assigned);
    let diff = tape.sub(z, c);
    let norms = tape.row_norms(diff);
    tape.sum(norms)
}

/// `objective + β·penalty` on the tape.
pub fn cluster_fit(tape: &mut Tape, objective: Var, penalty: Var, beta: f64) -> Result<Var> {
    check_beta(beta)?;
    let p = tape.scale(penalty, beta);
    Ok(tape.add(objective, p))
}

/// `pretrain_loss + β·penalty`.
pub fn cluster_fit_loss(pretrain_loss: f64, penalty: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(pretrain_loss + beta * penalty)
}

/// k-means on `z` with the default restarts and iteration cap: returns the
/// penalty, centroids and assignments.
pub fn kmeans_regularizer(z: &Matrix, n_clusters: usize, seed: u64) -> Result<(f64, Matrix, Vec<usize>)> {
    let fit = kmeans(z, n_clusters, DEFAULT_RESTARTS, DEFAULT_MAX_ITERS, seed)?;
    Ok((penalty(z, &fit.centroids, &fit.assignments), fit.centroids, fit.assignments))
}

pub fn fine_tune(model: TaskModel, x: &TimeSeriesDataset, y: Option<&LabelSet>) -> Result<TaskModel> {
    fine_tune_with_observer(model, x, y, |_| {})
}

/// Fine-tunes the trainable groups for `spec.epochs` epochs, reporting
/// every optimizer step to `observer`.
pub fn fine_tune_with_observer(
    mut model: TaskModel,
    x: &TimeSeriesDataset,
    y: Option<&LabelSet>,
    mut observer: impl FnMut(&StepReport),
) -> Result<TaskModel> {
    model.spec.validate()?;
    model.check_input(x)?;
    let spec = model.spec.clone();
    let x = model.normalization.apply(x)?;
    let n = x.n_samples();
    let labels = match spec.task {
        TaskKind::Classification => Some(class_targets(y, n, spec.n_classes.unwrap_or(0))?),
        _ => None,
    };
    match spec.task {
        TaskKind::Forecasting => check_horizon(spec.horizon.unwrap_or(0), x.len_time())?,
        TaskKind::Clustering => {
            let c = spec.n_classes.unwrap_or(0);
            if c > n {
                return Err(param_err(format!("cluster count {c} exceeds sample count {n}")));
            }
        }
        _ => {}
    }
    let mut data = TaskData::new(&x, labels);
    if !spec.trainable.encoders {
        data.freeze_representations(&model)?;
    }
    let names: [Vec<String>; 3] = {
        let all = model.named_parameters();
        let enc: usize = model.encoders.iter().map(|e| e.named_parameters().len()).sum();
        let fus = usize::from(model.fusion.projection.is_some()) * 2;
        let names: Vec<String> = all.into_iter().map(|p| p.name).collect();
        [
            names[..enc].to_vec(),
            names[enc..enc + fus].to_vec(),
            names[enc + fus..].to_vec(),
        ]
    };
    let mut opts = [
        OptimizerState::adam(spec.lr),
        OptimizerState::adam(spec.head_lr),
        OptimizerState::adam(spec.head_lr),
    ];
    let trainable = [spec.trainable.encoders, spec.trainable.fusion, spec.trainable.head];
    let min_two = spec.task == TaskKind::Clustering && model.encoders.iter().any(|e| e.config.family.pairs_samples());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;

    for epoch in 0..spec.epochs {
        let penalty = if spec.task == TaskKind::Clustering {
            let z = fused_normalized(&model, &x)?;
            let (p, c, _) = kmeans_regularizer(&z, spec.n_classes.unwrap_or(1), spec.seed.wrapping_add(epoch as u64))?;
            model.centroids = Some(c);
            Some(p)
        } else {
            None
        };
        order.shuffle(&mut rng);
        let batches = make_batches(&order, spec.batch_size, min_two);
        let mut total = 0.0;
        for batch in &batches {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let loss = task_loss(&mut tape, &model, &vars, &data, batch, &mut rng)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{} loss is {value} at epoch {}, step {}",
                    spec.task,
                    epoch + 1,
                    step + 1
                )));
            }
            let groups = vars.groups();
            drop(vars);
            let mut grads = tape.backward(loss);
            let grads: Vec<Vec<Matrix>> = groups.iter().map(|g| grads.take_all(&tape, g)).collect();
            let mut params = model.param_groups();
            for gi in 0..3 {
                if trainable[gi] && !params[gi].is_empty() {
                    gradient_step(&mut params[gi], &grads[gi], &names[gi], &mut opts[gi]).map_err(|e| match e {
                        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (epoch {})", epoch + 1)),
                        other => other,
                    })?;
                }
            }
            step += 1;
            total += value;
            observer(&StepReport {
                epoch: epoch + 1,
                step,
                loss: value,
            });
        }
        model.history.push(EpochRecord {
            epoch: epoch + 1,
            loss: total / batches.len().max(1) as f64,
            penalty,
        });
    }

    let mut params = model.param_groups();
    for gi in 0..3 {
        if trainable[gi] {
            for p in params[gi].iter_mut() {
                p.round_to_f32();
            }
        }
    }
    match spec.task {
        TaskKind::Clustering => {
            let z = fused_normalized(&model, &x)?;
            let (_, mut c, _) = kmeans_regularizer(&z, spec.n_classes.unwrap_or(1), spec.seed)?;
            c.round_to_f32();
            model.centroids = Some(c);
        }
        TaskKind::AnomalyDetection => {
            model.threshold = Some(match spec.threshold {
                ThresholdRule::Fixed { tau } => tau,
                ThresholdRule::Quantile { q } => {
                    let scores = crate::predict::anomaly_scores_normalized(&model, &x)?;
                    crate::predict::quantile(scores.as_slice(), q)?
                }
            });
        }
        _ => {}
    }
    model.fitted = true;
    Ok(model)
}

/// Task objective of a fitted model on held-out data, without training:
/// the mean batch loss for head-based tasks and the k-means penalty of the
/// held-out fused representations for clustering.
pub fn validation_loss(model: &TaskModel, x: &TimeSeriesDataset, y: Option<&LabelSet>) -> Result<f64> {
    model.check_input(x)?;
    let x = model.normalization.apply(x)?;
    let n = x.n_samples();
    if n == 0 {
        return Err(param_err("validation needs at least one sample"));
    }
    let spec = &model.spec;
    if spec.task == TaskKind::Clustering {
        let z = fused_normalized(model, &x)?;
        let c = spec.n_classes.unwrap_or(1).min(n);
        return Ok(kmeans_regularizer(&z, c, spec.seed)?.0);
    }
    let labels = match spec.task {
        TaskKind::Classification => Some(class_targets(y, n, spec.n_classes.unwrap_or(0))?),
        _ => None,
    };
    let mut data = TaskData::new(&x, labels);
    data.freeze_representations(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let order: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for batch in order.chunks(spec.batch_size.max(1)) {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let loss = task_loss(&mut tape, model, &vars, &data, batch, &mut rng)?;
        total += tape.value(loss).item() * batch.len() as f64;
    }
    let v = total / n as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{} validation loss is {v}", spec.task)));
    }
    Ok(v)
}

impl TaskModel {
    fn param_groups(&mut self) -> [Vec<&mut Matrix>; 3] {
        let enc = self.encoders.iter_mut().flat_map(|e| e.params_mut()).collect();
        let fus = self.fusion.params_mut();
        let head = self.head.as_mut().map(Linear::params_mut).unwrap_or_default();
        [enc, fus, head]
    }
}

fn class_targets(y: Option<&LabelSet>, n: usize, n_classes: usize) -> Result<Vec<usize>> {
    let y = y.ok_or_else(|| param_err("classification fine-tuning needs class labels"))?;
    if y.kind != LabelKind::Class {
        return Err(param_err(format!("classification needs class labels, got {:?}", y.kind)));
    }
    let labels = y.class_labels()?;
    if labels.len() != n {
        return Err(shape_err(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(param_err(format!("label {bad} outside [0, {n_classes})")));
    }
    Ok(labels.to_vec())
}

/// Fused pooled representations of an already normalized dataset.
pub(crate) fn fused_normalized(model: &TaskModel, x: &TimeSeriesDataset) -> Result<Matrix> {
    let samples: Vec<Matrix> = (0..x.n_samples()).map(|i| x.sample_time_major(i)).collect();
    let parts = model
        .encoders
        .iter()
        .map(|e| e.encoder.encode_batch(&samples))
        .collect::<Result<Vec<_>>>()?;
    model.fusion.fuse_batch(&parts)
}
