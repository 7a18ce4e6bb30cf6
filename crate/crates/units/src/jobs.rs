//! Pre-training and fine-tuning runs.
//!
//! A request is validated and its runs are registered by `prepare_*`;
//! the returned jobs then execute (synchronously in the CLI, on the worker
//! pool in the service) and record their outcome in the registry.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use units_core::data::{normalize, LabelKind, LabelSet, MissingIndex, NormalizationMode, NormalizationStats, TimeSeriesDataset};
use units_core::error::{param_err, Result};
use units_pretrain::{fit, fit_with_observer, holdout_loss, PretrainTemplateConfig, PretrainedInstance, TemplateFamily};
use units_tasks::{fine_tune, fine_tune_with_observer, mean_impute, validation_loss, FusionKind, TaskKind, TaskModel, TaskSpec};
use units_tuning::table::{finetune_space, finetune_spec, finetune_table, pretrain_config, pretrain_defaults, pretrain_space};
use units_tuning::{holdout_split, parse_overrides, resolve_config, Config, ConfigMode, Resolved};

use crate::evaluate::{evaluate, Evaluation};
use crate::registry::{new_id, FinishedModel, Registry, RunHandle, RunKind, RunOutputs};

/// Trials of a smart-mode search when the request gives no budget.
pub const DEFAULT_SMART_BUDGET: usize = 8;
/// Held-out fraction scored by smart-mode objectives.
pub const SMART_HOLDOUT: f64 = 0.2;
/// Fitted on the pre-training data and on each fine-tuning set.
pub const NORMALIZATION: NormalizationMode = NormalizationMode::ZscorePerChannel;

fn default_fusion() -> FusionKind {
    FusionKind::Concatenation
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfigRequest {
    pub template: TemplateFamily,
    #[serde(default)]
    pub mode: ConfigMode,
    /// Overrides of the default table, keyed like `encoder.depth`.
    #[serde(default)]
    pub overrides: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRequest {
    pub dataset_id: String,
    pub configs: Vec<PretrainConfigRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRequest {
    pub dataset_id: String,
    pub task: TaskKind,
    #[serde(default)]
    pub encoder_ids: Vec<String>,
    /// Train from random initialization: with the architectures of
    /// `encoder_ids`, or of every template's defaults when none are given.
    #[serde(default)]
    pub from_scratch: bool,
    #[serde(default = "default_fusion")]
    pub fusion: FusionKind,
    #[serde(default)]
    pub n_classes: Option<usize>,
    #[serde(default)]
    pub horizon: Option<usize>,
    /// Targets; the dataset's own labels are used when absent.
    #[serde(default)]
    pub labels: Option<LabelSet>,
    #[serde(default)]
    pub mode: ConfigMode,
    #[serde(default)]
    pub overrides: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub budget: Option<usize>,
    /// Evaluation data; the training data is evaluated when absent.
    #[serde(default)]
    pub eval_dataset_id: Option<String>,
    #[serde(default)]
    pub eval_labels: Option<LabelSet>,
}

impl FinetuneRequest {
    pub fn new(dataset_id: impl Into<String>, task: TaskKind) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            task,
            encoder_ids: Vec::new(),
            from_scratch: false,
            fusion: FusionKind::Concatenation,
            n_classes: None,
            horizon: None,
            labels: None,
            mode: ConfigMode::Default,
            overrides: BTreeMap::new(),
            budget: None,
            eval_dataset_id: None,
            eval_labels: None,
        }
    }
}

fn override_pairs(overrides: &BTreeMap<String, serde_json::Value>) -> Vec<String> {
    overrides
        .iter()
        .map(|(k, v)| match v {
            serde_json::Value::String(s) => format!("{k}={s}"),
            other => format!("{k}={other}"),
        })
        .collect()
}

fn check_mode(mode: ConfigMode, overrides: &Config) -> Result<()> {
    if mode == ConfigMode::Default && !overrides.is_empty() {
        return Err(param_err("default mode takes no overrides; use manual mode"));
    }
    Ok(())
}

#[derive(Debug)]
pub struct PretrainJob {
    pub run: Arc<RunHandle>,
    family: TemplateFamily,
    mode: ConfigMode,
    overrides: Config,
    budget: usize,
    data: Arc<TimeSeriesDataset>,
}

/// Validates a pre-training request and registers one run per config.
pub fn prepare_pretrain(registry: &Registry, req: &PretrainRequest) -> Result<Vec<PretrainJob>> {
    if req.configs.is_empty() {
        return Err(param_err("at least one pre-training config is required"));
    }
    let data = Arc::new(registry.dataset(&req.dataset_id)?.dataset);
    let mut parsed = Vec::with_capacity(req.configs.len());
    for c in &req.configs {
        let defaults = pretrain_defaults(c.template);
        let overrides = parse_overrides(&override_pairs(&c.overrides), &defaults)?;
        check_mode(c.mode, &overrides)?;
        let base = units_tuning::patch(&defaults, &overrides)?;
        pretrain_config(c.template, &base)?.validate_for(&data)?;
        parsed.push(overrides);
    }
    let mut jobs = Vec::with_capacity(parsed.len());
    for (c, overrides) in req.configs.iter().zip(parsed) {
        let run = registry.begin_run(RunKind::Pretrain, serde_json::to_value(c)?, req.dataset_id.clone())?;
        jobs.push(PretrainJob {
            run,
            family: c.template,
            mode: c.mode,
            overrides,
            budget: c.budget.unwrap_or(DEFAULT_SMART_BUDGET),
            data: data.clone(),
        });
    }
    Ok(jobs)
}

/// Resolves a template configuration; the smart objective is the template
/// loss on a held-out fifth of `x` after fitting on the rest.
pub fn resolve_pretrain(
    family: TemplateFamily,
    mode: ConfigMode,
    overrides: &Config,
    budget: usize,
    x: &TimeSeriesDataset,
) -> Result<Resolved> {
    let defaults = pretrain_defaults(family);
    let seed = defaults.get("seed").and_then(|v| v.as_usize()).unwrap_or(0) as u64;
    let (train, hold) = holdout_split(x.n_samples(), SMART_HOLDOUT, seed);
    let objective = |c: &Config| -> Result<f64> {
        let cfg = pretrain_config(family, c)?;
        let inst = fit(&cfg, &x.subset(&train)?)?;
        holdout_loss(&inst, &x.subset(&hold)?)
    };
    resolve_config(mode, &defaults, overrides, &pretrain_space(family), budget, seed, objective)
}

impl PretrainJob {
    pub fn run_id(&self) -> String {
        self.run.id()
    }

    pub fn execute(self, registry: &Registry) -> Result<()> {
        let run = self.run.clone();
        let outcome = (|| {
            let (data, _) = normalize(&self.data, NORMALIZATION)?;
            let resolved = resolve_pretrain(self.family, self.mode, &self.overrides, self.budget, &data)?;
            let cfg = pretrain_config(self.family, &resolved.config)?;
            run.annotate("resolved", serde_json::to_value(&cfg)?);
            let mut push_err = None;
            let inst = fit_with_observer(&cfg, &data, |s| {
                if let Err(e) = run.push_metric(s.step, s.epoch, s.loss) {
                    push_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = push_err {
                return Err(e);
            }
            Ok(RunOutputs {
                encoders: vec![inst],
                model: None,
            })
        })();
        registry.finish_run(&run, outcome)
    }
}

#[derive(Debug)]
pub struct FinetuneJob {
    pub run: Arc<RunHandle>,
    model_id: String,
    req: FinetuneRequest,
    encoders: Vec<PretrainedInstance>,
    base: TaskSpec,
    overrides: Config,
    train: TimeSeriesDataset,
    labels: Option<LabelSet>,
    eval: TimeSeriesDataset,
    eval_missing: MissingIndex,
    eval_labels: Option<LabelSet>,
}

/// The task specification implied by a request and its targets.
fn base_spec(req: &FinetuneRequest, labels: Option<&LabelSet>) -> Result<TaskSpec> {
    let mut spec = TaskSpec::new(req.task);
    match req.task {
        TaskKind::Classification => {
            let l = labels
                .filter(|l| l.kind == LabelKind::Class)
                .ok_or_else(|| param_err("classification needs class labels"))?;
            let c = l.n_classes.ok_or_else(|| param_err("class labels without a class count"))?;
            if req.n_classes.is_some_and(|r| r != c) {
                return Err(param_err(format!("n_classes {:?} disagrees with the labels' {c}", req.n_classes)));
            }
            spec.n_classes = Some(c);
        }
        TaskKind::Clustering => {
            spec.n_classes = req
                .n_classes
                .or_else(|| labels.and_then(|l| l.n_classes))
                .ok_or_else(|| param_err("clustering needs a cluster count"))
                .map(Some)?;
        }
        TaskKind::Forecasting => {
            spec.horizon = req
                .horizon
                .or_else(|| labels.and_then(|l| l.horizon))
                .ok_or_else(|| param_err("forecasting needs a horizon"))
                .map(Some)?;
        }
        TaskKind::AnomalyDetection | TaskKind::Imputation => {}
    }
    Ok(spec)
}

/// Assembles a task model from pre-trained encoders, or from random
/// initialization with the given architectures.
pub fn build_model(
    encoders: Vec<PretrainedInstance>,
    from_scratch: bool,
    fusion: FusionKind,
    spec: TaskSpec,
    input_channels: usize,
) -> Result<TaskModel> {
    if from_scratch {
        let configs: Vec<PretrainTemplateConfig> = if encoders.is_empty() {
            TemplateFamily::ALL.iter().map(|&f| PretrainTemplateConfig::new(f)).collect()
        } else {
            encoders.into_iter().map(|e| e.config).collect()
        };
        TaskModel::from_scratch(&configs, input_channels, fusion, spec)
    } else {
        if encoders.is_empty() {
            return Err(param_err("fine-tuning needs encoder ids (or the from-scratch flag)"));
        }
        TaskModel::with_fusion_kind(encoders, fusion, spec)
    }
}

/// Validates a fine-tuning request and registers its run.
pub fn prepare_finetune(registry: &Registry, req: &FinetuneRequest) -> Result<FinetuneJob> {
    let stored = registry.dataset(&req.dataset_id)?;
    let encoders = req
        .encoder_ids
        .iter()
        .map(|id| registry.encoder(id))
        .collect::<Result<Vec<_>>>()?;
    let labels = req.labels.clone().or(stored.labels.clone());
    let base = base_spec(req, labels.as_ref())?;
    let overrides = parse_overrides(&override_pairs(&req.overrides), &finetune_table(&base))?;
    check_mode(req.mode, &overrides)?;
    let spec = finetune_spec(&base, &units_tuning::patch(&finetune_table(&base), &overrides)?)?;
    spec.validate()?;
    if let (TaskKind::Classification, Some(l)) = (req.task, &labels) {
        let n = l.class_labels.as_ref().map_or(0, Vec::len);
        if n != stored.dataset.n_samples() {
            return Err(param_err(format!("{n} labels for {} samples", stored.dataset.n_samples())));
        }
    }
    build_model(encoders.clone(), req.from_scratch, req.fusion, spec, stored.dataset.n_channels())?;
    let train = if req.task == TaskKind::Imputation && !stored.missing.is_empty() {
        mean_impute(&stored.dataset, &stored.missing)?
    } else {
        stored.dataset.clone()
    };
    let (eval, eval_missing, eval_labels) = match &req.eval_dataset_id {
        Some(id) => {
            let e = registry.dataset(id)?;
            let l = req.eval_labels.clone().or(e.labels);
            (e.dataset, e.missing, l)
        }
        None => (stored.dataset, stored.missing, req.eval_labels.clone().or(labels.clone())),
    };
    let run = registry.begin_run(RunKind::Finetune, serde_json::to_value(req)?, req.dataset_id.clone())?;
    Ok(FinetuneJob {
        run,
        model_id: new_id("model"),
        req: req.clone(),
        encoders,
        base,
        overrides,
        train,
        labels,
        eval,
        eval_missing,
        eval_labels,
    })
}

/// Resolves a fine-tuning specification; the smart objective fine-tunes on
/// four fifths of the data and scores the task objective on the rest.
pub fn resolve_finetune(
    base: &TaskSpec,
    mode: ConfigMode,
    overrides: &Config,
    budget: usize,
    make_model: &dyn Fn(TaskSpec) -> Result<TaskModel>,
    x: &TimeSeriesDataset,
    labels: Option<&LabelSet>,
) -> Result<(TaskSpec, Resolved)> {
    let defaults = finetune_table(base);
    let (train, hold) = holdout_split(x.n_samples(), SMART_HOLDOUT, base.seed);
    let sub_labels = |idx: &[usize]| -> Result<Option<LabelSet>> {
        match labels {
            Some(l) if l.kind == LabelKind::Class => Ok(Some(l.subset_classes(idx)?)),
            other => Ok(other.cloned()),
        }
    };
    let objective = |c: &Config| -> Result<f64> {
        let spec = finetune_spec(base, c)?;
        let model = fine_tune(make_model(spec)?, &x.subset(&train)?, sub_labels(&train)?.as_ref())?;
        validation_loss(&model, &x.subset(&hold)?, sub_labels(&hold)?.as_ref())
    };
    let resolved = resolve_config(mode, &defaults, overrides, &finetune_space(base.task), budget, base.seed, objective)?;
    Ok((finetune_spec(base, &resolved.config)?, resolved))
}

impl FinetuneJob {
    pub fn run_id(&self) -> String {
        self.run.id()
    }

    /// Id the model receives if the run succeeds.
    pub fn model_id(&self) -> String {
        self.model_id.clone()
    }

    pub fn execute(self, registry: &Registry) -> Result<()> {
        let run = self.run.clone();
        let outcome = (|| {
            let d = self.train.n_channels();
            let stats = NormalizationStats::fit(&self.train, NORMALIZATION);
            let make = |spec: TaskSpec| {
                build_model(self.encoders.clone(), self.req.from_scratch, self.req.fusion, spec, d)?
                    .with_normalization(stats.clone())
            };
            let (spec, _) = resolve_finetune(
                &self.base,
                self.req.mode,
                &self.overrides,
                self.req.budget.unwrap_or(DEFAULT_SMART_BUDGET),
                &make,
                &self.train,
                self.labels.as_ref(),
            )?;
            run.annotate("resolved", serde_json::to_value(&spec)?);
            let mut push_err = None;
            let model = fine_tune_with_observer(make(spec)?, &self.train, self.labels.as_ref(), |s| {
                if let Err(e) = run.push_metric(s.step, s.epoch, s.loss) {
                    push_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = push_err {
                return Err(e);
            }
            let evaluation: Evaluation = evaluate(
                &model,
                &self.eval,
                self.eval_labels.as_ref(),
                &self.eval_missing,
                model.spec.seed,
            )?;
            Ok(RunOutputs {
                encoders: Vec::new(),
                model: Some(FinishedModel {
                    id: Some(self.model_id.clone()),
                    model,
                    encoder_ids: self.req.encoder_ids.clone(),
                    from_scratch: self.req.from_scratch,
                    evaluation: Some(evaluation),
                }),
            })
        })();
        registry.finish_run(&run, outcome)
    }
}
