//! Comparison pipelines: partial labeling and domain shift, each pitting
//! pre-trained encoders against the same architectures trained from
//! scratch on identical data splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use units_core::data::{normalize, LabelKind, LabelSet, MissingIndex, NormalizationMode, NormalizationStats, TimeSeriesDataset};
use units_core::error::{param_err, shape_err, Result};
use units_pretrain::{fit, PretrainTemplateConfig, PretrainedInstance, TemplateFamily};
use units_tasks::{fine_tune, FusionKind, TaskKind, TaskModel, TaskSpec};

use crate::evaluate::{evaluate, Evaluation};

/// A dataset with optional targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledData {
    pub dataset: TimeSeriesDataset,
    #[serde(default)]
    pub labels: Option<LabelSet>,
}

impl LabeledData {
    pub fn new(dataset: TimeSeriesDataset, labels: Option<LabelSet>) -> Self {
        Self { dataset, labels }
    }

    fn class_labels(&self) -> Option<&[usize]> {
        self.labels
            .as_ref()
            .filter(|l| l.kind == LabelKind::Class)
            .and_then(|l| l.class_labels.as_deref())
    }

    /// Rows `idx`, with class labels subset alongside.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let labels = match &self.labels {
            Some(l) if l.kind == LabelKind::Class => Some(l.subset_classes(idx)?),
            other => other.clone(),
        };
        Ok(Self {
            dataset: self.dataset.subset(idx)?,
            labels,
        })
    }

    fn concat(&self, other: &Self) -> Result<Self> {
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) if a.kind == LabelKind::Class && b.kind == LabelKind::Class => {
                let mut l = a.class_labels.clone().unwrap_or_default();
                l.extend(b.class_labels.iter().flatten());
                let c = a.n_classes.unwrap_or(0).max(b.n_classes.unwrap_or(0));
                Some(LabelSet::classes(l, c)?)
            }
            (a, _) => a.clone(),
        };
        Ok(Self {
            dataset: self.dataset.concat(&other.dataset)?,
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    /// Encoder templates pre-trained by the pipeline (and mirrored by the
    /// scratch arm).
    pub templates: Vec<PretrainTemplateConfig>,
    pub fusion: FusionKind,
    /// Held-out evaluation fraction.
    pub test_fraction: f64,
    /// Separate evaluation data; replaces the held-out split when given.
    pub evaluation: Option<LabeledData>,
    /// Seed of the evaluation split, fixed across pipeline seeds so that
    /// encoders can be pre-trained once and reused.
    pub split_seed: u64,
    /// Fitted on each stage's training data: the pre-training input and
    /// every arm's fine-tuning set.
    pub normalization: NormalizationMode,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            templates: TemplateFamily::ALL.iter().map(|&f| PretrainTemplateConfig::new(f)).collect(),
            fusion: FusionKind::Concatenation,
            test_fraction: 0.2,
            evaluation: None,
            split_seed: 0,
            normalization: NormalizationMode::ZscorePerChannel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub n_train: usize,
    /// Headline score (higher is better): accuracy, ARI, F1, or negated MSE.
    pub score: f64,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialLabelingReport {
    pub rho: f64,
    pub seed: u64,
    pub n_labeled: usize,
    pub n_test: usize,
    pub pretrained: ArmReport,
    pub scratch: ArmReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftReport {
    pub target_budget: usize,
    pub seed: u64,
    pub n_test: usize,
    /// True when the pre-trained arm saw no target samples.
    pub zero_shot: bool,
    pub pretrained: ArmReport,
    pub scratch: ArmReport,
}

/// Picks `fraction` of the indices `pool` (at least one per class present,
/// rounded per class when `labels` are given); returns (picked, rest).
pub fn stratified_pick(pool: &[usize], labels: Option<&[usize]>, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = match labels {
        Some(l) => {
            let c = pool.iter().map(|&i| l[i] + 1).max().unwrap_or(0);
            let mut g = vec![Vec::new(); c];
            for &i in pool {
                g[l[i]].push(i);
            }
            g
        }
        None => vec![pool.to_vec()],
    };
    let (mut picked, mut rest) = (Vec::new(), Vec::new());
    for mut g in groups.into_iter().filter(|g| !g.is_empty()) {
        g.shuffle(&mut rng);
        let k = ((g.len() as f64 * fraction).round() as usize).clamp(1, g.len());
        picked.extend_from_slice(&g[..k]);
        rest.extend_from_slice(&g[k..]);
    }
    picked.sort_unstable();
    rest.sort_unstable();
    (picked, rest)
}

/// Training pool indices and evaluation data.
fn test_split(data: &LabeledData, opts: &PipelineOptions) -> Result<(Vec<usize>, LabeledData)> {
    let n = data.dataset.n_samples();
    if let Some(eval) = &opts.evaluation {
        return Ok(((0..n).collect(), eval.clone()));
    }
    if !(opts.test_fraction > 0.0 && opts.test_fraction < 1.0) {
        return Err(param_err(format!("test fraction {} outside (0, 1)", opts.test_fraction)));
    }
    if n < 2 {
        return Err(param_err("pipelines need at least two samples"));
    }
    let all: Vec<usize> = (0..n).collect();
    let (test, pool) = stratified_pick(&all, data.class_labels(), opts.test_fraction, opts.split_seed);
    if pool.is_empty() {
        return Err(param_err("no training samples left after the test split"));
    }
    Ok((pool, data.subset(&test)?))
}

/// Pre-trains every template of `opts` on `x`.
pub fn pretrain_all(opts: &PipelineOptions, x: &TimeSeriesDataset) -> Result<Vec<PretrainedInstance>> {
    if opts.templates.is_empty() {
        return Err(param_err("at least one template is required"));
    }
    let (x, _) = normalize(x, opts.normalization)?;
    opts.templates.iter().map(|c| fit(c, &x)).collect()
}

fn headline(e: &Evaluation) -> f64 {
    match e {
        Evaluation::Classification { accuracy, .. } => *accuracy,
        Evaluation::Clustering { ari, .. } => ari.unwrap_or(f64::NAN),
        Evaluation::Forecasting { mse, .. } | Evaluation::Imputation { mse, .. } => -mse,
        Evaluation::AnomalyDetection { detection, .. } => detection.map_or(f64::NAN, |d| d.f1),
    }
}

fn task_spec(spec: &TaskSpec, seed: u64) -> TaskSpec {
    let mut s = spec.clone();
    s.seed = seed;
    s
}

/// Fine-tunes `model` on `train` and evaluates it on `test`.
fn run_arm(model: TaskModel, train: &LabeledData, test: &LabeledData, opts: &PipelineOptions, seed: u64) -> Result<ArmReport> {
    let model = model.with_normalization(NormalizationStats::fit(&train.dataset, opts.normalization))?;
    let model = fine_tune(model, &train.dataset, train.labels.as_ref())?;
    let evaluation = evaluate(
        &model,
        &test.dataset,
        test.labels.as_ref(),
        &MissingIndex::new(test.dataset.n_samples()),
        seed,
    )?;
    Ok(ArmReport {
        n_train: train.dataset.n_samples(),
        score: headline(&evaluation),
        evaluation,
    })
}

fn scratch_model(encoders: &[PretrainedInstance], opts: &PipelineOptions, spec: TaskSpec, d: usize) -> Result<TaskModel> {
    let configs: Vec<PretrainTemplateConfig> = encoders.iter().map(|e| e.config.clone()).collect();
    TaskModel::from_scratch(&configs, d, opts.fusion, spec)
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(param_err(format!("label fraction {rho} outside (0, 1]")));
    }
    Ok(())
}

/// Training pool of the partial-labeling pipeline (the samples encoders are
/// pre-trained on).
pub fn partial_labeling_pool(data: &LabeledData, opts: &PipelineOptions) -> Result<TimeSeriesDataset> {
    data.dataset.subset(&test_split(data, opts)?.0)
}

/// Fine-tunes pre-trained encoders on a `rho` fraction of the labels and
/// compares with training from scratch on the same labeled subset.
///
/// `pretrained` encoders are reused when given; otherwise the templates of
/// `opts` are pre-trained (without labels) on the training pool.
pub fn partial_labeling(
    data: &LabeledData,
    rho: f64,
    spec: &TaskSpec,
    seed: u64,
    opts: &PipelineOptions,
    pretrained: Option<&[PretrainedInstance]>,
) -> Result<PartialLabelingReport> {
    check_rho(rho)?;
    let (pool, test) = test_split(data, opts)?;
    if spec.task == TaskKind::Classification {
        let c = spec.n_classes.unwrap_or(0);
        if (rho * pool.len() as f64) < c as f64 {
            return Err(param_err(format!(
                "label fraction {rho} of {} training samples is fewer than {c} classes",
                pool.len()
            )));
        }
    }
    let (labeled_idx, _) = stratified_pick(&pool, data.class_labels(), rho, seed);
    let labeled = data.subset(&labeled_idx)?;
    let encoders = match pretrained {
        Some(e) => e.to_vec(),
        None => pretrain_all(opts, &data.dataset.subset(&pool)?)?,
    };
    let spec = task_spec(spec, seed);
    let d = data.dataset.n_channels();
    let pre = TaskModel::with_fusion_kind(encoders.clone(), opts.fusion, spec.clone())?;
    let scratch = scratch_model(&encoders, opts, spec, d)?;
    Ok(PartialLabelingReport {
        rho,
        seed,
        n_labeled: labeled_idx.len(),
        n_test: test.dataset.n_samples(),
        pretrained: run_arm(pre, &labeled, &test, opts, seed)?,
        scratch: run_arm(scratch, &labeled, &test, opts, seed)?,
    })
}

/// The scratch arm of [`partial_labeling`] alone, on the same splits.
pub fn partial_labeling_scratch(
    data: &LabeledData,
    rho: f64,
    spec: &TaskSpec,
    seed: u64,
    opts: &PipelineOptions,
    architectures: &[PretrainedInstance],
) -> Result<ArmReport> {
    check_rho(rho)?;
    let (pool, test) = test_split(data, opts)?;
    let (labeled_idx, _) = stratified_pick(&pool, data.class_labels(), rho, seed);
    let model = scratch_model(architectures, opts, task_spec(spec, seed), data.dataset.n_channels())?;
    run_arm(model, &data.subset(&labeled_idx)?, &test, opts, seed)
}

/// Pre-trains on `source` and fine-tunes on `n` target samples, compared
/// with training from scratch on the source plus the same `n` samples.
/// With `n = 0` the pre-trained arm is fine-tuned on the source alone and
/// evaluated zero-shot on the target.
pub fn domain_shift(
    source: &LabeledData,
    target: &LabeledData,
    n: usize,
    spec: &TaskSpec,
    seed: u64,
    opts: &PipelineOptions,
    pretrained: Option<&[PretrainedInstance]>,
) -> Result<DomainShiftReport> {
    let (s, t) = (&source.dataset, &target.dataset);
    if s.n_channels() != t.n_channels() {
        return Err(shape_err(format!(
            "source has {} channels, target {}",
            s.n_channels(),
            t.n_channels()
        )));
    }
    if s.len_time() != t.len_time() {
        return Err(shape_err(format!("source has T={}, target T={}", s.len_time(), t.len_time())));
    }
    if n > t.n_samples() {
        return Err(param_err(format!("target budget {n} exceeds the {} target samples", t.n_samples())));
    }
    let (pool, test) = test_split(target, opts)?;
    if n > pool.len() {
        return Err(param_err(format!(
            "target budget {n} exceeds the {} target samples outside the test split",
            pool.len()
        )));
    }
    let mut shuffled = pool;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut budget_idx = shuffled[..n].to_vec();
    budget_idx.sort_unstable();
    let few = if n == 0 { None } else { Some(target.subset(&budget_idx)?) };
    let encoders = match pretrained {
        Some(e) => e.to_vec(),
        None => pretrain_all(opts, s)?,
    };
    let spec = task_spec(spec, seed);
    let pre = TaskModel::with_fusion_kind(encoders.clone(), opts.fusion, spec.clone())?;
    let (pre_train, mixed) = match &few {
        None => (source.clone(), source.clone()),
        Some(f) => (f.clone(), source.concat(f)?),
    };
    let scratch = scratch_model(&encoders, opts, spec, s.n_channels())?;
    Ok(DomainShiftReport {
        target_budget: n,
        seed,
        n_test: test.dataset.n_samples(),
        zero_shot: n == 0,
        pretrained: run_arm(pre, &pre_train, &test, opts, seed)?,
        scratch: run_arm(scratch, &mixed, &test, opts, seed)?,
    })
}
