//! Default hyper-parameter tables and their mapping onto pre-training and
//! fine-tuning configurations.
//!
//! Pre-training defaults (every template family):
//!
//! | key | default |
//! |-----|---------|
//! | `epochs` | 10 |
//! | `batch_size` | 16 |
//! | `lr` | 1e-3 |
//! | `temperature` | 0.2 |
//! | `n_negatives` | 10 |
//! | `masking_rate` | 0.15 |
//! | `mask_geometry` | `contiguous_spans` |
//! | `hybrid_weight` | 0.5 (hybrid family only) |
//! | `augmentations` | `crop_resize(0.7),scale(0.2),jitter(0.2)` |
//! | `seed` | 0 |
//! | `encoder.architecture` | `dilated_conv` |
//! | `encoder.depth` | 3 |
//! | `encoder.hidden_width` | 64 |
//! | `encoder.repr_dim` | 64 |
//! | `encoder.kernel_size` | 3 |
//! | `encoder.seed` | 0 |
//!
//! Fine-tuning defaults (every task):
//!
//! | key | default |
//! |-----|---------|
//! | `epochs` | 20 |
//! | `batch_size` | 16 |
//! | `lr` (encoders) | 1e-4 |
//! | `head_lr` (fusion and head) | 1e-3 |
//! | `beta` | 0.1 |
//! | `masking_rate` | 0.2 |
//! | `forecast_loss` | `mse` |
//! | `threshold` | `quantile(0.99)` |
//! | `trainable` | `encoders,fusion,head` |
//! | `seed` | 0 |

use units_core::data::MaskGeometry;
use units_core::error::{param_err, Result};
use units_core::model::Architecture;
use units_pretrain::augment::Augmentation;
use units_pretrain::{PretrainTemplateConfig, TemplateFamily};
use units_tasks::spec::{ForecastLoss, TaskKind, TaskSpec, ThresholdRule, TrainableGroups};

use crate::space::{Config, Dimension, ParamValue, SearchSpace};

fn arch_name(a: Architecture) -> &'static str {
    match a {
        Architecture::DilatedConv => "dilated_conv",
        Architecture::Mlp => "mlp",
    }
}

fn geometry_name(g: MaskGeometry) -> &'static str {
    match g {
        MaskGeometry::Iid => "iid",
        MaskGeometry::ContiguousSpans => "contiguous_spans",
    }
}

fn int(v: usize) -> ParamValue {
    ParamValue::Int(v as i64)
}

fn text(s: impl Into<String>) -> ParamValue {
    ParamValue::Text(s.into())
}

/// The table above, read back from a configuration.
pub fn pretrain_table(cfg: &PretrainTemplateConfig) -> Config {
    let mut c = Config::new();
    c.insert("epochs".into(), int(cfg.epochs));
    c.insert("batch_size".into(), int(cfg.batch_size));
    c.insert("lr".into(), ParamValue::Real(cfg.lr));
    c.insert("temperature".into(), ParamValue::Real(cfg.temperature));
    c.insert("n_negatives".into(), int(cfg.n_negatives));
    c.insert("masking_rate".into(), ParamValue::Real(cfg.masking_rate));
    c.insert("mask_geometry".into(), text(geometry_name(cfg.mask_geometry)));
    if let Some(l) = cfg.hybrid_weight {
        c.insert("hybrid_weight".into(), ParamValue::Real(l));
    }
    let augs: Vec<String> = cfg.augmentations.iter().map(ToString::to_string).collect();
    c.insert("augmentations".into(), text(augs.join(",")));
    c.insert("seed".into(), int(cfg.seed as usize));
    let e = &cfg.encoder;
    c.insert("encoder.architecture".into(), text(arch_name(e.architecture)));
    c.insert("encoder.depth".into(), int(e.depth));
    c.insert("encoder.hidden_width".into(), int(e.hidden_width));
    c.insert("encoder.repr_dim".into(), int(e.repr_dim));
    c.insert("encoder.kernel_size".into(), int(e.kernel_size));
    c.insert("encoder.seed".into(), int(e.seed as usize));
    c
}

pub fn pretrain_defaults(family: TemplateFamily) -> Config {
    pretrain_table(&PretrainTemplateConfig::new(family))
}

fn get_usize(c: &Config, key: &str) -> Result<Option<usize>> {
    c.get(key)
        .map(|v| v.as_usize().ok_or_else(|| param_err(format!("'{key}' must be a nonnegative integer, got {v}"))))
        .transpose()
}

fn get_f64(c: &Config, key: &str) -> Result<Option<f64>> {
    c.get(key)
        .map(|v| v.as_f64().ok_or_else(|| param_err(format!("'{key}' must be a number, got {v}"))))
        .transpose()
}

fn get_str<'a>(c: &'a Config, key: &str) -> Result<Option<&'a str>> {
    c.get(key)
        .map(|v| v.as_str().ok_or_else(|| param_err(format!("'{key}' must be text, got {v}"))))
        .transpose()
}

fn check_keys(c: &Config, valid: &Config) -> Result<()> {
    if let Some(k) = c.keys().find(|k| !valid.contains_key(*k)) {
        let names: Vec<&str> = valid.keys().map(String::as_str).collect();
        return Err(param_err(format!("unknown key '{k}'; valid keys: {}", names.join(", "))));
    }
    Ok(())
}

/// Builds a pre-training configuration from defaults patched by `c`.
pub fn pretrain_config(family: TemplateFamily, c: &Config) -> Result<PretrainTemplateConfig> {
    let mut valid = pretrain_defaults(family);
    valid.entry("hybrid_weight".into()).or_insert(ParamValue::Real(0.5));
    check_keys(c, &valid)?;
    let mut cfg = PretrainTemplateConfig::new(family);
    if let Some(v) = get_usize(c, "epochs")? {
        cfg.epochs = v;
    }
    if let Some(v) = get_usize(c, "batch_size")? {
        cfg.batch_size = v;
    }
    if let Some(v) = get_f64(c, "lr")? {
        cfg.lr = v;
    }
    if let Some(v) = get_f64(c, "temperature")? {
        cfg.temperature = v;
    }
    if let Some(v) = get_usize(c, "n_negatives")? {
        cfg.n_negatives = v;
    }
    if let Some(v) = get_f64(c, "masking_rate")? {
        cfg.masking_rate = v;
    }
    if let Some(v) = get_str(c, "mask_geometry")? {
        cfg.mask_geometry = v.parse()?;
    }
    if let Some(v) = get_f64(c, "hybrid_weight")? {
        cfg.hybrid_weight = Some(v);
    }
    if let Some(v) = get_str(c, "augmentations")? {
        cfg.augmentations = v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse::<Augmentation>)
            .collect::<Result<_>>()?;
    }
    if let Some(v) = get_usize(c, "seed")? {
        cfg.seed = v as u64;
    }
    if let Some(v) = get_str(c, "encoder.architecture")? {
        cfg.encoder.architecture = v.parse()?;
    }
    if let Some(v) = get_usize(c, "encoder.depth")? {
        cfg.encoder.depth = v;
    }
    if let Some(v) = get_usize(c, "encoder.hidden_width")? {
        cfg.encoder.hidden_width = v;
    }
    if let Some(v) = get_usize(c, "encoder.repr_dim")? {
        cfg.encoder.repr_dim = v;
    }
    if let Some(v) = get_usize(c, "encoder.kernel_size")? {
        cfg.encoder.kernel_size = v;
    }
    if let Some(v) = get_usize(c, "encoder.seed")? {
        cfg.encoder.seed = v as u64;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn threshold_text(rule: ThresholdRule) -> String {
    match rule {
        ThresholdRule::Fixed { tau } => format!("fixed({tau})"),
        ThresholdRule::Quantile { q } => format!("quantile({q})"),
    }
}

fn parse_threshold(s: &str) -> Result<ThresholdRule> {
    let bad = || param_err(format!("threshold '{s}' is not fixed(<tau>) or quantile(<q>)"));
    let (name, rest) = s.split_once('(').ok_or_else(bad)?;
    let v: f64 = rest.strip_suffix(')').ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    match name.trim() {
        "fixed" => Ok(ThresholdRule::Fixed { tau: v }),
        "quantile" => Ok(ThresholdRule::Quantile { q: v }),
        _ => Err(bad()),
    }
}

fn trainable_text(t: TrainableGroups) -> String {
    let mut parts = Vec::new();
    for (on, name) in [(t.encoders, "encoders"), (t.fusion, "fusion"), (t.head, "head")] {
        if on {
            parts.push(name);
        }
    }
    parts.join(",")
}

fn parse_trainable(s: &str) -> Result<TrainableGroups> {
    let mut t = TrainableGroups {
        encoders: false,
        fusion: false,
        head: false,
    };
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "encoders" => t.encoders = true,
            "fusion" => t.fusion = true,
            "head" => t.head = true,
            other => return Err(param_err(format!("unknown parameter group '{other}'"))),
        }
    }
    Ok(t)
}

pub fn finetune_table(spec: &TaskSpec) -> Config {
    let mut c = Config::new();
    c.insert("epochs".into(), int(spec.epochs));
    c.insert("batch_size".into(), int(spec.batch_size));
    c.insert("lr".into(), ParamValue::Real(spec.lr));
    c.insert("head_lr".into(), ParamValue::Real(spec.head_lr));
    c.insert("beta".into(), ParamValue::Real(spec.beta));
    c.insert("masking_rate".into(), ParamValue::Real(spec.masking_rate));
    let loss = match spec.forecast_loss {
        ForecastLoss::Mse => "mse",
        ForecastLoss::Mae => "mae",
    };
    c.insert("forecast_loss".into(), text(loss));
    c.insert("threshold".into(), text(threshold_text(spec.threshold)));
    c.insert("trainable".into(), text(trainable_text(spec.trainable)));
    c.insert("seed".into(), int(spec.seed as usize));
    c
}

pub fn finetune_defaults() -> Config {
    finetune_table(&TaskSpec::new(TaskKind::Classification))
}

/// Patches `base` (which carries the task declaration) with `c`.
pub fn finetune_spec(base: &TaskSpec, c: &Config) -> Result<TaskSpec> {
    check_keys(c, &finetune_defaults())?;
    let mut s = base.clone();
    if let Some(v) = get_usize(c, "epochs")? {
        s.epochs = v;
    }
    if let Some(v) = get_usize(c, "batch_size")? {
        s.batch_size = v;
    }
    if let Some(v) = get_f64(c, "lr")? {
        s.lr = v;
    }
    if let Some(v) = get_f64(c, "head_lr")? {
        s.head_lr = v;
    }
    if let Some(v) = get_f64(c, "beta")? {
        s.beta = v;
    }
    if let Some(v) = get_f64(c, "masking_rate")? {
        s.masking_rate = v;
    }
    if let Some(v) = get_str(c, "forecast_loss")? {
        s.forecast_loss = v.parse()?;
    }
    if let Some(v) = get_str(c, "threshold")? {
        s.threshold = parse_threshold(v)?;
    }
    if let Some(v) = get_str(c, "trainable")? {
        s.trainable = parse_trainable(v)?;
    }
    if let Some(v) = get_usize(c, "seed")? {
        s.seed = v as u64;
    }
    s.validate()?;
    Ok(s)
}

/// Default search space for pre-training.
pub fn pretrain_space(family: TemplateFamily) -> SearchSpace {
    let mut s = SearchSpace::new()
        .with("lr", Dimension::log_real(1e-4, 1e-2))
        .with("encoder.repr_dim", Dimension::Int { low: 16, high: 128 });
    match family {
        TemplateFamily::AutoregressiveMask => s = s.with("masking_rate", Dimension::real(0.05, 0.5)),
        TemplateFamily::Hybrid => {
            s = s
                .with("hybrid_weight", Dimension::real(0.0, 1.0))
                .with("temperature", Dimension::log_real(0.05, 1.0))
                .with("masking_rate", Dimension::real(0.05, 0.5))
        }
        _ => s = s.with("temperature", Dimension::log_real(0.05, 1.0)),
    }
    s
}

/// Default search space for fine-tuning.
pub fn finetune_space(task: TaskKind) -> SearchSpace {
    let s = SearchSpace::new()
        .with("lr", Dimension::log_real(1e-5, 1e-2))
        .with("head_lr", Dimension::log_real(1e-4, 1e-1));
    match task {
        TaskKind::Clustering => s.with("beta", Dimension::log_real(1e-3, 10.0)),
        TaskKind::Imputation | TaskKind::AnomalyDetection => s.with("masking_rate", Dimension::real(0.05, 0.5)),
        _ => s,
    }
}
