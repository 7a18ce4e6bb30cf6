use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use units_core::data::{load_dataset, DataFormat, LabelSet, LoadedData};
use units_core::error::{param_err, Error, Result};
use units_pretrain::TemplateFamily;
use units_tasks::{FusionKind, TaskKind, TaskSpec};
use units_tuning::ConfigMode;

use units::evaluate::{evaluate, predict};
use units::jobs::{prepare_finetune, prepare_pretrain, FinetuneRequest, PretrainConfigRequest, PretrainRequest};
use units::pipeline::{domain_shift, partial_labeling, LabeledData, PipelineOptions};
use units::registry::{RunStatus, StoredDataset};
use units::Registry;

#[derive(Parser)]
#[command(name = "units", version, about = "Pre-train time-series encoders and fine-tune task models")]
struct Cli {
    /// Registry directory.
    #[arg(long, global = true, env = "UNITS_HOME", default_value = "units-registry")]
    registry: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train one encoder per template and register it.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true)]
        template: Vec<TemplateFamily>,
        /// `key=value` overrides (manual and smart modes).
        #[arg(long = "config")]
        config: Vec<String>,
        #[arg(long, default_value = "default")]
        mode: ConfigMode,
        /// Smart-mode trial budget.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Fine-tune a task model on registered encoders.
    Finetune {
        #[arg(long)]
        task: TaskKind,
        /// Comma-separated encoder ids.
        #[arg(long, value_delimiter = ',')]
        encoders: Vec<String>,
        #[arg(long, default_value = "concat")]
        fusion: FusionKind,
        #[arg(long)]
        data: PathBuf,
        /// Label file (JSON label set); labels embedded in the data are used otherwise.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        n_classes: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Train the encoder architectures from random initialization.
        #[arg(long)]
        from_scratch: bool,
        #[arg(long = "config")]
        config: Vec<String>,
        #[arg(long, default_value = "default")]
        mode: ConfigMode,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Write predictions of a registered model as JSON.
    Predict {
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the evaluation of a registered model on labeled data.
    Evaluate {
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the JSON export of a registered model.
    Export {
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register a model from its JSON export.
    Import {
        #[arg(long)]
        file: PathBuf,
    },
    /// Pre-trained versus from-scratch comparisons.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = units::service::DEFAULT_WORKERS)]
        workers: usize,
    },
}

#[derive(Args)]
struct FineTuneArgs {
    #[arg(long, default_value = "classification")]
    task: TaskKind,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    /// Encoder learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    head_lr: Option<f64>,
    #[arg(long, default_value = "concat")]
    fusion: FusionKind,
}

#[derive(Subcommand)]
enum PipelineCommand {
    PartialLabeling {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Labeled fraction in (0, 1].
        #[arg(long)]
        rho: f64,
        #[command(flatten)]
        tune: FineTuneArgs,
    },
    DomainShift {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        source_labels: Option<PathBuf>,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        target_labels: Option<PathBuf>,
        /// Target samples available for fine-tuning.
        #[arg(long)]
        budget: usize,
        #[command(flatten)]
        tune: FineTuneArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load(data: &Path, labels: Option<&Path>) -> Result<LoadedData> {
    let mut loaded = load_dataset(data, DataFormat::from_path(data))?;
    if let Some(path) = labels {
        let l: LabelSet = serde_json::from_slice(&std::fs::read(path)?)?;
        l.validate()?;
        loaded.labels = Some(l);
    }
    Ok(loaded)
}

fn register(registry: &Registry, data: &Path, labels: Option<&Path>) -> Result<String> {
    let loaded = load(data, labels)?;
    Ok(registry
        .add_dataset(&StoredDataset {
            dataset: loaded.dataset,
            missing: loaded.missing,
            labels: loaded.labels,
        })?
        .id)
}

fn overrides(pairs: &[String]) -> Result<BTreeMap<String, serde_json::Value>> {
    pairs
        .iter()
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| param_err(format!("override '{p}' is not key=value")))?;
            Ok((k.trim().to_string(), serde_json::Value::String(v.trim().to_string())))
        })
        .collect()
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn pipeline_spec(t: &FineTuneArgs) -> TaskSpec {
    let mut spec = TaskSpec::new(t.task);
    spec.n_classes = t.n_classes;
    spec.horizon = t.horizon;
    if let Some(e) = t.epochs {
        spec.epochs = e;
    }
    if let Some(lr) = t.lr {
        spec.lr = lr;
    }
    if let Some(lr) = t.head_lr {
        spec.head_lr = lr;
    }
    spec
}

fn labeled(data: &Path, labels: Option<&Path>) -> Result<LabeledData> {
    let l = load(data, labels)?;
    Ok(LabeledData::new(l.dataset, l.labels))
}

fn run(cli: Cli) -> Result<()> {
    let registry = Registry::open(&cli.registry)?;
    match cli.command {
        Command::Pretrain {
            data,
            template,
            config,
            mode,
            budget,
        } => {
            let dataset_id = register(&registry, &data, None)?;
            let overrides = overrides(&config)?;
            let req = PretrainRequest {
                dataset_id,
                configs: template
                    .into_iter()
                    .map(|t| PretrainConfigRequest {
                        template: t,
                        mode,
                        overrides: overrides.clone(),
                        budget,
                    })
                    .collect(),
            };
            let mut failed = false;
            for job in prepare_pretrain(&registry, &req)? {
                let id = job.run_id();
                job.execute(&registry)?;
                let rec = registry.run(&id)?.snapshot();
                failed |= rec.status == RunStatus::Failed;
                print_json(&serde_json::json!({
                    "run_id": rec.id,
                    "status": rec.status,
                    "encoder_ids": rec.encoder_ids,
                    "final_loss": rec.metrics.last().map(|m| m.loss),
                    "error": rec.error,
                }))?;
            }
            if failed {
                return Err(Error::State("a pre-training run failed".into()));
            }
        }
        Command::Finetune {
            task,
            encoders,
            fusion,
            data,
            labels,
            n_classes,
            horizon,
            from_scratch,
            config,
            mode,
            budget,
        } => {
            let dataset_id = register(&registry, &data, labels.as_deref())?;
            let mut req = FinetuneRequest::new(dataset_id, task);
            req.encoder_ids = encoders;
            req.fusion = fusion;
            req.n_classes = n_classes;
            req.horizon = horizon;
            req.from_scratch = from_scratch;
            req.overrides = overrides(&config)?;
            req.mode = mode;
            req.budget = budget;
            let job = prepare_finetune(&registry, &req)?;
            let id = job.run_id();
            job.execute(&registry)?;
            let rec = registry.run(&id)?.snapshot();
            let model = rec.model_ids.first().map(|m| registry.model_record(m)).transpose()?;
            print_json(&serde_json::json!({
                "run_id": rec.id,
                "status": rec.status,
                "model_id": model.as_ref().map(|m| &m.id),
                "evaluation": model.as_ref().and_then(|m| m.evaluation.as_ref()),
                "error": rec.error,
            }))?;
            if rec.status == RunStatus::Failed {
                return Err(Error::State("the fine-tuning run failed".into()));
            }
        }
        Command::Predict { model, data, out } => {
            let m = registry.model(&model)?;
            let loaded = load(&data, None)?;
            let p = predict(&m, &loaded.dataset, &loaded.missing)?;
            std::fs::write(&out, serde_json::to_vec_pretty(&p)?)?;
        }
        Command::Evaluate {
            model,
            data,
            labels,
            seed,
        } => {
            let m = registry.model(&model)?;
            let loaded = load(&data, labels.as_deref())?;
            print_json(&evaluate(&m, &loaded.dataset, loaded.labels.as_ref(), &loaded.missing, seed)?)?;
        }
        Command::Export { model, out } => {
            std::fs::write(&out, registry.model_export(&model)?)?;
        }
        Command::Import { file } => {
            let doc = std::fs::read_to_string(&file)?;
            print_json(&registry.import_model(&doc)?)?;
        }
        Command::Pipeline(PipelineCommand::PartialLabeling { data, labels, rho, tune }) => {
            let d = labeled(&data, labels.as_deref())?;
            let mut spec = pipeline_spec(&tune);
            if spec.task == TaskKind::Classification && spec.n_classes.is_none() {
                spec.n_classes = d.labels.as_ref().and_then(|l| l.n_classes);
            }
            let opts = PipelineOptions {
                fusion: tune.fusion,
                ..PipelineOptions::default()
            };
            print_json(&partial_labeling(&d, rho, &spec, tune.seed, &opts, None)?)?;
        }
        Command::Pipeline(PipelineCommand::DomainShift {
            source,
            source_labels,
            target,
            target_labels,
            budget,
            tune,
        }) => {
            let s = labeled(&source, source_labels.as_deref())?;
            let t = labeled(&target, target_labels.as_deref())?;
            let mut spec = pipeline_spec(&tune);
            if spec.task == TaskKind::Classification && spec.n_classes.is_none() {
                spec.n_classes = s.labels.as_ref().and_then(|l| l.n_classes);
            }
            let opts = PipelineOptions {
                fusion: tune.fusion,
                ..PipelineOptions::default()
            };
            print_json(&domain_shift(&s, &t, budget, &spec, tune.seed, &opts, None)?)?;
        }
        Command::Serve { port, workers } => {
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("listening on http://127.0.0.1:{port}");
            rt.block_on(units::service::serve(Arc::new(registry), port, workers))?;
        }
    }
    Ok(())
}
