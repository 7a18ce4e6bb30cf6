//! Run, dataset, encoder and model registry on top of the object store.
//!
//! The index (`index.json`) holds every record; artifacts live in the
//! store. Index mutations are serialized by one mutex and persisted after
//! each change. Live runs keep their metric stream in an `Arc` snapshot
//! that readers clone without waiting on the training thread.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use units_core::data::{LabelKind, LabelSet, MissingIndex, TimeSeriesDataset};
use units_core::error::{param_err, Error, Result};
use units_pretrain::{PretrainTemplateConfig, PretrainedInstance, TemplateFamily};
use units_tasks::{FusionKind, TaskKind, TaskModel};

use crate::evaluate::Evaluation;
use crate::export::{export_model_json, import_model_json};
use crate::store::{write_atomic, Store};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredDataset {
    pub dataset: TimeSeriesDataset,
    #[serde(default)]
    pub missing: MissingIndex,
    #[serde(default)]
    pub labels: Option<LabelSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    /// Checksum of the stored dataset object.
    pub id: String,
    pub n_samples: usize,
    pub n_channels: usize,
    pub len_time: usize,
    pub missing_cells: usize,
    pub label_kind: Option<LabelKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderRecord {
    pub id: String,
    pub family: TemplateFamily,
    pub run_id: String,
    pub dataset_id: String,
    pub input_channels: usize,
    pub repr_dim: usize,
    pub config: PretrainTemplateConfig,
    pub final_loss: Option<f64>,
    /// Checksum of the serialized instance in the store.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub id: String,
    pub task: TaskKind,
    pub run_id: String,
    pub dataset_id: String,
    pub encoder_ids: Vec<String>,
    pub from_scratch: bool,
    pub fusion: FusionKind,
    pub fused_dim: usize,
    /// Checksum of the model export document in the store.
    pub checksum: String,
    pub evaluation: Option<Evaluation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub kind: RunKind,
    pub status: RunStatus,
    pub config: serde_json::Value,
    pub dataset_id: String,
    pub error: Option<String>,
    pub encoder_ids: Vec<String>,
    pub model_ids: Vec<String>,
    pub started_at: f64,
    pub finished_at: Option<f64>,
    pub metrics: Vec<MetricPoint>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Index {
    datasets: BTreeMap<String, DatasetRecord>,
    encoders: BTreeMap<String, EncoderRecord>,
    models: BTreeMap<String, ModelRecord>,
    runs: BTreeMap<String, RunRecord>,
}

fn now_secs() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub(crate) fn new_id(prefix: &str) -> String {
    format!("{prefix}-{}", uuid::Uuid::new_v4().simple())
}

/// A run in progress (or finished in this process).
#[derive(Debug)]
pub struct RunHandle {
    record: Mutex<RunRecord>,
    metrics: RwLock<Arc<Vec<MetricPoint>>>,
    started: std::time::Instant,
}

impl RunHandle {
    fn new(mut record: RunRecord) -> Self {
        let metrics = std::mem::take(&mut record.metrics);
        Self {
            record: Mutex::new(record),
            metrics: RwLock::new(Arc::new(metrics)),
            started: std::time::Instant::now(),
        }
    }

    pub fn id(&self) -> String {
        lock(&self.record).id.clone()
    }

    pub fn status(&self) -> RunStatus {
        lock(&self.record).status
    }

    /// Appends one metric point; steps must strictly increase.
    pub fn push_metric(&self, step: usize, epoch: usize, loss: f64) -> Result<()> {
        let mut guard = self.metrics.write().unwrap_or_else(|e| e.into_inner());
        if let Some(last) = guard.last() {
            if step <= last.step {
                return Err(param_err(format!("metric step {step} does not follow step {}", last.step)));
            }
        }
        Arc::make_mut(&mut guard).push(MetricPoint {
            step,
            epoch,
            loss,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    /// Adds `key` to the run's config snapshot.
    pub fn annotate(&self, key: &str, value: serde_json::Value) {
        let mut rec = lock(&self.record);
        if let serde_json::Value::Object(map) = &mut rec.config {
            map.insert(key.to_string(), value);
        }
    }

    /// The metric stream as of now.
    pub fn metrics(&self) -> Arc<Vec<MetricPoint>> {
        self.metrics.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn snapshot(&self) -> RunRecord {
        let mut r = lock(&self.record).clone();
        r.metrics = self.metrics().as_ref().clone();
        r
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Artifacts produced by a successful run.
#[derive(Debug, Default)]
pub struct RunOutputs {
    pub encoders: Vec<PretrainedInstance>,
    pub model: Option<FinishedModel>,
}

#[derive(Debug)]
pub struct FinishedModel {
    /// Pre-assigned model id; generated when absent.
    pub id: Option<String>,
    pub model: TaskModel,
    pub encoder_ids: Vec<String>,
    pub from_scratch: bool,
    pub evaluation: Option<Evaluation>,
}

#[derive(Debug)]
pub struct Registry {
    store: Store,
    index: Mutex<Index>,
    runs: RwLock<BTreeMap<String, Arc<RunHandle>>>,
}

impl Registry {
    /// Opens (or creates) a registry rooted at `root`. Runs left running
    /// by an earlier process are marked failed.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let store = Store::open(root.as_ref())?;
        let path = store.root().join("index.json");
        let mut index: Index = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Index::default(),
            Err(e) => return Err(e.into()),
        };
        for run in index.runs.values_mut().filter(|r| r.status == RunStatus::Running) {
            run.status = RunStatus::Failed;
            run.error = Some("interrupted".into());
        }
        let runs = index
            .runs
            .values()
            .map(|r| (r.id.clone(), Arc::new(RunHandle::new(r.clone()))))
            .collect();
        let reg = Self {
            store,
            index: Mutex::new(index),
            runs: RwLock::new(runs),
        };
        reg.persist(&lock(&reg.index))?;
        Ok(reg)
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn persist(&self, index: &Index) -> Result<()> {
        write_atomic(&self.store.root().join("index.json"), &serde_json::to_vec_pretty(index)?)
    }

    pub fn add_dataset(&self, data: &StoredDataset) -> Result<DatasetRecord> {
        if let Some(l) = &data.labels {
            l.validate()?;
        }
        data.missing.validate(data.dataset.n_channels(), data.dataset.len_time())?;
        let id = self.store.put_json(data)?;
        let (n, d, t) = data.dataset.shape();
        let rec = DatasetRecord {
            id: id.clone(),
            n_samples: n,
            n_channels: d,
            len_time: t,
            missing_cells: data.missing.total(),
            label_kind: data.labels.as_ref().map(|l| l.kind),
        };
        let mut index = lock(&self.index);
        index.datasets.insert(id, rec.clone());
        self.persist(&index)?;
        Ok(rec)
    }

    pub fn dataset_record(&self, id: &str) -> Result<DatasetRecord> {
        lock(&self.index)
            .datasets
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("dataset '{id}'")))
    }

    pub fn dataset(&self, id: &str) -> Result<StoredDataset> {
        self.dataset_record(id)?;
        self.store.get_json(id)
    }

    pub fn encoders(&self) -> Vec<EncoderRecord> {
        lock(&self.index).encoders.values().cloned().collect()
    }

    pub fn encoder_record(&self, id: &str) -> Result<EncoderRecord> {
        lock(&self.index)
            .encoders
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("encoder '{id}'")))
    }

    /// A fresh copy of a registered encoder, verified against its checksum.
    pub fn encoder(&self, id: &str) -> Result<PretrainedInstance> {
        let rec = self.encoder_record(id)?;
        self.store.get_json(&rec.checksum)
    }

    pub fn models(&self) -> Vec<ModelRecord> {
        lock(&self.index).models.values().cloned().collect()
    }

    pub fn model_record(&self, id: &str) -> Result<ModelRecord> {
        lock(&self.index)
            .models
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("model '{id}'")))
    }

    /// The stored export document of a model.
    pub fn model_export(&self, id: &str) -> Result<Vec<u8>> {
        let rec = self.model_record(id)?;
        self.store.get(&rec.checksum)
    }

    pub fn model(&self, id: &str) -> Result<TaskModel> {
        let bytes = self.model_export(id)?;
        let doc = String::from_utf8(bytes).map_err(|e| Error::Format {
            location: format!("model {id}"),
            message: e.to_string(),
        })?;
        import_model_json(&doc)
    }

    /// Registers an imported model outside any training run.
    pub fn import_model(&self, doc: &str) -> Result<ModelRecord> {
        let model = import_model_json(doc)?;
        let run = self.begin_run(RunKind::Finetune, serde_json::json!({ "import": true }), String::new())?;
        self.finish_run(
            &run,
            Ok(RunOutputs {
                encoders: Vec::new(),
                model: Some(FinishedModel {
                    id: None,
                    model,
                    encoder_ids: Vec::new(),
                    from_scratch: false,
                    evaluation: None,
                }),
            }),
        )?;
        let rec = run.snapshot();
        self.model_record(&rec.model_ids[0])
    }

    pub fn begin_run(&self, kind: RunKind, config: serde_json::Value, dataset_id: String) -> Result<Arc<RunHandle>> {
        let record = RunRecord {
            id: new_id("run"),
            kind,
            status: RunStatus::Running,
            config,
            dataset_id,
            error: None,
            encoder_ids: Vec::new(),
            model_ids: Vec::new(),
            started_at: now_secs(),
            finished_at: None,
            metrics: Vec::new(),
        };
        let handle = Arc::new(RunHandle::new(record.clone()));
        let mut index = lock(&self.index);
        index.runs.insert(record.id.clone(), record.clone());
        self.persist(&index)?;
        self.runs
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(record.id, handle.clone());
        Ok(handle)
    }

    pub fn run(&self, id: &str) -> Result<Arc<RunHandle>> {
        self.runs
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("run '{id}'")))
    }

    pub fn runs(&self) -> Vec<RunRecord> {
        let handles: Vec<Arc<RunHandle>> = self.runs.read().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
        handles.iter().map(|h| h.snapshot()).collect()
    }

    /// Ends a running run. On success its artifacts enter the registry in
    /// the same index update as the status change; on failure nothing but
    /// the run record changes.
    pub fn finish_run(&self, handle: &RunHandle, outcome: Result<RunOutputs>) -> Result<()> {
        let mut rec = lock(&handle.record);
        if rec.status != RunStatus::Running {
            return Err(Error::State(format!("run {} already finished as {:?}", rec.id, rec.status)));
        }
        let mut encoders = Vec::new();
        let mut models = Vec::new();
        let outcome = outcome.and_then(|out| {
            for inst in &out.encoders {
                let checksum = self.store.put_json(inst)?;
                encoders.push(EncoderRecord {
                    id: new_id("enc"),
                    family: inst.config.family,
                    run_id: rec.id.clone(),
                    dataset_id: rec.dataset_id.clone(),
                    input_channels: inst.encoder.config().input_channels,
                    repr_dim: inst.encoder.repr_dim(),
                    config: inst.config.clone(),
                    final_loss: inst.loss_curve.last().copied(),
                    checksum,
                });
            }
            if let Some(m) = &out.model {
                let checksum = self.store.put(export_model_json(&m.model)?.as_bytes())?;
                models.push(ModelRecord {
                    id: m.id.clone().unwrap_or_else(|| new_id("model")),
                    task: m.model.spec.task,
                    run_id: rec.id.clone(),
                    dataset_id: rec.dataset_id.clone(),
                    encoder_ids: m.encoder_ids.clone(),
                    from_scratch: m.from_scratch,
                    fusion: m.model.fusion.kind,
                    fused_dim: m.model.fused_dim(),
                    checksum,
                    evaluation: m.evaluation.clone(),
                });
            }
            Ok(())
        });
        rec.finished_at = Some(now_secs());
        match outcome {
            Ok(()) => {
                rec.status = RunStatus::Succeeded;
                rec.encoder_ids = encoders.iter().map(|e| e.id.clone()).collect();
                rec.model_ids = models.iter().map(|m| m.id.clone()).collect();
            }
            Err(e) => {
                rec.status = RunStatus::Failed;
                rec.error = Some(e.to_string());
                encoders.clear();
                models.clear();
            }
        }
        let mut full = rec.clone();
        full.metrics = handle.metrics().as_ref().clone();
        let mut index = lock(&self.index);
        for e in encoders {
            index.encoders.insert(e.id.clone(), e);
        }
        for m in models {
            index.models.insert(m.id.clone(), m);
        }
        index.runs.insert(full.id.clone(), full);
        self.persist(&index)
    }
}
