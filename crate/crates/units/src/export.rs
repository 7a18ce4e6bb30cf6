//! JSON model export.
//!
//! Top-level keys: `schema_version`, `encoders`, `fusion`, `task_head`,
//! `task_spec`, `normalization`. Every parameter tensor is an object
//! `{name, shape: [rows, cols], data}` where `data` is the base64 encoding
//! of the row-major values as little-endian 32-bit floats.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use units_core::data::NormalizationStats;
use units_core::error::{shape_err, Error, Result};
use units_core::model::{Encoder, Linear, NamedTensor};
use units_core::tensor::Matrix;
use units_pretrain::{PretrainTemplateConfig, PretrainedInstance, TemplateFamily};
use units_tasks::{FusionKind, FusionModel, TaskModel, TaskSpec};

pub const SCHEMA_VERSION: u32 = 1;

const RECONSTRUCTION_PREFIX: &str = "reconstruction_head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderEntry {
    pub family: TemplateFamily,
    pub config: PretrainTemplateConfig,
    pub parameters: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEntry {
    pub kind: FusionKind,
    pub input_dims: Vec<usize>,
    pub learnable: bool,
    pub parameters: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHeadEntry {
    pub parameters: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroids: Option<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelExport {
    pub schema_version: u32,
    pub encoders: Vec<EncoderEntry>,
    pub fusion: FusionEntry,
    pub task_head: TaskHeadEntry,
    pub task_spec: TaskSpec,
    pub normalization: NormalizationStats,
}

pub fn encode_tensor(name: &str, m: &Matrix) -> TensorEntry {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for &v in m.as_slice() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    TensorEntry {
        name: name.to_string(),
        shape: [m.rows(), m.cols()],
        data: BASE64.encode(bytes),
    }
}

/// Decodes one tensor; `path` names the entry in error messages.
pub fn decode_tensor(entry: &TensorEntry, path: &str) -> Result<Matrix> {
    let bad = |message: String| Error::Format {
        location: format!("{path}.{}", entry.name),
        message,
    };
    let bytes = BASE64
        .decode(entry.data.as_bytes())
        .map_err(|e| bad(format!("invalid base64: {e}")))?;
    let [rows, cols] = entry.shape;
    let expected = rows
        .checked_mul(cols)
        .ok_or_else(|| bad(format!("shape {rows}x{cols} overflows")))?;
    if bytes.len() != expected * 4 {
        return Err(bad(format!(
            "shape {rows}x{cols} needs {expected} values, data holds {} bytes",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value".into()));
    }
    Ok(Matrix::from_vec(rows, cols, values))
}

fn encode_all(params: &[NamedTensor]) -> Vec<TensorEntry> {
    params.iter().map(|p| encode_tensor(&p.name, &p.value)).collect()
}

fn decode_all(entries: &[TensorEntry], path: &str) -> Result<Vec<NamedTensor>> {
    entries
        .iter()
        .map(|e| Ok(NamedTensor::new(e.name.clone(), decode_tensor(e, path)?)))
        .collect()
}

/// Export document of a fitted model.
pub fn export_model(model: &TaskModel) -> Result<ModelExport> {
    if !model.fitted {
        return Err(Error::State("only fitted models can be exported".into()));
    }
    Ok(ModelExport {
        schema_version: SCHEMA_VERSION,
        encoders: model
            .encoders
            .iter()
            .map(|e| EncoderEntry {
                family: e.config.family,
                config: e.config.clone(),
                parameters: encode_all(&e.named_parameters()),
            })
            .collect(),
        fusion: FusionEntry {
            kind: model.fusion.kind,
            input_dims: model.fusion.input_dims.clone(),
            learnable: model.fusion.learnable,
            parameters: model
                .fusion
                .projection
                .as_ref()
                .map(|p| encode_all(&p.named_parameters("fusion")))
                .unwrap_or_default(),
        },
        task_head: TaskHeadEntry {
            parameters: model
                .head
                .as_ref()
                .map(|h| encode_all(&h.named_parameters("head")))
                .unwrap_or_default(),
            centroids: model.centroids.as_ref().map(|c| encode_tensor("centroids", c)),
            threshold: model.threshold,
        },
        task_spec: model.spec.clone(),
        normalization: model.normalization.clone(),
    })
}

pub fn export_model_json(model: &TaskModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(&export_model(model)?)?)
}

fn decode_encoder(m: usize, entry: &EncoderEntry) -> Result<PretrainedInstance> {
    let path = format!("encoders[{m}]");
    if entry.family != entry.config.family {
        return Err(Error::Format {
            location: path,
            message: format!("family {} disagrees with config family {}", entry.family, entry.config.family),
        });
    }
    let params = decode_all(&entry.parameters, &path)?;
    let (head, enc): (Vec<NamedTensor>, Vec<NamedTensor>) = params
        .into_iter()
        .partition(|p| p.name.starts_with(RECONSTRUCTION_PREFIX));
    let encoder = Encoder::from_parameters(entry.config.encoder.clone(), enc)
        .map_err(|e| shape_err(format!("{path}: {e}")))?;
    let reconstruction_head = match (entry.family.has_reconstruction_head(), head.is_empty()) {
        (true, false) => Some(Linear::from_named(RECONSTRUCTION_PREFIX, &head).map_err(|e| shape_err(format!("{path}: {e}")))?),
        (false, true) => None,
        (true, true) => return Err(shape_err(format!("{path}: reconstruction head missing"))),
        (false, false) => return Err(shape_err(format!("{path}: unexpected reconstruction head"))),
    };
    Ok(PretrainedInstance {
        config: entry.config.clone(),
        encoder,
        reconstruction_head,
        loss_curve: Vec::new(),
        fitted: true,
    })
}

/// Rebuilds a fitted model, checking the schema version first and every
/// tensor against the shapes implied by the configuration.
pub fn import_model_json(doc: &str) -> Result<TaskModel> {
    let value: serde_json::Value = serde_json::from_str(doc)?;
    match value.get("schema_version") {
        Some(v) if v.as_u64() == Some(SCHEMA_VERSION as u64) => {}
        other => {
            return Err(Error::Version {
                found: other.map_or_else(|| "none".to_string(), |v| v.to_string()),
                expected: SCHEMA_VERSION.to_string(),
            })
        }
    }
    let export: ModelExport = serde_json::from_value(value)?;
    import_model(&export)
}

pub fn import_model(export: &ModelExport) -> Result<TaskModel> {
    if export.schema_version != SCHEMA_VERSION {
        return Err(Error::Version {
            found: export.schema_version.to_string(),
            expected: SCHEMA_VERSION.to_string(),
        });
    }
    let encoders = export
        .encoders
        .iter()
        .enumerate()
        .map(|(m, e)| decode_encoder(m, e))
        .collect::<Result<Vec<_>>>()?;
    let f = &export.fusion;
    let fusion = match f.kind {
        FusionKind::Concatenation => {
            if !f.parameters.is_empty() {
                return Err(shape_err("fusion: concatenation carries no parameters"));
            }
            FusionModel::concatenation(f.input_dims.clone())?
        }
        FusionKind::Projection => {
            let map = Linear::from_named("fusion", &decode_all(&f.parameters, "fusion")?)
                .map_err(|e| shape_err(format!("fusion: {e}")))?;
            let mut fm = FusionModel::projection(f.input_dims.clone(), map)?;
            fm.learnable = f.learnable;
            fm
        }
    };
    let mut model = TaskModel::new(encoders, fusion, export.task_spec.clone())?
        .with_normalization(export.normalization.clone())?;
    let head_params = decode_all(&export.task_head.parameters, "task_head")?;
    model.head = match (&model.head, head_params.is_empty()) {
        (None, true) => None,
        (None, false) => return Err(shape_err("task_head: this task has no head")),
        (Some(_), true) => return Err(shape_err("task_head: parameters missing")),
        (Some(expected), false) => {
            let head = Linear::from_named("head", &head_params).map_err(|e| shape_err(format!("task_head: {e}")))?;
            if head.weight.shape() != expected.weight.shape() {
                return Err(shape_err(format!(
                    "task_head.head.weight: shape {:?}, model needs {:?}",
                    head.weight.shape(),
                    expected.weight.shape()
                )));
            }
            Some(head)
        }
    };
    model.centroids = export
        .task_head
        .centroids
        .as_ref()
        .map(|c| decode_tensor(c, "task_head"))
        .transpose()?;
    if let Some(c) = &model.centroids {
        if c.cols() != model.fused_dim() {
            return Err(shape_err(format!(
                "task_head.centroids: {} columns, fused dimension is {}",
                c.cols(),
                model.fused_dim()
            )));
        }
    }
    model.threshold = export.task_head.threshold;
    model.fitted = true;
    Ok(model)
}
