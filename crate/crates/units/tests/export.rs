use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use units::evaluate::predict;
use units::export::{decode_tensor, encode_tensor, export_model, export_model_json, import_model_json, SCHEMA_VERSION};
use units_core::data::{LabelSet, MissingIndex, TimeSeriesDataset};
use units_core::error::Error;
use units_core::model::EncoderConfig;
use units_core::tensor::Matrix;
use units_pretrain::{fit, PretrainTemplateConfig, PretrainedInstance, TemplateFamily};
use units_tasks::{fine_tune, FusionKind, TaskKind, TaskModel, TaskSpec};

fn data(n: usize, t: usize, seed: u64) -> TimeSeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TimeSeriesDataset::new(n, 2, t, (0..n * 2 * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn encoders(x: &TimeSeriesDataset) -> Vec<PretrainedInstance> {
    [TemplateFamily::ContrastiveSeries, TemplateFamily::Hybrid]
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let mut cfg = PretrainTemplateConfig::new(f);
            cfg.encoder = EncoderConfig {
                depth: 1,
                hidden_width: 8,
                repr_dim: 4 + 2 * i,
                seed: i as u64,
                ..Default::default()
            };
            cfg.epochs = 1;
            cfg.batch_size = 8;
            fit(&cfg, x).unwrap()
        })
        .collect()
}

fn spec(task: TaskKind) -> TaskSpec {
    let mut s = match task {
        TaskKind::Classification => TaskSpec::classification(3),
        TaskKind::Clustering => TaskSpec::clustering(3),
        TaskKind::Forecasting => TaskSpec::forecasting(4),
        TaskKind::AnomalyDetection => TaskSpec::anomaly_detection(),
        TaskKind::Imputation => TaskSpec::imputation(),
    };
    s.epochs = 2;
    s.batch_size = 8;
    s
}

fn trained(task: TaskKind, fusion: FusionKind, x: &TimeSeriesDataset) -> TaskModel {
    let labels = LabelSet::classes((0..x.n_samples()).map(|i| i % 3).collect(), 3).unwrap();
    let model = TaskModel::with_fusion_kind(encoders(x), fusion, spec(task)).unwrap();
    fine_tune(model, x, Some(&labels)).unwrap()
}

/// Largest absolute difference between numeric leaves; other leaves and
/// the structure must match exactly.
fn max_diff(a: &Value, b: &Value) -> f64 {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => (x.as_f64().unwrap() - y.as_f64().unwrap()).abs(),
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| max_diff(p, q)).fold(0.0, f64::max)
        }
        (Value::Object(x), Value::Object(y)) => {
            assert_eq!(x.len(), y.len());
            x.iter().map(|(k, v)| max_diff(v, &y[k])).fold(0.0, f64::max)
        }
        _ => {
            assert_eq!(a, b);
            0.0
        }
    }
}

fn missing(x: &TimeSeriesDataset) -> MissingIndex {
    let (n, d, t) = x.shape();
    MissingIndex::mcar(n, d, t, 0.2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
}

#[test]
fn roundtrip_predictions_agree_for_every_task() {
    let x = data(12, 16, 1);
    let eval = data(7, 16, 2);
    let m = missing(&eval);
    for task in TaskKind::ALL {
        for fusion in [FusionKind::Concatenation, FusionKind::Projection] {
            let model = trained(task, fusion, &x);
            let doc = export_model_json(&model).unwrap();
            let back = import_model_json(&doc).unwrap();
            let before = serde_json::to_value(predict(&model, &eval, &m).unwrap()).unwrap();
            let after = serde_json::to_value(predict(&back, &eval, &m).unwrap()).unwrap();
            let diff = max_diff(&before, &after);
            assert!(diff <= 1e-6, "{task} / {fusion:?}: predictions differ by {diff}");
            assert_eq!(export_model_json(&back).unwrap(), doc, "{task}: re-export differs");
        }
    }
}

#[test]
fn export_has_the_documented_top_level_keys() {
    let x = data(12, 16, 1);
    let doc: Value = serde_json::from_str(&export_model_json(&trained(TaskKind::Classification, FusionKind::Projection, &x)).unwrap()).unwrap();
    let keys: Vec<&str> = doc.as_object().unwrap().keys().map(String::as_str).collect();
    let mut expected = vec!["schema_version", "encoders", "fusion", "task_head", "task_spec", "normalization"];
    expected.sort_unstable();
    let mut keys = keys;
    keys.sort_unstable();
    assert_eq!(keys, expected);
    assert_eq!(doc["schema_version"], SCHEMA_VERSION);
    let tensor = &doc["encoders"][0]["parameters"][0];
    assert!(tensor["name"].is_string() && tensor["shape"].is_array() && tensor["data"].is_string());
}

#[test]
fn tensors_encode_as_little_endian_f32() {
    let m = Matrix::from_vec(2, 2, vec![1.0, -2.5, 0.0, 3.0]);
    let e = encode_tensor("w", &m);
    assert_eq!(e.shape, [2, 2]);
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD.decode(&e.data).unwrap();
    assert_eq!(&bytes[4..8], &(-2.5f32).to_le_bytes());
    assert_eq!(decode_tensor(&e, "x").unwrap(), m);
}

#[test]
fn tampered_array_length_names_the_entry() {
    let x = data(12, 16, 1);
    let mut doc: Value =
        serde_json::from_str(&export_model_json(&trained(TaskKind::Classification, FusionKind::Concatenation, &x)).unwrap()).unwrap();
    let entry = &mut doc["encoders"][1]["parameters"][0];
    let name = entry["name"].as_str().unwrap().to_string();
    use base64::Engine;
    let engine = base64::engine::general_purpose::STANDARD;
    let mut bytes = engine.decode(entry["data"].as_str().unwrap()).unwrap();
    bytes.truncate(bytes.len() - 4);
    entry["data"] = Value::String(engine.encode(bytes));
    match import_model_json(&doc.to_string()) {
        Err(Error::Format { location, .. }) => {
            assert!(location.contains("encoders[1]") && location.contains(&name), "{location}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn tampered_shapes_and_heads_are_rejected() {
    let x = data(12, 16, 1);
    let good: Value =
        serde_json::from_str(&export_model_json(&trained(TaskKind::Classification, FusionKind::Projection, &x)).unwrap()).unwrap();

    let mut swapped = good.clone();
    let shape = swapped["task_head"]["parameters"][0]["shape"].clone();
    swapped["task_head"]["parameters"][0]["shape"] = Value::Array(vec![shape[1].clone(), shape[0].clone()]);
    assert!(import_model_json(&swapped.to_string()).is_err());

    let mut no_head = good.clone();
    no_head["task_head"]["parameters"] = Value::Array(vec![]);
    assert!(matches!(import_model_json(&no_head.to_string()), Err(Error::Shape(_))));

    let mut bad_dims = good.clone();
    bad_dims["fusion"]["input_dims"] = serde_json::json!([4, 7]);
    assert!(import_model_json(&bad_dims.to_string()).is_err());

    let mut nan = good;
    use base64::Engine;
    nan["task_head"]["parameters"][1]["data"] =
        Value::String(base64::engine::general_purpose::STANDARD.encode(f32::NAN.to_le_bytes().repeat(3)));
    assert!(matches!(import_model_json(&nan.to_string()), Err(Error::Format { .. })));
}

#[test]
fn schema_version_mismatch_is_a_version_error() {
    let x = data(12, 16, 1);
    let mut doc: Value =
        serde_json::from_str(&export_model_json(&trained(TaskKind::Forecasting, FusionKind::Concatenation, &x)).unwrap()).unwrap();
    doc["schema_version"] = Value::from(SCHEMA_VERSION + 1);
    assert!(matches!(import_model_json(&doc.to_string()), Err(Error::Version { .. })));
    doc.as_object_mut().unwrap().remove("schema_version");
    assert!(matches!(import_model_json(&doc.to_string()), Err(Error::Version { .. })));
}

#[test]
fn unfitted_models_cannot_be_exported() {
    let x = data(12, 16, 1);
    let model = TaskModel::with_fusion_kind(encoders(&x), FusionKind::Concatenation, spec(TaskKind::Classification)).unwrap();
    assert!(matches!(export_model(&model), Err(Error::State(_))));
}
