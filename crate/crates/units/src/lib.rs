//! Run registry, JSON model export, task pipelines and the HTTP service
//! around the pre-training and fine-tuning crates.

pub mod evaluate;
pub mod export;
pub mod jobs;
pub mod pipeline;
pub mod registry;
pub mod service;
pub mod store;

pub use export::{export_model, export_model_json, import_model, import_model_json, ModelExport, SCHEMA_VERSION};
pub use registry::Registry;
