//! Feature fusion, task heads and fine-tuning for classification,
//! clustering, forecasting, anomaly detection and imputation.

pub mod fusion;
pub mod kmeans;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod spec;

pub use fusion::{concat_fuse, projection_fuse, FusionKind, FusionModel};
pub use model::{
    cluster_fit_loss, fine_tune, fine_tune_with_observer, kmeans_regularizer, task_loss, validation_loss, EpochRecord, TaskData,
    TaskModel, TaskVars,
};
pub use predict::{
    anomaly_decide, anomaly_detect, anomaly_scores, anomaly_scores_windowed, classify_predict, cluster_predict,
    forecast_predict, fused_representations, impute_predict, mean_impute, quantile, AnomalyResult, ClassPrediction,
    Imputation,
};
pub use spec::{ForecastLoss, TaskKind, TaskSpec, ThresholdRule, TrainableGroups};

use units_core::data::TimeSeriesDataset;
use units_core::error::{param_err, Result};

/// Denoising-autoencoder fine-tuning of an imputation model.
pub fn impute_fit(model: TaskModel, x: &TimeSeriesDataset) -> Result<TaskModel> {
    if model.spec.task != TaskKind::Imputation {
        return Err(param_err(format!("impute_fit needs an imputation model, got {}", model.spec.task)));
    }
    fine_tune(model, x, None)
}
