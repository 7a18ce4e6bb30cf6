use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use units_core::data::{gaussian, LabelSet, MissingIndex, TimeSeriesDataset};
use units_core::error::Error;
use units_core::model::EncoderConfig;
use units_core::tensor::Matrix;
use units_pretrain::{transform, PretrainTemplateConfig, PretrainedInstance, TemplateFamily};
use units_tasks::kmeans::kmeans;
use units_tasks::metrics::adjusted_rand_index;
use units_tasks::{
    anomaly_decide, anomaly_detect, anomaly_scores, anomaly_scores_windowed, classify_predict, cluster_predict, fine_tune, forecast_predict,
    fused_representations, impute_fit, impute_predict, kmeans_regularizer, FusionKind, FusionModel, TaskKind,
    TaskModel, TaskSpec, ThresholdRule, TrainableGroups,
};

fn config(family: TemplateFamily, repr_dim: usize, seed: u64) -> PretrainTemplateConfig {
    let mut cfg = PretrainTemplateConfig::new(family);
    cfg.encoder = EncoderConfig {
        depth: 1,
        hidden_width: 8,
        repr_dim,
        seed,
        ..Default::default()
    };
    cfg.seed = seed;
    cfg
}

fn instance(family: TemplateFamily, repr_dim: usize, d: usize, seed: u64) -> PretrainedInstance {
    let mut inst = PretrainedInstance::initialize(&config(family, repr_dim, seed), d).unwrap();
    inst.fitted = true;
    inst
}

fn random_data(n: usize, d: usize, t: usize, seed: u64) -> TimeSeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TimeSeriesDataset::new(n, d, t, (0..n * d * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Sample `i` is the constant `level_i` plus noise of std `noise`.
fn constant_series(n: usize, d: usize, t: usize, noise: f64, seed: u64) -> TimeSeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * d * t);
    for _ in 0..n {
        for _ in 0..d {
            let level = rng.random_range(-1.0..1.0);
            values.extend((0..t).map(|_| level + gaussian(&mut rng, noise)));
        }
    }
    TimeSeriesDataset::new(n, d, t, values).unwrap()
}

#[test]
fn fusion_offsets_match_per_instance_representations() {
    let x = random_data(5, 1, 12, 1);
    for m in 1..=3usize {
        for k in [4, 8, 16] {
            let encoders: Vec<_> = (0..m)
                .map(|i| instance(TemplateFamily::ContrastiveSeries, k + 4 * i, 1, 10 + i as u64))
                .collect();
            let parts: Vec<Matrix> = encoders.iter().map(|e| transform(e, &x).unwrap()).collect();
            let model = TaskModel::with_fusion_kind(encoders.clone(), FusionKind::Concatenation, TaskSpec::classification(2))
                .unwrap();
            let z = fused_representations(&model, &x).unwrap();
            let total: usize = (0..m).map(|i| k + 4 * i).sum();
            assert_eq!(z.shape(), (5, total));
            let mut offset = 0;
            for p in &parts {
                for r in 0..5 {
                    assert_eq!(&z.row(r)[offset..offset + p.cols()], p.row(r), "M={m} K={k}");
                }
                offset += p.cols();
            }

            let dims = encoders.iter().map(|e| e.encoder.repr_dim()).collect();
            let ident = FusionModel::projection_identity(dims, total).unwrap();
            let pm = TaskModel::new(encoders, ident, TaskSpec::classification(2)).unwrap();
            assert!(fused_representations(&pm, &x).unwrap().max_abs_diff(&z) < 1e-12);
        }
    }
}

#[test]
fn fusion_rejects_mismatched_dims() {
    let encoders = vec![instance(TemplateFamily::ContrastiveSeries, 4, 1, 1)];
    let fusion = FusionModel::concatenation(vec![8]).unwrap();
    assert!(TaskModel::new(encoders, fusion, TaskSpec::classification(2)).is_err());
    let mixed = vec![
        instance(TemplateFamily::ContrastiveSeries, 4, 1, 1),
        instance(TemplateFamily::ContrastiveSeries, 4, 2, 2),
    ];
    assert!(TaskModel::with_fusion_kind(mixed, FusionKind::Concatenation, TaskSpec::classification(2)).is_err());
}

#[test]
fn unfitted_encoders_are_rejected() {
    let inst = PretrainedInstance::initialize(&config(TemplateFamily::ContrastiveSeries, 4, 0), 1).unwrap();
    let err = TaskModel::with_fusion_kind(vec![inst], FusionKind::Concatenation, TaskSpec::classification(2)).unwrap_err();
    assert!(matches!(err, Error::State(_)), "{err}");
}

fn two_class(n: usize, t: usize, seed: u64) -> (TimeSeriesDataset, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let values = labels
        .iter()
        .flat_map(|&l| {
            let level = if l == 0 { -1.0 } else { 1.0 };
            (0..t).map(|_| level + gaussian(&mut rng, 0.3)).collect::<Vec<_>>()
        })
        .collect();
    (TimeSeriesDataset::new(n, 1, t, values).unwrap(), labels)
}

fn one_step_spec() -> TaskSpec {
    let mut spec = TaskSpec::classification(2);
    spec.epochs = 1;
    spec.batch_size = 64;
    spec.lr = 1e-2;
    spec.head_lr = 1e-2;
    spec
}

fn group_values(model: &TaskModel, prefix: &str) -> Vec<f64> {
    model
        .named_parameters()
        .iter()
        .filter(|p| p.name.starts_with(prefix))
        .flat_map(|p| p.value.as_slice().to_vec())
        .collect()
}

#[test]
fn one_step_updates_every_trainable_group() {
    let (x, y) = two_class(8, 12, 2);
    let labels = LabelSet::classes(y, 2).unwrap();
    let encoders = vec![instance(TemplateFamily::ContrastiveSeries, 4, 1, 3)];
    let model = TaskModel::with_fusion_kind(encoders, FusionKind::Projection, one_step_spec()).unwrap();
    let tuned = fine_tune(model.clone(), &x, Some(&labels)).unwrap();
    for group in ["encoders.", "fusion.", "head."] {
        assert!(!group_values(&model, group).is_empty(), "{group}");
        assert_ne!(group_values(&model, group), group_values(&tuned, group), "{group} unchanged");
    }
}

#[test]
fn frozen_groups_stay_bit_identical() {
    let (x, y) = two_class(8, 12, 4);
    let labels = LabelSet::classes(y, 2).unwrap();
    let encoders = vec![instance(TemplateFamily::ContrastiveSeries, 4, 1, 5)];
    for (trainable, frozen) in [
        (TrainableGroups::HEAD_ONLY, vec!["encoders.", "fusion."]),
        (
            TrainableGroups {
                encoders: false,
                fusion: true,
                head: true,
            },
            vec!["encoders."],
        ),
    ] {
        let mut spec = one_step_spec();
        spec.epochs = 3;
        spec.trainable = trainable;
        let model = TaskModel::with_fusion_kind(encoders.clone(), FusionKind::Projection, spec).unwrap();
        let tuned = fine_tune(model.clone(), &x, Some(&labels)).unwrap();
        for g in &frozen {
            let (a, b) = (group_values(&model, g), group_values(&tuned, g));
            assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()), "{g} moved");
        }
        assert_ne!(group_values(&model, "head."), group_values(&tuned, "head."));
    }
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let (x, y) = two_class(6, 10, 6);
    let labels = LabelSet::classes(y, 2).unwrap();
    let mut spec = one_step_spec();
    spec.epochs = 0;
    let encoders = vec![instance(TemplateFamily::ContrastiveSeries, 4, 1, 7)];
    let model = TaskModel::with_fusion_kind(encoders, FusionKind::Projection, spec).unwrap();
    let tuned = fine_tune(model.clone(), &x, Some(&labels)).unwrap();
    assert_eq!(model.named_parameters(), tuned.named_parameters());
    assert!(tuned.fitted && tuned.history.is_empty());
}

#[test]
fn classification_separates_levels() {
    let (x, y) = two_class(40, 16, 8);
    let (xt, yt) = two_class(40, 16, 9);
    let mut spec = TaskSpec::classification(2);
    spec.epochs = 30;
    spec.lr = 1e-2;
    spec.head_lr = 1e-2;
    let cfg = config(TemplateFamily::ContrastiveSeries, 8, 1);
    let model = TaskModel::from_scratch(&[cfg], 1, FusionKind::Concatenation, spec).unwrap();
    let model = fine_tune(model, &x, Some(&LabelSet::classes(y, 2).unwrap())).unwrap();
    let pred = classify_predict(&model, &xt).unwrap();
    let acc = units_tasks::metrics::accuracy(&pred.labels, &yt).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
    for r in 0..pred.probabilities.rows() {
        assert!((pred.probabilities.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn label_validation() {
    let (x, mut y) = two_class(6, 10, 10);
    let encoders = vec![instance(TemplateFamily::ContrastiveSeries, 4, 1, 1)];
    let model = TaskModel::with_fusion_kind(encoders, FusionKind::Concatenation, one_step_spec()).unwrap();
    assert!(fine_tune(model.clone(), &x, None).is_err());
    y.pop();
    assert!(fine_tune(model.clone(), &x, Some(&LabelSet::classes(y, 2).unwrap())).is_err());
    assert!(matches!(classify_predict(&model, &x), Err(Error::State(_))));
    let mut wrong = model.clone();
    wrong.fitted = true;
    assert!(forecast_predict(&wrong, &x).is_err());
}

#[test]
fn horizon_must_fit_in_window() {
    let x = random_data(4, 1, 8, 11);
    let encoders = vec![instance(TemplateFamily::ContrastiveSeries, 4, 1, 1)];
    let model = TaskModel::with_fusion_kind(encoders, FusionKind::Concatenation, TaskSpec::forecasting(8)).unwrap();
    assert!(fine_tune(model, &x, None).is_err());
}

#[test]
fn constant_series_forecast() {
    let x = constant_series(48, 1, 16, 0.0, 12);
    let xt = constant_series(16, 1, 16, 0.0, 13);
    let mut spec = TaskSpec::forecasting(4);
    spec.epochs = 60;
    spec.lr = 3e-3;
    spec.head_lr = 3e-3;
    let cfg = config(TemplateFamily::ContrastiveSeries, 8, 2);
    let model = TaskModel::from_scratch(&[cfg], 1, FusionKind::Concatenation, spec).unwrap();
    let model = fine_tune(model, &x, None).unwrap();
    let pred = forecast_predict(&model, &xt.slice_time(0, 12).unwrap()).unwrap();
    let mut err = 0.0;
    for (i, f) in pred.iter().enumerate() {
        assert_eq!(f.shape(), (1, 4));
        for s in 0..4 {
            err += (f[(0, s)] - xt.get(i, 0, 12 + s)).powi(2);
        }
    }
    let mse = err / (pred.len() * 4) as f64;
    assert!(mse < 0.05, "forecast mse {mse}");
}

#[test]
fn constant_series_imputation_and_pass_through() {
    let x = constant_series(48, 2, 16, 0.0, 14);
    let xt = constant_series(16, 2, 16, 0.0, 15);
    let mut spec = TaskSpec::imputation();
    spec.epochs = 200;
    spec.lr = 1e-2;
    spec.head_lr = 1e-2;
    let mut cfg = config(TemplateFamily::AutoregressiveMask, 8, 3);
    cfg.encoder.depth = 3;
    cfg.encoder.hidden_width = 16;
    let model = TaskModel::from_scratch(&[cfg], 2, FusionKind::Concatenation, spec).unwrap();
    let model = impute_fit(model, &x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let missing = MissingIndex::mcar(16, 2, 16, 0.2, &mut rng).unwrap();
    let out = impute_predict(&model, &xt, &missing).unwrap();
    assert_eq!(out.imputed.len(), missing.total());
    let mut err = 0.0;
    for m in &out.imputed {
        err += (m.value - xt.get(m.sample, m.channel, m.timestep)).powi(2);
    }
    let mse = err / out.imputed.len() as f64;
    assert!(mse < 0.05, "imputation mse {mse}");
    for i in 0..16 {
        for j in 0..2 {
            for k in 0..16 {
                if !missing.contains(i, j, k) {
                    assert_eq!(out.completed.get(i, j, k).to_bits(), xt.get(i, j, k).to_bits());
                }
            }
        }
    }
}

#[test]
fn impute_fit_requires_an_imputation_model() {
    let encoders = vec![instance(TemplateFamily::ContrastiveSeries, 4, 1, 1)];
    let model = TaskModel::with_fusion_kind(encoders, FusionKind::Concatenation, TaskSpec::classification(2)).unwrap();
    assert!(impute_fit(model, &random_data(4, 1, 8, 1)).is_err());
}

#[test]
fn anomaly_threshold_sweep_is_monotone() {
    let x = random_data(6, 1, 20, 17);
    let mut spec = TaskSpec::anomaly_detection();
    spec.epochs = 2;
    spec.threshold = ThresholdRule::Quantile { q: 0.9 };
    let encoders = vec![instance(TemplateFamily::AutoregressiveMask, 4, 1, 4)];
    let model = TaskModel::with_fusion_kind(encoders, FusionKind::Concatenation, spec).unwrap();
    let model = fine_tune(model, &x, None).unwrap();
    let result = anomaly_detect(&model, &x).unwrap();
    assert_eq!(result.scores.shape(), (6, 20));
    assert!(result.scores.as_slice().iter().all(|s| *s >= 0.0));
    let tau = model.threshold.unwrap();
    let above = result.scores.as_slice().iter().filter(|s| **s > tau).count();
    assert_eq!(result.flagged_count(), above);
    assert!(above as f64 <= 0.1 * 120.0 + 1.0);

    let mut last = usize::MAX;
    for i in 0..=20 {
        let tau = i as f64 * 0.1;
        let r = anomaly_decide(result.scores.clone(), ThresholdRule::Fixed { tau }, &[]).unwrap();
        assert!(r.flagged_count() <= last);
        last = r.flagged_count();
    }
    let none = anomaly_decide(result.scores.clone(), ThresholdRule::Fixed { tau: f64::MAX }, &[]).unwrap();
    assert_eq!(none.flagged_count(), 0);
}

#[test]
fn fine_tuning_is_deterministic() {
    let x = random_data(10, 1, 12, 18);
    let mut spec = TaskSpec::clustering(2);
    spec.epochs = 2;
    spec.seed = 3;
    let encoders = vec![instance(TemplateFamily::ContrastiveSeries, 4, 1, 5)];
    let model = TaskModel::with_fusion_kind(encoders, FusionKind::Concatenation, spec).unwrap();
    let a = fine_tune(model.clone(), &x, None).unwrap();
    let b = fine_tune(model, &x, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(cluster_predict(&a, &x).unwrap(), cluster_predict(&b, &x).unwrap());
    assert!(a.history.iter().all(|h| h.penalty.is_some_and(|p| p >= 0.0)));
}

#[test]
fn cluster_count_is_bounded_by_samples() {
    let x = random_data(3, 1, 12, 19);
    let encoders = vec![instance(TemplateFamily::ContrastiveSeries, 4, 1, 5)];
    let model = TaskModel::with_fusion_kind(encoders, FusionKind::Concatenation, TaskSpec::clustering(4)).unwrap();
    assert!(fine_tune(model, &x, None).is_err());
}

#[test]
fn two_blobs_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for i in 0..40 {
        let c = if i % 2 == 0 { -5.0 } else { 5.0 };
        rows.push(vec![c + gaussian(&mut rng, 0.5), c + gaussian(&mut rng, 0.5)]);
        truth.push(i % 2);
    }
    let z = Matrix::from_rows(&rows);
    let fit = kmeans(&z, 2, 5, 100, 0).unwrap();
    assert_eq!(adjusted_rand_index(&fit.assignments, &truth).unwrap(), 1.0);
    let (penalty, centroids, assignments) = kmeans_regularizer(&z, 2, 0).unwrap();
    let direct: f64 = (0..40)
        .map(|i| {
            let c = centroids.row(assignments[i]);
            z.row(i).iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        })
        .sum();
    assert!((penalty - direct).abs() < 1e-9);
    assert!(penalty < 40.0 * 2.0);
}

#[test]
fn task_kind_round_trips_through_names() {
    for k in TaskKind::ALL {
        assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
    }
}

#[test]
fn windowed_scores_cover_every_timestep() {
    let x = random_data(3, 1, 20, 21);
    let mut spec = TaskSpec::anomaly_detection();
    spec.epochs = 1;
    let encoders = vec![instance(TemplateFamily::AutoregressiveMask, 4, 1, 5)];
    let model = fine_tune(TaskModel::with_fusion_kind(encoders, FusionKind::Concatenation, spec).unwrap(), &x, None).unwrap();
    let whole = anomaly_scores(&model, &x).unwrap();
    assert_eq!(anomaly_scores_windowed(&model, &x, 20, 1).unwrap(), whole);

    // Windows of 8 every 5 steps start at 0, 5 and 10; a final window
    // aligned to the end scores timesteps 18 and 19.
    let w = anomaly_scores_windowed(&model, &x, 8, 5).unwrap();
    let tail = anomaly_scores(&model, &x.slice_time(12, 8).unwrap()).unwrap();
    let last = anomaly_scores(&model, &x.slice_time(10, 8).unwrap()).unwrap();
    for i in 0..3 {
        assert_eq!(w[(i, 19)], tail[(i, 7)]);
        assert!((w[(i, 17)] - (last[(i, 7)] + tail[(i, 5)]) / 2.0).abs() < 1e-12);
        assert!(w.row(i).iter().all(|s| s.is_finite() && *s >= 0.0));
    }
    assert!(anomaly_scores_windowed(&model, &x, 21, 1).is_err());
}
