use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use units_core::data::TimeSeriesDataset;
use units_core::model::{Encoder, EncoderConfig};
use units_core::synthetic::two_regime;
use units_core::tensor::Matrix;
use units_core::Error;
use units_pretrain::*;

fn small(family: TemplateFamily) -> PretrainTemplateConfig {
    let mut cfg = PretrainTemplateConfig::new(family);
    cfg.encoder = EncoderConfig {
        hidden_width: 16,
        repr_dim: 8,
        ..Default::default()
    };
    cfg.epochs = 2;
    cfg
}

#[test]
fn zero_epochs_gives_fitted_random_encoder() {
    let data = two_regime(10, 16, 0).unwrap().dataset;
    let mut cfg = small(TemplateFamily::ContrastiveSeries);
    cfg.epochs = 0;
    let inst = fit(&cfg, &data).unwrap();
    assert!(inst.fitted);
    assert!(inst.loss_curve.is_empty());
    let fresh = Encoder::new(inst.config.encoder.clone()).unwrap();
    assert_eq!(&inst.encoder, &fresh);
}

#[test]
fn every_family_fits_deterministically() {
    let data = two_regime(12, 16, 1).unwrap().dataset;
    for family in TemplateFamily::ALL {
        let cfg = small(family);
        let a = fit(&cfg, &data).unwrap();
        let b = fit(&cfg, &data).unwrap();
        assert_eq!(a.loss_curve.len(), 2, "{family}");
        for (x, y) in a.loss_curve.iter().zip(&b.loss_curve) {
            assert!((x - y).abs() <= 1e-6, "{family}");
        }
        assert!(a.loss_curve.iter().all(|l| l.is_finite()));
        assert_eq!(a.reconstruction_head.is_some(), family.has_reconstruction_head());
    }
}

#[test]
fn observer_sees_every_step_in_order() {
    let data = two_regime(20, 16, 2).unwrap().dataset;
    let mut cfg = small(TemplateFamily::AutoregressiveMask);
    cfg.batch_size = 8;
    let mut steps = Vec::new();
    let inst = fit_with_observer(&cfg, &data, |r| steps.push(*r)).unwrap();
    assert_eq!(steps.len(), 2 * 3);
    assert!(steps.windows(2).all(|w| w[0].step < w[1].step));
    let epoch1: f64 = steps.iter().filter(|s| s.epoch == 1).map(|s| s.loss).sum::<f64>() / 3.0;
    assert!((epoch1 - inst.loss_curve[0]).abs() < 1e-12);
}

#[test]
fn configuration_errors() {
    let mut cfg = PretrainTemplateConfig::new(TemplateFamily::ContrastiveSeries);
    cfg.temperature = 0.0;
    assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));

    let mut cfg = PretrainTemplateConfig::new(TemplateFamily::Hybrid);
    assert_eq!(cfg.hybrid_weight, Some(DEFAULT_HYBRID_WEIGHT));
    cfg.hybrid_weight = None;
    assert!(cfg.validate().is_err());
    cfg.hybrid_weight = Some(1.5);
    assert!(cfg.validate().is_err());

    let mut cfg = PretrainTemplateConfig::new(TemplateFamily::AutoregressiveMask);
    cfg.hybrid_weight = Some(0.5);
    assert!(cfg.validate().is_err());

    let short = two_regime(4, 6, 0).unwrap().dataset;
    assert!(fit(&small(TemplateFamily::ContrastiveSubsequence), &short).is_err());
    let single = two_regime(1, 16, 0).unwrap().dataset;
    assert!(fit(&small(TemplateFamily::ContrastiveSeries), &single).is_err());
    assert!(fit(&small(TemplateFamily::ContrastiveSubsequence), &single).is_err());
    assert!("frequency_domain".parse::<TemplateFamily>().is_err());
    assert_eq!("hybrid".parse::<TemplateFamily>().unwrap(), TemplateFamily::Hybrid);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let data = TimeSeriesDataset::new(4, 1, 8, vec![1e200; 32]).unwrap();
    let mut cfg = small(TemplateFamily::AutoregressiveMask);
    cfg.epochs = 1;
    let err = fit(&cfg, &data).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::NonFinite(_)), "{msg}");
    assert!(msg.contains("epoch 1"), "{msg}");
}

#[test]
fn transform_contract() {
    let data = two_regime(6, 16, 3).unwrap().dataset;
    let mut cfg = small(TemplateFamily::ContrastiveTimestamp);
    cfg.epochs = 0;
    let mut inst = PretrainedInstance::initialize(&cfg, 1).unwrap();
    assert!(matches!(transform(&inst, &data), Err(Error::State(_))));
    inst.fitted = true;

    let z = transform(&inst, &data).unwrap();
    assert_eq!(z.shape(), (6, 8));
    assert_eq!(z, transform(&inst, &data).unwrap());

    let one = data.subset(&[4]).unwrap();
    let z1 = transform(&inst, &one).unwrap();
    assert_eq!(z1.row(0), inst.encoder.encode(&data.sample(4)).unwrap().as_slice());

    let dup = data.subset(&[2, 2, 5, 2]).unwrap();
    let zd = transform(&inst, &dup).unwrap();
    assert_eq!(zd.row(0), zd.row(1));
    assert_eq!(zd.row(0), zd.row(3));
    assert_eq!(zd.row(0), z.row(2));

    let two_channel = TimeSeriesDataset::new(1, 2, 16, vec![0.0; 32]).unwrap();
    assert!(matches!(transform(&inst, &two_channel), Err(Error::Shape(_))));
}

#[test]
fn representation_set_alignment() {
    assert!(RepresentationSet::new(vec![]).is_err());
    assert!(RepresentationSet::new(vec![Matrix::zeros(3, 2), Matrix::zeros(4, 2)]).is_err());
    let set = RepresentationSet::new(vec![Matrix::zeros(3, 2), Matrix::zeros(3, 5)]).unwrap();
    assert_eq!(set.dims(), vec![2, 5]);
    assert_eq!(set.n_samples(), 3);
}

#[test]
fn triplet_batch_of_one_rejected_and_value_finite() {
    let enc = Encoder::new(EncoderConfig {
        hidden_width: 8,
        repr_dim: 4,
        ..Default::default()
    })
    .unwrap();
    let data = two_regime(3, 16, 0).unwrap().dataset;
    let batch: Vec<Matrix> = (0..3).map(|i| data.sample(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(triplet_subseries_loss(&enc, &batch[..1], 2, &mut rng).is_err());
    assert!(triplet_subseries_loss(&enc, &batch[..1], 0, &mut rng).unwrap().is_finite());
    assert!(triplet_subseries_loss(&enc, &batch, 2, &mut rng).unwrap().is_finite());
}

fn one_nn_accuracy(train: &Matrix, train_y: &[usize], test: &Matrix, test_y: &[usize]) -> f64 {
    let mut correct = 0;
    for i in 0..test.rows() {
        let mut best = (f64::INFINITY, 0);
        for j in 0..train.rows() {
            let d: f64 = test.row(i).iter().zip(train.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.0 {
                best = (d, train_y[j]);
            }
        }
        correct += usize::from(best.1 == test_y[i]);
    }
    correct as f64 / test.rows() as f64
}

fn flattened(ds: &TimeSeriesDataset) -> Matrix {
    let (n, d, t) = ds.shape();
    Matrix::from_vec(n, d * t, ds.values().to_vec())
}

#[test]
fn loss_decreases_and_representations_beat_raw_nearest_neighbour() {
    let mut learned = 0.0;
    let mut raw = 0.0;
    for seed in 0..3u64 {
        let all = two_regime(200, 32, 100 + seed).unwrap();
        // 20 labeled references; the encoder itself sees all 200 unlabeled.
        let train_idx: Vec<usize> = (0..20).collect();
        let test_idx: Vec<usize> = (100..200).collect();
        let mut cfg = PretrainTemplateConfig::new(TemplateFamily::ContrastiveSeries);
        cfg.seed = seed;
        cfg.encoder.seed = seed;

        let long = PretrainTemplateConfig { epochs: 50, ..cfg.clone() };
        let curve = fit(&long, &all.dataset).unwrap().loss_curve;
        assert!(curve[49] < curve[0], "seed {seed}: {curve:?}");

        let inst = fit(&cfg, &all.dataset).unwrap();
        let train = all.dataset.subset(&train_idx).unwrap();
        let test = all.dataset.subset(&test_idx).unwrap();
        let (ytr, yte) = (&all.labels[..20], &all.labels[100..]);
        learned += one_nn_accuracy(&transform(&inst, &train).unwrap(), ytr, &transform(&inst, &test).unwrap(), yte);
        raw += one_nn_accuracy(&flattened(&train), ytr, &flattened(&test), yte);
    }
    assert!(learned > raw, "learned {learned} vs raw {raw} (sums over 3 seeds)");
}

fn rotation(k: usize, seed: u64) -> Matrix {
    // Product of random Givens rotations.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Matrix::identity(k);
    for _ in 0..3 * k {
        let (a, b) = (rand::Rng::random_range(&mut rng, 0..k), rand::Rng::random_range(&mut rng, 0..k));
        if a == b {
            continue;
        }
        let th: f64 = rand::Rng::random_range(&mut rng, 0.0..std::f64::consts::TAU);
        let (c, s) = (th.cos(), th.sin());
        for r in 0..k {
            let (x, y) = (q[(r, a)], q[(r, b)]);
            q[(r, a)] = c * x - s * y;
            q[(r, b)] = s * x + c * y;
        }
    }
    q
}

fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_rows(&perm.iter().map(|&p| m.row(p).to_vec()).collect::<Vec<_>>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn contrastive_losses_are_permutation_and_rotation_invariant(
        vals in proptest::collection::vec(-2.0f64..2.0, 2 * 4 * 3),
        perm_seed in 0u64..1000,
        temp in 0.1f64..2.0,
    ) {
        let a = Matrix::from_vec(4, 3, vals[..12].to_vec());
        let b = Matrix::from_vec(4, 3, vals[12..].to_vec());
        let base = nt_xent_loss(&a, &b, temp).unwrap();

        let mut perm: Vec<usize> = (0..4).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let permuted = nt_xent_loss(&permute_rows(&a, &perm), &permute_rows(&b, &perm), temp).unwrap();
        prop_assert!((base - permuted).abs() < 1e-9);

        let q = rotation(3, perm_seed);
        let ra = units_core::tensor::matmul(&a, &q);
        let rb = units_core::tensor::matmul(&b, &q);
        prop_assert!((base - nt_xent_loss(&ra, &rb, temp).unwrap()).abs() < 1e-6);
        let ts = timestamp_contrastive_loss(&a, &b, temp).unwrap();
        prop_assert!((ts - timestamp_contrastive_loss(&ra, &rb, temp).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn hybrid_is_convex_combination(c in 0.0f64..10.0, r in 0.0f64..10.0, l in 0.0f64..=1.0) {
        let h = hybrid_loss(c, r, l).unwrap();
        prop_assert!(h >= c.min(r) - 1e-12 && h <= c.max(r) + 1e-12);
    }
}

#[test]
fn triplet_loss_decreases_with_positive_alignment() {
    use units_core::autodiff::Tape;
    let value = |pos_scale: f64| {
        let mut tape = Tape::new();
        let r = tape.constant(Matrix::from_rows(&[vec![1.0, 0.5]]));
        let p = tape.constant(Matrix::from_rows(&[vec![pos_scale, pos_scale * 0.5]]));
        let n = tape.constant(Matrix::from_rows(&[vec![0.3, -0.2], vec![-1.0, 0.4]]));
        let l = triplet_embedding_loss(&mut tape, r, p, Some(n), &[vec![0, 1]]).unwrap();
        tape.value(l).item()
    };
    assert!(value(2.0) < value(1.0) && value(1.0) < value(0.0));
    let mut tape = Tape::new();
    let r = tape.constant(Matrix::from_rows(&[vec![1.0, 0.0]]));
    let p = tape.constant(Matrix::from_rows(&[vec![1e4, 0.0]]));
    let l = triplet_embedding_loss(&mut tape, r, p, None, &[vec![]]).unwrap();
    assert!(tape.value(l).item() < 1e-12);
}
