//! Seeded synthetic datasets with known structure.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{gaussian, TimeSeriesDataset};
use crate::error::{param_err, Result};

/// A univariate or multivariate dataset with ground-truth sample labels.
#[derive(Debug, Clone)]
pub struct Labeled {
    pub dataset: TimeSeriesDataset,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

fn build(n: usize, d: usize, t: usize, seed: u64, mut gen: impl FnMut(usize, &mut ChaCha8Rng) -> (usize, Vec<f64>)) -> Result<Labeled> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * d * t);
    let mut labels = Vec::with_capacity(n);
    let mut n_classes = 0;
    for i in 0..n {
        let (label, v) = gen(i, &mut rng);
        debug_assert_eq!(v.len(), d * t);
        values.extend(v);
        labels.push(label);
        n_classes = n_classes.max(label + 1);
    }
    Ok(Labeled {
        dataset: TimeSeriesDataset::new(n, d, t, values)?,
        labels,
        n_classes,
    })
}

/// Two regimes: every series is a slow sinusoid (2 cycles per window,
/// random phase) with noise of std 0.3; in regime 1 (odd samples) a fast
/// oscillation (period 4) replaces the signal over a quarter of the window
/// at a random position.
pub fn two_regime(n: usize, t: usize, seed: u64) -> Result<Labeled> {
    build(n, 1, t, seed, |i, rng| {
        let label = i % 2;
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.8..1.2);
        let burst = (t / 4).max(1);
        let start = rng.random_range(0..=t - burst);
        let v = (0..t)
            .map(|k| {
                let fast = label == 1 && (start..start + burst).contains(&k);
                let s = if fast {
                    (2.0 * PI * k as f64 / 4.0).sin()
                } else {
                    (2.0 * PI * 2.0 * k as f64 / t as f64 + phase).sin()
                };
                amp * s + gaussian(rng, 0.3)
            })
            .collect();
        (label, v)
    })
}

/// Classes distinguished by frequency and time warping: class `c` is a
/// sinusoid whose instantaneous frequency ramps from `f_c` to `f_c·w_c`.
/// Random phase, amplitude and noise (std 0.4) make single samples
/// ambiguous.
pub fn frequency_classes(n: usize, t: usize, n_classes: usize, seed: u64) -> Result<Labeled> {
    if n_classes == 0 {
        return Err(param_err("need at least one class"));
    }
    build(n, 1, t, seed, |i, rng| {
        let label = i % n_classes;
        let base = 2.0 + 1.5 * label as f64;
        let warp = if label.is_multiple_of(2) { 1.0 } else { 1.6 };
        let base = base * rng.random_range(0.9..1.1);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.7..1.3);
        let v = (0..t)
            .map(|k| {
                let u = k as f64 / t as f64;
                let cycles = base * (u + (warp - 1.0) * u * u / 2.0);
                amp * (2.0 * PI * cycles + phase).sin() + gaussian(rng, 0.4)
            })
            .collect();
        (label, v)
    })
}

/// Sinusoid-mixture classes: class `c` sums two sinusoids with
/// class-specific frequencies. Samples are scaled by `amplitude` and get
/// additive noise of std `noise`; the domain-shift target uses a larger
/// amplitude and noise than the source.
pub fn sinusoid_mixture(n: usize, t: usize, n_classes: usize, amplitude: f64, noise: f64, seed: u64) -> Result<Labeled> {
    if n_classes == 0 {
        return Err(param_err("need at least one class"));
    }
    build(n, 1, t, seed, |i, rng| {
        let label = i % n_classes;
        let f1 = 1.0 + label as f64;
        let f2 = 6.0 - 1.5 * label as f64;
        let p1 = rng.random_range(0.0..2.0 * PI);
        let p2 = rng.random_range(0.0..2.0 * PI);
        let v = (0..t)
            .map(|k| {
                let u = 2.0 * PI * k as f64 / t as f64;
                amplitude * ((f1 * u + p1).sin() + 0.6 * (f2 * u + p2).sin()) + gaussian(rng, noise)
            })
            .collect();
        (label, v)
    })
}

/// Three shape clusters (sine, square, sawtooth) with random circular
/// shift, so raw-space distances mix clusters.
pub fn shape_clusters(n: usize, t: usize, seed: u64) -> Result<Labeled> {
    build(n, 1, t, seed, |i, rng| {
        let label = i % 3;
        let cycles = 3.0;
        let shift = rng.random_range(0.0..1.0);
        let amp = rng.random_range(0.8..1.2);
        let v = (0..t)
            .map(|k| {
                let u = (cycles * k as f64 / t as f64 + shift).fract();
                let s = match label {
                    0 => (2.0 * PI * u).sin(),
                    1 => {
                        if u < 0.5 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    _ => 2.0 * u - 1.0,
                };
                amp * s + gaussian(rng, 0.2)
            })
            .collect();
        (label, v)
    })
}

/// Multichannel smooth sinusoids (random frequency, phase, amplitude per
/// channel) with light noise, for imputation.
pub fn sinusoids(n: usize, d: usize, t: usize, seed: u64) -> Result<TimeSeriesDataset> {
    let out = build(n, d, t, seed, |_, rng| {
        let mut v = Vec::with_capacity(d * t);
        for _ in 0..d {
            let cycles = rng.random_range(1.0..4.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.5..1.5);
            let offset = rng.random_range(-1.0..1.0);
            v.extend((0..t).map(|k| {
                offset + amp * (2.0 * PI * cycles * k as f64 / t as f64 + phase).sin() + gaussian(rng, 0.05)
            }));
        }
        (0, v)
    })?;
    Ok(out.dataset)
}

/// Sinusoid windows with injected point spikes.
#[derive(Debug, Clone)]
pub struct SpikedSeries {
    pub dataset: TimeSeriesDataset,
    /// `N x T` ground-truth anomaly flags.
    pub flags: Vec<Vec<bool>>,
}

/// `n` univariate windows of a unit sinusoid (period `period`, random
/// phase, noise std 0.05). Each timestep is independently a spike with
/// probability `spike_rate`; a spike adds `±magnitude_sigmas` times the
/// clean signal's standard deviation.
pub fn spiked_sinusoid(n: usize, t: usize, period: f64, spike_rate: f64, magnitude_sigmas: f64, seed: u64) -> Result<SpikedSeries> {
    if !(0.0..=1.0).contains(&spike_rate) {
        return Err(param_err(format!("spike rate {spike_rate} outside [0, 1]")));
    }
    let sigma = std::f64::consts::FRAC_1_SQRT_2;
    let mut flags = Vec::with_capacity(n);
    let out = build(n, 1, t, seed, |_, rng| {
        let phase = rng.random_range(0.0..2.0 * PI);
        let mut row = Vec::with_capacity(t);
        let v = (0..t)
            .map(|k| {
                let base = (2.0 * PI * k as f64 / period + phase).sin() + gaussian(rng, 0.05);
                let spike = rng.random::<f64>() < spike_rate;
                row.push(spike);
                if spike {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    base + sign * magnitude_sigmas * sigma
                } else {
                    base
                }
            })
            .collect();
        flags.push(row);
        (0, v)
    })?;
    Ok(SpikedSeries {
        dataset: out.dataset,
        flags,
    })
}
