//! Datasets, labels, missing-value indices and binary masks.
//!
//! A [`TimeSeriesDataset`] holds `N` samples of `D` channels by `T`
//! timesteps, stored sample-major, channel-major, time-minor (the same order
//! as the `uts_binary` payload). Models consume samples time-major (`T x D`),
//! see [`TimeSeriesDataset::sample_time_major`].

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    n: usize,
    d: usize,
    t: usize,
    values: Vec<f64>,
    sample_ids: Vec<String>,
    channel_names: Vec<String>,
    sampling_meta: Option<String>,
}

impl TimeSeriesDataset {
    pub fn new(n: usize, d: usize, t: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(shape_err(format!("dataset needs N >= 1 and D >= 1, got N={n}, D={d}")));
        }
        if t < 2 {
            return Err(shape_err(format!("dataset needs T >= 2, got T={t}")));
        }
        if values.len() != n * d * t {
            return Err(shape_err(format!(
                "expected {} values for {n}x{d}x{t}, got {}",
                n * d * t,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput {
                sample: pos / (d * t),
                channel: (pos / t) % d,
                timestep: pos % t,
            });
        }
        Ok(Self {
            n,
            d,
            t,
            values,
            sample_ids: (0..n).map(|i| i.to_string()).collect(),
            channel_names: (0..d).map(|j| format!("ch{j}")).collect(),
            sampling_meta: None,
        })
    }

    /// Builds a dataset from `D x T` sample matrices.
    pub fn from_samples(samples: &[Matrix]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| shape_err("no samples"))?;
        let (d, t) = first.shape();
        let mut values = Vec::with_capacity(samples.len() * d * t);
        for (i, s) in samples.iter().enumerate() {
            if s.shape() != (d, t) {
                return Err(shape_err(format!(
                    "sample {i} has shape {:?}, expected {:?}",
                    s.shape(),
                    (d, t)
                )));
            }
            values.extend_from_slice(s.as_slice());
        }
        Self::new(samples.len(), d, t, values)
    }

    pub fn with_sample_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n {
            return Err(shape_err("one sample id per sample"));
        }
        self.sample_ids = ids;
        Ok(self)
    }

    pub fn with_channel_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.d {
            return Err(shape_err("one name per channel"));
        }
        self.channel_names = names;
        Ok(self)
    }

    pub fn with_sampling_meta(mut self, meta: impl Into<String>) -> Self {
        self.sampling_meta = Some(meta.into());
        self
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn n_channels(&self) -> usize {
        self.d
    }

    pub fn len_time(&self) -> usize {
        self.t
    }

    /// `(N, D, T)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n, self.d, self.t)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn sampling_meta(&self) -> Option<&str> {
        self.sampling_meta.as_deref()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(i * self.d + j) * self.t + k]
    }

    /// Sample `i` as a `D x T` matrix.
    pub fn sample(&self, i: usize) -> Matrix {
        let len = self.d * self.t;
        Matrix::from_vec(self.d, self.t, self.values[i * len..(i + 1) * len].to_vec())
    }

    /// Sample `i` as a `T x D` matrix (rows are timesteps).
    pub fn sample_time_major(&self, i: usize) -> Matrix {
        let mut m = Matrix::zeros(self.t, self.d);
        for j in 0..self.d {
            for k in 0..self.t {
                m[(k, j)] = self.get(i, j, k);
            }
        }
        m
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(shape_err("empty subset"));
        }
        let len = self.d * self.t;
        let mut values = Vec::with_capacity(indices.len() * len);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n {
                return Err(param_err(format!("sample index {i} out of range (N={})", self.n)));
            }
            values.extend_from_slice(&self.values[i * len..(i + 1) * len]);
            ids.push(self.sample_ids[i].clone());
        }
        let mut out = Self::new(indices.len(), self.d, self.t, values)?;
        out.sample_ids = ids;
        out.channel_names = self.channel_names.clone();
        out.sampling_meta = self.sampling_meta.clone();
        Ok(out)
    }

    /// Appends the samples of `other` (same D and T).
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if (self.d, self.t) != (other.d, other.t) {
            return Err(shape_err(format!(
                "cannot concatenate D={},T={} with D={},T={}",
                self.d, self.t, other.d, other.t
            )));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        let mut out = Self::new(self.n + other.n, self.d, self.t, values)?;
        out.sample_ids = self.sample_ids.iter().chain(&other.sample_ids).cloned().collect();
        out.channel_names = self.channel_names.clone();
        Ok(out)
    }

    /// Copy with `f(sample, channel, timestep, value)` applied to every cell.
    pub fn map_values(&self, f: impl Fn(usize, usize, usize, f64) -> f64) -> Result<Self> {
        let mut out = self.clone();
        for i in 0..self.n {
            for j in 0..self.d {
                for k in 0..self.t {
                    let idx = (i * self.d + j) * self.t + k;
                    out.values[idx] = f(i, j, k, self.values[idx]);
                }
            }
        }
        if let Some(pos) = out.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput {
                sample: pos / (self.d * self.t),
                channel: (pos / self.t) % self.d,
                timestep: pos % self.t,
            });
        }
        Ok(out)
    }

    /// Same dataset restricted to timesteps `start..start + len`.
    pub fn slice_time(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.t {
            return Err(param_err(format!("time slice {start}+{len} exceeds T={}", self.t)));
        }
        let mut values = Vec::with_capacity(self.n * self.d * len);
        for i in 0..self.n {
            for j in 0..self.d {
                let base = (i * self.d + j) * self.t;
                values.extend_from_slice(&self.values[base + start..base + start + len]);
            }
        }
        let mut out = Self::new(self.n, self.d, len, values)?;
        out.sample_ids = self.sample_ids.clone();
        out.channel_names = self.channel_names.clone();
        out.sampling_meta = self.sampling_meta.clone();
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Class,
    ClusterCount,
    Horizon,
    AnomalyFlags,
    MissingTargets,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingTarget {
    pub sample: usize,
    pub channel: usize,
    pub timestep: usize,
    pub value: f64,
}

/// Task targets. Exactly the fields required by `kind` are populated;
/// use the constructors to keep that invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub kind: LabelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_flags: Option<Vec<Vec<bool>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_targets: Option<Vec<MissingTarget>>,
}

impl LabelSet {
    fn empty(kind: LabelKind) -> Self {
        Self {
            kind,
            class_labels: None,
            n_classes: None,
            horizon: None,
            anomaly_flags: None,
            missing_targets: None,
        }
    }

    pub fn classes(labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(param_err("number of classes must be positive"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(param_err(format!("class label {bad} outside [0, {n_classes})")));
        }
        Ok(Self {
            class_labels: Some(labels),
            n_classes: Some(n_classes),
            ..Self::empty(LabelKind::Class)
        })
    }

    pub fn cluster_count(c: usize) -> Result<Self> {
        if c == 0 {
            return Err(param_err("cluster count must be positive"));
        }
        Ok(Self {
            n_classes: Some(c),
            ..Self::empty(LabelKind::ClusterCount)
        })
    }

    pub fn horizon(h: usize) -> Result<Self> {
        if h == 0 {
            return Err(param_err("horizon must be positive"));
        }
        Ok(Self {
            horizon: Some(h),
            ..Self::empty(LabelKind::Horizon)
        })
    }

    pub fn anomaly_flags(flags: Vec<Vec<bool>>) -> Self {
        Self {
            anomaly_flags: Some(flags),
            ..Self::empty(LabelKind::AnomalyFlags)
        }
    }

    pub fn missing_targets(targets: Vec<MissingTarget>) -> Self {
        Self {
            missing_targets: Some(targets),
            ..Self::empty(LabelKind::MissingTargets)
        }
    }

    /// Checks the kind/field invariant, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        let has = (
            self.class_labels.is_some(),
            self.n_classes.is_some(),
            self.horizon.is_some(),
            self.anomaly_flags.is_some(),
            self.missing_targets.is_some(),
        );
        let expected = match self.kind {
            LabelKind::Class => (true, true, false, false, false),
            LabelKind::ClusterCount => (false, true, false, false, false),
            LabelKind::Horizon => (false, false, true, false, false),
            LabelKind::AnomalyFlags => (false, false, false, true, false),
            LabelKind::MissingTargets => (false, false, false, false, true),
        };
        if has != expected {
            return Err(param_err(format!("label set fields do not match kind {:?}", self.kind)));
        }
        if let (Some(labels), Some(c)) = (&self.class_labels, self.n_classes) {
            if let Some(bad) = labels.iter().find(|&&l| l >= c) {
                return Err(param_err(format!("class label {bad} outside [0, {c})")));
            }
        }
        Ok(())
    }

    pub fn class_labels(&self) -> Result<&[usize]> {
        self.class_labels
            .as_deref()
            .ok_or_else(|| param_err("label set carries no class labels"))
    }

    pub fn subset_classes(&self, indices: &[usize]) -> Result<Self> {
        let labels = self.class_labels()?;
        Self::classes(indices.iter().map(|&i| labels[i]).collect(), self.n_classes.unwrap_or(0))
    }
}

/// Per-sample sets of missing `(channel, timestep)` positions.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MissingIndex {
    positions: Vec<BTreeSet<(usize, usize)>>,
}

impl MissingIndex {
    pub fn new(n_samples: usize) -> Self {
        Self {
            positions: vec![BTreeSet::new(); n_samples],
        }
    }

    pub fn insert(&mut self, sample: usize, channel: usize, timestep: usize) {
        if sample >= self.positions.len() {
            self.positions.resize(sample + 1, BTreeSet::new());
        }
        self.positions[sample].insert((channel, timestep));
    }

    pub fn n_samples(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self, sample: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positions.get(sample).into_iter().flatten().copied()
    }

    pub fn contains(&self, sample: usize, channel: usize, timestep: usize) -> bool {
        self.positions
            .get(sample)
            .is_some_and(|s| s.contains(&(channel, timestep)))
    }

    pub fn total(&self) -> usize {
        self.positions.iter().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn validate(&self, d: usize, t: usize) -> Result<()> {
        for (i, set) in self.positions.iter().enumerate() {
            if let Some(&(j, k)) = set.iter().find(|&&(j, k)| j >= d || k >= t) {
                return Err(param_err(format!(
                    "missing position ({j}, {k}) of sample {i} outside D={d}, T={t}"
                )));
            }
        }
        Ok(())
    }

    /// Missing-completely-at-random index: each cell missing with
    /// probability `rate`.
    pub fn mcar(n: usize, d: usize, t: usize, rate: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(param_err(format!("missing rate {rate} outside [0, 1]")));
        }
        let mut idx = Self::new(n);
        for i in 0..n {
            for j in 0..d {
                for k in 0..t {
                    if rng.random::<f64>() < rate {
                        idx.insert(i, j, k);
                    }
                }
            }
        }
        Ok(idx)
    }
}

/// Keep/drop pattern for one `D x T` sample; `true` = observed/kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    channels: usize,
    timesteps: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn ones(channels: usize, timesteps: usize) -> Self {
        Self {
            channels,
            timesteps,
            bits: vec![true; channels * timesteps],
        }
    }

    pub fn zeros(channels: usize, timesteps: usize) -> Self {
        Self {
            channels,
            timesteps,
            bits: vec![false; channels * timesteps],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Self {
        let timesteps = rows.first().map_or(0, Vec::len);
        Self {
            channels: rows.len(),
            timesteps,
            bits: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.timesteps)
    }

    #[inline]
    pub fn get(&self, channel: usize, timestep: usize) -> bool {
        self.bits[channel * self.timesteps + timestep]
    }

    pub fn set(&mut self, channel: usize, timestep: usize, keep: bool) {
        self.bits[channel * self.timesteps + timestep] = keep;
    }

    pub fn count_masked(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    /// `T x D` 0/1 matrix matching the time-major sample layout.
    pub fn to_time_major(&self) -> Matrix {
        let mut m = Matrix::zeros(self.timesteps, self.channels);
        for j in 0..self.channels {
            for k in 0..self.timesteps {
                if self.get(j, k) {
                    m[(k, j)] = 1.0;
                }
            }
        }
        m
    }
}

/// `x ⊗ m` for a `D x T` sample.
pub fn apply_mask(x: &Matrix, m: &BinaryMask) -> Result<Matrix> {
    if x.shape() != m.shape() {
        return Err(shape_err(format!(
            "mask shape {:?} does not match sample shape {:?}",
            m.shape(),
            x.shape()
        )));
    }
    let mut out = x.clone();
    for j in 0..x.rows() {
        for k in 0..x.cols() {
            if !m.get(j, k) {
                out[(j, k)] = 0.0;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGeometry {
    Iid,
    #[default]
    ContiguousSpans,
}

impl FromStr for MaskGeometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Self::Iid),
            "contiguous_spans" => Ok(Self::ContiguousSpans),
            other => Err(param_err(format!("unknown mask geometry '{other}'"))),
        }
    }
}

/// Mean length of a masked span under [`MaskGeometry::ContiguousSpans`].
pub const MEAN_MASKED_SPAN: f64 = 5.0;

/// Random keep/drop mask with expected masked fraction `masking_rate`.
///
/// Contiguous spans come from a two-state Markov chain per channel whose
/// masked runs are geometric with mean [`MEAN_MASKED_SPAN`] and whose
/// stationary masked fraction equals the rate.
pub fn sample_binary_mask(
    (channels, timesteps): (usize, usize),
    masking_rate: f64,
    rng: &mut impl Rng,
    geometry: MaskGeometry,
) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&masking_rate) || masking_rate.is_nan() {
        return Err(param_err(format!("masking rate {masking_rate} outside [0, 1]")));
    }
    if masking_rate == 0.0 {
        return Ok(BinaryMask::ones(channels, timesteps));
    }
    if masking_rate == 1.0 {
        return Ok(BinaryMask::zeros(channels, timesteps));
    }
    let mut mask = BinaryMask::ones(channels, timesteps);
    match geometry {
        MaskGeometry::Iid => {
            for b in &mut mask.bits {
                *b = rng.random::<f64>() >= masking_rate;
            }
        }
        MaskGeometry::ContiguousSpans => {
            let p_end_masked = 1.0 / MEAN_MASKED_SPAN;
            let p_start_masked = p_end_masked * masking_rate / (1.0 - masking_rate);
            for j in 0..channels {
                let mut masked = rng.random::<f64>() < masking_rate;
                for k in 0..timesteps {
                    mask.set(j, k, !masked);
                    let flip = if masked { p_end_masked } else { p_start_masked };
                    if rng.random::<f64>() < flip {
                        masked = !masked;
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Sliding windows of length `window` every `stride` timesteps. Output
/// samples are ordered by source sample, then window start.
pub fn slice_windows(ds: &TimeSeriesDataset, window: usize, stride: usize) -> Result<TimeSeriesDataset> {
    if window == 0 || stride == 0 {
        return Err(param_err("window and stride must be positive"));
    }
    if window > ds.t {
        return Err(param_err(format!("window {window} exceeds series length {}", ds.t)));
    }
    let starts = window_starts(ds.t, window, stride);
    let mut values = Vec::with_capacity(ds.n * starts.len() * ds.d * window);
    let mut ids = Vec::new();
    for i in 0..ds.n {
        for &s in &starts {
            for j in 0..ds.d {
                let base = (i * ds.d + j) * ds.t + s;
                values.extend_from_slice(&ds.values[base..base + window]);
            }
            ids.push(format!("{}@{s}", ds.sample_ids[i]));
        }
    }
    let mut out = TimeSeriesDataset::new(ds.n * starts.len(), ds.d, window, values)?;
    out.sample_ids = ids;
    out.channel_names = ds.channel_names.clone();
    out.sampling_meta = ds.sampling_meta.clone();
    Ok(out)
}

/// Start offsets used by [`slice_windows`].
pub fn window_starts(t: usize, window: usize, stride: usize) -> Vec<usize> {
    if window > t {
        return Vec::new();
    }
    (0..=(t - window) / stride).map(|w| w * stride).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    #[default]
    ZscorePerChannel,
    MinmaxPerChannel,
    None,
}

impl FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore_per_channel" | "zscore" => Ok(Self::ZscorePerChannel),
            "minmax_per_channel" | "minmax" => Ok(Self::MinmaxPerChannel),
            "none" => Ok(Self::None),
            other => Err(param_err(format!("unknown normalization mode '{other}'"))),
        }
    }
}

/// Per-channel affine statistics: `normalized = (x - shift) / scale`.
/// A zero scale marks a degenerate channel that normalizes to zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mode: NormalizationMode,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

const DEGENERATE_VARIANCE: f64 = 1e-12;

impl NormalizationStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mode: NormalizationMode::None,
            shift: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }

    pub fn fit(ds: &TimeSeriesDataset, mode: NormalizationMode) -> Self {
        let (n, d, t) = ds.shape();
        let count = (n * t) as f64;
        let mut shift = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let cells = (0..n).flat_map(|i| (0..t).map(move |k| (i, k)));
            match mode {
                NormalizationMode::None => {}
                NormalizationMode::ZscorePerChannel => {
                    let mean = cells.clone().map(|(i, k)| ds.get(i, j, k)).sum::<f64>() / count;
                    let var = cells.map(|(i, k)| (ds.get(i, j, k) - mean).powi(2)).sum::<f64>() / count;
                    shift[j] = mean;
                    scale[j] = if var < DEGENERATE_VARIANCE { 0.0 } else { var.sqrt() };
                }
                NormalizationMode::MinmaxPerChannel => {
                    let (lo, hi) = cells
                        .map(|(i, k)| ds.get(i, j, k))
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                    shift[j] = lo;
                    scale[j] = if hi - lo < DEGENERATE_VARIANCE.sqrt() { 0.0 } else { hi - lo };
                }
            }
        }
        Self { mode, shift, scale }
    }

    #[inline]
    pub fn forward_value(&self, channel: usize, v: f64) -> f64 {
        let s = self.scale[channel];
        if s == 0.0 {
            0.0
        } else {
            (v - self.shift[channel]) / s
        }
    }

    #[inline]
    pub fn inverse_value(&self, channel: usize, v: f64) -> f64 {
        v * self.scale[channel] + self.shift[channel]
    }

    pub fn apply(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        self.check_channels(ds)?;
        if self.mode == NormalizationMode::None {
            return Ok(ds.clone());
        }
        ds.map_values(|_, j, _, v| self.forward_value(j, v))
    }

    pub fn invert(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        self.check_channels(ds)?;
        if self.mode == NormalizationMode::None {
            return Ok(ds.clone());
        }
        ds.map_values(|_, j, _, v| self.inverse_value(j, v))
    }

    fn check_channels(&self, ds: &TimeSeriesDataset) -> Result<()> {
        if self.shift.len() != ds.n_channels() {
            return Err(shape_err(format!(
                "normalization stats cover {} channels, dataset has {}",
                self.shift.len(),
                ds.n_channels()
            )));
        }
        Ok(())
    }
}

pub fn normalize(ds: &TimeSeriesDataset, mode: NormalizationMode) -> Result<(TimeSeriesDataset, NormalizationStats)> {
    let stats = NormalizationStats::fit(ds, mode);
    Ok((stats.apply(ds)?, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    CsvWide,
    UtsBinary,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv_wide" | "csv" => Ok(Self::CsvWide),
            "uts_binary" | "uts" => Ok(Self::UtsBinary),
            other => Err(param_err(format!("unknown data format '{other}'"))),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CsvWide => "csv_wide",
            Self::UtsBinary => "uts_binary",
        })
    }
}

impl DataFormat {
    /// Guess from the file extension (`.csv` is CSV, anything else binary).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Self::CsvWide,
            _ => Self::UtsBinary,
        }
    }
}

/// Contents of a dataset file.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: TimeSeriesDataset,
    /// Cells that were empty in the file; their `values` entries are 0.
    pub missing: MissingIndex,
    pub labels: Option<LabelSet>,
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<LoadedData> {
    let bytes = std::fs::read(path)?;
    match format {
        DataFormat::UtsBinary => {
            let (dataset, labels) = decode_uts_binary(&bytes)?;
            let missing = MissingIndex::new(dataset.n_samples());
            Ok(LoadedData {
                dataset,
                missing,
                labels,
            })
        }
        DataFormat::CsvWide => {
            let text = String::from_utf8(bytes).map_err(|e| Error::Format {
                location: format!("byte {}", e.utf8_error().valid_up_to()),
                message: "file is not valid UTF-8".into(),
            })?;
            let (dataset, missing) = parse_csv_wide(&text)?;
            Ok(LoadedData {
                dataset,
                missing,
                labels: None,
            })
        }
    }
}

const UTS_MAGIC: &[u8; 4] = b"UTS1";
const LABEL_MAGIC: &[u8; 4] = b"LBL1";

pub fn encode_uts_binary(ds: &TimeSeriesDataset, labels: Option<(&[usize], usize)>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.values.len() * 4);
    out.extend_from_slice(UTS_MAGIC);
    for v in [ds.n, ds.d, ds.t] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in &ds.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some((labels, c)) = labels {
        out.extend_from_slice(LABEL_MAGIC);
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for &l in labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    out
}

pub fn write_uts_binary(path: &Path, ds: &TimeSeriesDataset, labels: Option<(&[usize], usize)>) -> Result<()> {
    std::fs::write(path, encode_uts_binary(ds, labels))?;
    Ok(())
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            location: format!("byte {offset}"),
            message: "unexpected end of file".into(),
        })
}

pub fn decode_uts_binary(bytes: &[u8]) -> Result<(TimeSeriesDataset, Option<LabelSet>)> {
    if bytes.get(0..4) != Some(UTS_MAGIC.as_slice()) {
        return Err(Error::Format {
            location: "byte 0".into(),
            message: "missing UTS1 magic".into(),
        });
    }
    let n = read_u32(bytes, 4)? as usize;
    let d = read_u32(bytes, 8)? as usize;
    let t = read_u32(bytes, 12)? as usize;
    let count = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(t))
        .ok_or_else(|| shape_err("header dimensions overflow"))?;
    let payload_end = 16 + count * 4;
    let rest = bytes.len().saturating_sub(16);
    let has_label_block = bytes.len() >= payload_end + 4 && &bytes[payload_end..payload_end + 4] == LABEL_MAGIC;
    if bytes.len() < payload_end || (bytes.len() != payload_end && !has_label_block) {
        return Err(shape_err(format!(
            "payload holds {rest} bytes, header N={n}, D={d}, T={t} requires {}",
            count * 4
        )));
    }
    let mut values = Vec::with_capacity(count);
    for idx in 0..count {
        let off = 16 + idx * 4;
        let v = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        if !v.is_finite() {
            return Err(Error::NonFiniteInput {
                sample: idx / (d * t),
                channel: (idx / t) % d,
                timestep: idx % t,
            });
        }
        values.push(v as f64);
    }
    let ds = TimeSeriesDataset::new(n, d, t, values)?;
    let labels = if has_label_block {
        let c = read_u32(bytes, payload_end + 4)? as usize;
        let start = payload_end + 8;
        if bytes.len() != start + n * 4 {
            return Err(Error::Format {
                location: format!("byte {start}"),
                message: format!("label block must hold exactly {n} u32 labels"),
            });
        }
        let labels = (0..n)
            .map(|i| read_u32(bytes, start + i * 4).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        Some(LabelSet::classes(labels, c)?)
    } else {
        None
    };
    Ok((ds, labels))
}

pub const CSV_HEADER_PREFIX: &str = "#units-csv,v1,D=";

pub fn parse_csv_wide(text: &str) -> Result<(TimeSeriesDataset, MissingIndex)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Format {
        location: "line 1".into(),
        message: "empty file".into(),
    })?;
    let d: usize = header
        .trim()
        .strip_prefix(CSV_HEADER_PREFIX)
        .and_then(|v| v.parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Format {
            location: "line 1".into(),
            message: format!("expected header '{CSV_HEADER_PREFIX}<d>', found '{header}'"),
        })?;

    let rows: Vec<(usize, &str)> = lines.collect();
    if rows.is_empty() || !rows.len().is_multiple_of(d) {
        return Err(shape_err(format!(
            "{} data rows cannot be split into samples of D={d} rows",
            rows.len()
        )));
    }
    let n = rows.len() / d;
    let mut t = None;
    let mut values = Vec::new();
    let mut missing = MissingIndex::new(n);
    for (r, (line_no, line)) in rows.iter().enumerate() {
        let (i, j) = (r / d, r % d);
        let cells: Vec<&str> = line.split(',').collect();
        match t {
            None => t = Some(cells.len()),
            Some(t) if t != cells.len() => {
                return Err(shape_err(format!(
                    "line {} has {} values, expected {t}",
                    line_no + 1,
                    cells.len()
                )))
            }
            _ => {}
        }
        for (k, cell) in cells.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                missing.insert(i, j, k);
                values.push(0.0);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Format {
                location: format!("line {}", line_no + 1),
                message: format!("cannot parse '{cell}' as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteInput {
                    sample: i,
                    channel: j,
                    timestep: k,
                });
            }
            values.push(v);
        }
    }
    let ds = TimeSeriesDataset::new(n, d, t.unwrap_or(0), values)?;
    Ok((ds, missing))
}

pub fn write_csv_wide(ds: &TimeSeriesDataset, missing: Option<&MissingIndex>) -> String {
    let (n, d, t) = ds.shape();
    let mut out = format!("{CSV_HEADER_PREFIX}{d}\n");
    for i in 0..n {
        for j in 0..d {
            let cells: Vec<String> = (0..t)
                .map(|k| {
                    if missing.is_some_and(|m| m.contains(i, j, k)) {
                        String::new()
                    } else {
                        format!("{}", ds.get(i, j, k))
                    }
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
    }
    out
}

/// Gaussian noise helper shared by augmentation and the synthetic generators.
/// One draw from `N(0, std^2)`; exactly 0 when `std` is 0.
pub fn gaussian(rng: &mut impl Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("finite std").sample(rng)
}
