//! Self-supervised pre-training templates.
//!
//! A template is configured by a [`PretrainTemplateConfig`], trained with
//! [`fit`] on unlabeled data and applied with [`transform`]. Five objective
//! families are available:
//!
//! | family | objective |
//! |---|---|
//! | `contrastive_series` | NT-Xent between two augmented views of each series |
//! | `contrastive_subsequence` | triplet loss: a window vs. one of its sub-windows vs. windows of other series |
//! | `contrastive_timestamp` | per-timestep contrast on the overlap of two random crops (jitter/scale views only) |
//! | `autoregressive_mask` | masked cells zeroed, predicted from causal context |
//! | `hybrid` | `λ·contrastive_series + (1-λ)·autoregressive_mask` |
//!
//! Defaults: epochs 10, batch 16, adam lr 1e-3, temperature 0.2, 10
//! negatives, masking rate 0.15 with contiguous spans, λ 0.5, views built
//! with `crop_resize(0.7)`, `scale(0.2)`, `jitter(0.2)`.

pub mod augment;
pub mod losses;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use units_core::autodiff::{Tape, Var};
use units_core::data::{apply_mask, sample_binary_mask, MaskGeometry, TimeSeriesDataset};
use units_core::error::{param_err, shape_err, Error, Result};
use units_core::model::{stack, Encoder, EncoderConfig, Linear, LinearVars, NamedTensor};
use units_core::optim::{gradient_step, OptimizerState};
use units_core::tensor::Matrix;

pub use augment::{augment, Augmentation};
pub use losses::{
    hybrid_loss, masked_reconstruction_loss, nt_xent, nt_xent_loss, timestamp_contrastive, timestamp_contrastive_loss,
    triplet_embedding_loss,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateFamily {
    ContrastiveSeries,
    ContrastiveSubsequence,
    ContrastiveTimestamp,
    AutoregressiveMask,
    Hybrid,
}

impl TemplateFamily {
    pub const ALL: [Self; 5] = [
        Self::ContrastiveSeries,
        Self::ContrastiveSubsequence,
        Self::ContrastiveTimestamp,
        Self::AutoregressiveMask,
        Self::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::ContrastiveSeries => "contrastive_series",
            Self::ContrastiveSubsequence => "contrastive_subsequence",
            Self::ContrastiveTimestamp => "contrastive_timestamp",
            Self::AutoregressiveMask => "autoregressive_mask",
            Self::Hybrid => "hybrid",
        }
    }

    /// Whether the objective trains a per-timestep reconstruction head.
    pub fn has_reconstruction_head(self) -> bool {
        matches!(self, Self::AutoregressiveMask | Self::Hybrid)
    }

    /// Whether the objective contrasts samples within a batch (needs >= 2).
    pub fn pairs_samples(self) -> bool {
        matches!(self, Self::ContrastiveSeries | Self::Hybrid)
    }
}

impl fmt::Display for TemplateFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| param_err(format!("unknown template family '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainTemplateConfig {
    pub family: TemplateFamily,
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub n_negatives: usize,
    pub masking_rate: f64,
    pub mask_geometry: MaskGeometry,
    /// Weight of the contrastive term; set exactly when `family` is hybrid.
    pub hybrid_weight: Option<f64>,
    pub augmentations: Vec<Augmentation>,
    pub seed: u64,
}

impl Default for PretrainTemplateConfig {
    fn default() -> Self {
        Self::new(TemplateFamily::ContrastiveSeries)
    }
}

pub const DEFAULT_HYBRID_WEIGHT: f64 = 0.5;

impl PretrainTemplateConfig {
    pub fn new(family: TemplateFamily) -> Self {
        Self {
            family,
            encoder: EncoderConfig::default(),
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            temperature: 0.2,
            n_negatives: 10,
            masking_rate: 0.15,
            mask_geometry: MaskGeometry::ContiguousSpans,
            hybrid_weight: (family == TemplateFamily::Hybrid).then_some(DEFAULT_HYBRID_WEIGHT),
            augmentations: vec![
                Augmentation::CropResize { ratio: 0.7 },
                Augmentation::Scale { sigma: 0.2 },
                Augmentation::Jitter { sigma: 0.2 },
            ],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(param_err(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(param_err(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(param_err("batch_size must be >= 1"));
        }
        if self.family.pairs_samples() && self.batch_size < 2 {
            return Err(param_err(format!("{} needs batch_size >= 2", self.family)));
        }
        if !(0.0..=1.0).contains(&self.masking_rate) {
            return Err(param_err(format!("masking rate {} outside [0, 1]", self.masking_rate)));
        }
        match (self.family, self.hybrid_weight) {
            (TemplateFamily::Hybrid, None) => return Err(param_err("hybrid family requires hybrid_weight")),
            (TemplateFamily::Hybrid, Some(l)) => losses::check_hybrid_weight(l)?,
            (f, Some(_)) => return Err(param_err(format!("hybrid_weight is only valid for the hybrid family, not {f}"))),
            (_, None) => {}
        }
        for a in &self.augmentations {
            a.validate()?;
        }
        Ok(())
    }

    /// Checks the dataset-dependent preconditions.
    pub fn validate_for(&self, x: &TimeSeriesDataset) -> Result<()> {
        self.validate()?;
        let (n, _, t) = x.shape();
        if self.family.pairs_samples() && n < 2 {
            return Err(param_err(format!("{} needs at least 2 samples", self.family)));
        }
        if self.family == TemplateFamily::ContrastiveSubsequence {
            if t < SUBSEQUENCE_MIN_T {
                return Err(param_err(format!(
                    "subsequence template needs T >= {SUBSEQUENCE_MIN_T}, got {t}"
                )));
            }
            if n < 2 && self.n_negatives > 0 {
                return Err(param_err("a single sample cannot provide negatives"));
            }
        }
        Ok(())
    }
}

const SUBSEQUENCE_MIN_T: usize = 8;

/// Encoder (and reconstruction head) produced by [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainedInstance {
    pub config: PretrainTemplateConfig,
    pub encoder: Encoder,
    pub reconstruction_head: Option<Linear>,
    pub loss_curve: Vec<f64>,
    pub fitted: bool,
}

impl PretrainedInstance {
    /// Untrained instance: random encoder, empty loss curve, not fitted.
    pub fn initialize(cfg: &PretrainTemplateConfig, input_channels: usize) -> Result<Self> {
        let mut config = cfg.clone();
        config.encoder.input_channels = input_channels;
        config.validate()?;
        let encoder = Encoder::new(config.encoder.clone())?;
        let reconstruction_head = config.family.has_reconstruction_head().then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.encoder.seed ^ HEAD_SEED_SALT);
            Linear::new(config.encoder.repr_dim, input_channels, &mut rng)
        });
        Ok(Self {
            config,
            encoder,
            reconstruction_head,
            loss_curve: Vec::new(),
            fitted: false,
        })
    }

    /// Every trainable tensor: encoder parameters then the head.
    pub fn named_parameters(&self) -> Vec<NamedTensor> {
        let mut out = self.encoder.parameters().to_vec();
        if let Some(h) = &self.reconstruction_head {
            out.extend(h.named_parameters("reconstruction_head"));
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TemplateVars<'_> {
        TemplateVars {
            encoder: &self.encoder,
            encoder_vars: self.encoder.bind(tape, trainable),
            head: self.reconstruction_head.as_ref().map(|h| h.bind(tape, trainable)),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.params_mut();
        if let Some(h) = &mut self.reconstruction_head {
            out.extend(h.params_mut());
        }
        out
    }
}

const HEAD_SEED_SALT: u64 = 0x005e_ed0f_4ead;

/// Tape handles for one instance's parameters.
pub struct TemplateVars<'a> {
    pub encoder: &'a Encoder,
    pub encoder_vars: Vec<Var>,
    pub head: Option<LinearVars>,
}

impl TemplateVars<'_> {
    pub fn all_vars(&self) -> Vec<Var> {
        let mut v = self.encoder_vars.clone();
        if let Some(h) = &self.head {
            v.extend(h.vars());
        }
        v
    }
}

/// Progress of a training run, reported after every optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub fn fit(cfg: &PretrainTemplateConfig, x: &TimeSeriesDataset) -> Result<PretrainedInstance> {
    fit_with_observer(cfg, x, |_| {})
}

/// [`fit`], calling `observer` after each step.
pub fn fit_with_observer(
    cfg: &PretrainTemplateConfig,
    x: &TimeSeriesDataset,
    mut observer: impl FnMut(&StepReport),
) -> Result<PretrainedInstance> {
    cfg.validate_for(x)?;
    let mut inst = PretrainedInstance::initialize(cfg, x.n_channels())?;
    let cfg = inst.config.clone();
    let data: Vec<Matrix> = (0..x.n_samples()).map(|i| x.sample(i)).collect();
    let names: Vec<String> = inst.named_parameters().into_iter().map(|p| p.name).collect();
    let mut opt = OptimizerState::adam(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let batches = make_batches(&order, cfg.batch_size, cfg.family.pairs_samples());
        let mut total = 0.0;
        for batch in &batches {
            let mut tape = Tape::new();
            let vars = inst.bind(&mut tape, true);
            let loss = template_loss(&mut tape, &cfg, &vars, &data, batch, &mut rng)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{} loss is {value} at epoch {}, step {}",
                    cfg.family,
                    epoch + 1,
                    step + 1
                )));
            }
            let all = vars.all_vars();
            let grads = tape.backward(loss).take_all(&tape, &all);
            drop(vars);
            gradient_step(&mut inst.params_mut(), &grads, &names, &mut opt).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (epoch {})", epoch + 1)),
                other => other,
            })?;
            step += 1;
            total += value;
            observer(&StepReport {
                epoch: epoch + 1,
                step,
                loss: value,
            });
        }
        inst.loss_curve.push(total / batches.len() as f64);
    }
    // Stored parameters are f32-exact so exports reproduce them bit for bit.
    for p in inst.params_mut() {
        p.round_to_f32();
    }
    inst.fitted = true;
    Ok(inst)
}

/// Mean template loss of a fitted instance on `x` without training.
pub fn holdout_loss(inst: &PretrainedInstance, x: &TimeSeriesDataset) -> Result<f64> {
    let cfg = &inst.config;
    cfg.validate_for(x)?;
    let data: Vec<Matrix> = (0..x.n_samples()).map(|i| x.sample(i)).collect();
    let order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches = make_batches(&order, cfg.batch_size, cfg.family.pairs_samples());
    let mut total = 0.0;
    for batch in &batches {
        let mut tape = Tape::new();
        let vars = inst.bind(&mut tape, false);
        let loss = template_loss(&mut tape, cfg, &vars, &data, batch, &mut rng)?;
        total += tape.value(loss).item() * batch.len() as f64;
    }
    let v = total / data.len().max(1) as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{} holdout loss is {v}", cfg.family)));
    }
    Ok(v)
}

/// Splits `order` into batches; with `min_two`, a trailing singleton joins
/// the previous batch.
pub fn make_batches(order: &[usize], batch_size: usize, min_two: bool) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if min_two && batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let last = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(last);
        }
    }
    batches
}

/// Pooled representations (`N x K`) of every sample.
pub fn transform(inst: &PretrainedInstance, x: &TimeSeriesDataset) -> Result<Matrix> {
    if !inst.fitted {
        return Err(Error::State("transform called on an unfitted instance".into()));
    }
    if x.n_channels() != inst.encoder.config().input_channels {
        return Err(shape_err(format!(
            "instance expects {} channels, dataset has {}",
            inst.encoder.config().input_channels,
            x.n_channels()
        )));
    }
    let samples: Vec<Matrix> = (0..x.n_samples()).map(|i| x.sample_time_major(i)).collect();
    inst.encoder.encode_batch(&samples)
}

/// Representation matrices of `M` instances, aligned by sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationSet {
    matrices: Vec<Matrix>,
}

impl RepresentationSet {
    pub fn new(matrices: Vec<Matrix>) -> Result<Self> {
        let Some(first) = matrices.first() else {
            return Err(param_err("representation set needs at least one matrix"));
        };
        let n = first.rows();
        for (m, z) in matrices.iter().enumerate() {
            if z.rows() != n {
                return Err(shape_err(format!("Z_{m} has {} rows, expected {n}", z.rows())));
            }
            if !z.is_finite() {
                return Err(Error::NonFinite(format!("Z_{m} holds non-finite entries")));
            }
        }
        Ok(Self { matrices })
    }

    pub fn from_instances(instances: &[&PretrainedInstance], x: &TimeSeriesDataset) -> Result<Self> {
        Self::new(instances.iter().map(|i| transform(i, x)).collect::<Result<_>>()?)
    }

    pub fn matrices(&self) -> &[Matrix] {
        &self.matrices
    }

    pub fn n_samples(&self) -> usize {
        self.matrices[0].rows()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.matrices.iter().map(Matrix::cols).collect()
    }
}

/// The configured objective on `batch` (indices into `data`, samples `D x T`).
///
/// Randomness (views, windows, masks) is drawn from `rng`, so a fixed seed
/// makes the objective a deterministic function of the parameters.
pub fn template_loss(
    tape: &mut Tape,
    cfg: &PretrainTemplateConfig,
    vars: &TemplateVars<'_>,
    data: &[Matrix],
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(param_err("empty batch"));
    }
    match cfg.family {
        TemplateFamily::ContrastiveSeries => series_loss(tape, cfg, vars, data, batch, rng),
        TemplateFamily::ContrastiveSubsequence => subsequence_loss(tape, cfg, vars, data, batch, rng),
        TemplateFamily::ContrastiveTimestamp => timestamp_loss(tape, cfg, vars, data, batch, rng),
        TemplateFamily::AutoregressiveMask => masked_loss(tape, cfg, vars, data, batch, rng),
        TemplateFamily::Hybrid => {
            let lambda = cfg
                .hybrid_weight
                .ok_or_else(|| param_err("hybrid family requires hybrid_weight"))?;
            let c = series_loss(tape, cfg, vars, data, batch, rng)?;
            let r = masked_loss(tape, cfg, vars, data, batch, rng)?;
            losses::hybrid(tape, c, r, lambda)
        }
    }
}

fn encode_pooled(tape: &mut Tape, vars: &TemplateVars<'_>, samples: &[Matrix]) -> Var {
    let (x, segs) = stack(samples);
    let x = tape.constant(x);
    vars.encoder.forward_pooled(tape, &vars.encoder_vars, x, &segs)
}

fn series_loss(
    tape: &mut Tape,
    cfg: &PretrainTemplateConfig,
    vars: &TemplateVars<'_>,
    data: &[Matrix],
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let mut views_a = Vec::with_capacity(batch.len());
    let mut views_b = Vec::with_capacity(batch.len());
    for &i in batch {
        views_a.push(augment(&data[i], &cfg.augmentations, rng)?.transpose());
        views_b.push(augment(&data[i], &cfg.augmentations, rng)?.transpose());
    }
    let za = encode_pooled(tape, vars, &views_a);
    let zb = encode_pooled(tape, vars, &views_b);
    nt_xent(tape, za, zb, cfg.temperature)
}

/// Time-major copy of columns `start..start + len` of a `D x T` sample.
fn window(x: &Matrix, start: usize, len: usize) -> Matrix {
    let d = x.rows();
    let mut out = Matrix::zeros(len, d);
    for k in 0..len {
        for j in 0..d {
            out[(k, j)] = x[(j, start + k)];
        }
    }
    out
}

fn subsequence_loss(
    tape: &mut Tape,
    cfg: &PretrainTemplateConfig,
    vars: &TemplateVars<'_>,
    data: &[Matrix],
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let t = data[batch[0]].cols();
    if t < SUBSEQUENCE_MIN_T {
        return Err(param_err(format!("subsequence template needs T >= {SUBSEQUENCE_MIN_T}, got {t}")));
    }
    if data.len() < 2 && cfg.n_negatives > 0 {
        return Err(param_err("a single sample cannot provide negatives"));
    }
    let min_len = (t / 4).max(2);
    let mut refs = Vec::with_capacity(batch.len());
    let mut positives = Vec::with_capacity(batch.len());
    for &i in batch {
        let len_ref = rng.random_range(min_len..=t);
        let start_ref = rng.random_range(0..=t - len_ref);
        let len_pos = rng.random_range(min_len..=len_ref);
        let start_pos = start_ref + rng.random_range(0..=len_ref - len_pos);
        refs.push(window(&data[i], start_ref, len_ref));
        positives.push(window(&data[i], start_pos, len_pos));
    }
    let mut pool = Vec::with_capacity(cfg.n_negatives);
    let mut sources = Vec::with_capacity(cfg.n_negatives);
    for _ in 0..cfg.n_negatives {
        let src = rng.random_range(0..data.len());
        let len = rng.random_range(min_len..=t);
        let start = rng.random_range(0..=t - len);
        pool.push(window(&data[src], start, len));
        sources.push(src);
    }
    let negatives: Vec<Vec<usize>> = batch
        .iter()
        .map(|&i| (0..pool.len()).filter(|&p| sources[p] != i).collect())
        .collect();
    // Unit-norm embeddings scaled by 1/sqrt(temperature): dot products are
    // cosine similarities over temperature, which rules out the collapsed
    // all-zero solution.
    let scale = cfg.temperature.sqrt().recip();
    let embed = |tape: &mut Tape, windows: &[Matrix]| {
        let z = encode_pooled(tape, vars, windows);
        let z = tape.l2_normalize_rows(z);
        tape.scale(z, scale)
    };
    let z_ref = embed(tape, &refs);
    let z_pos = embed(tape, &positives);
    let z_neg = (!pool.is_empty()).then(|| embed(tape, &pool));
    triplet_embedding_loss(tape, z_ref, z_pos, z_neg, &negatives)
}

/// Value of the subsequence objective for `encoder` on `batch` (`D x T`
/// samples), with negatives drawn from the same batch.
pub fn triplet_subseries_loss(encoder: &Encoder, batch: &[Matrix], n_negatives: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    if batch.len() < 2 && n_negatives > 0 {
        return Err(param_err("a batch of one sample cannot provide negatives"));
    }
    let cfg = PretrainTemplateConfig {
        n_negatives,
        ..PretrainTemplateConfig::new(TemplateFamily::ContrastiveSubsequence)
    };
    let mut tape = Tape::new();
    let vars = TemplateVars {
        encoder,
        encoder_vars: encoder.bind(&mut tape, false),
        head: None,
    };
    let idx: Vec<usize> = (0..batch.len()).collect();
    let loss = subsequence_loss(&mut tape, &cfg, &vars, batch, &idx, rng)?;
    Ok(tape.value(loss).item())
}

fn timestamp_loss(
    tape: &mut Tape,
    cfg: &PretrainTemplateConfig,
    vars: &TemplateVars<'_>,
    data: &[Matrix],
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let t = data[batch[0]].cols();
    let min_overlap = (t / 4).max(2);
    // Time-warping augmentations would break the alignment of the overlap.
    let policy: Vec<Augmentation> = cfg
        .augmentations
        .iter()
        .copied()
        .filter(|a| matches!(a, Augmentation::Jitter { .. } | Augmentation::Scale { .. }))
        .collect();
    let mut crops_a = Vec::with_capacity(batch.len());
    let mut crops_b = Vec::with_capacity(batch.len());
    let mut overlaps = Vec::with_capacity(batch.len());
    for &i in batch {
        let overlap = rng.random_range(min_overlap..=t);
        let ov_start = rng.random_range(0..=t - overlap);
        let ov_end = ov_start + overlap;
        let a_start = rng.random_range(0..=ov_start);
        let b_end = rng.random_range(ov_end..=t);
        let xa = augment(&data[i], &policy, rng)?;
        let xb = augment(&data[i], &policy, rng)?;
        crops_a.push(window(&xa, a_start, ov_end - a_start));
        crops_b.push(window(&xb, ov_start, b_end - ov_start));
        overlaps.push((ov_start - a_start, overlap));
    }
    let (xa, segs_a) = stack(&crops_a);
    let (xb, segs_b) = stack(&crops_b);
    let xa = tape.constant(xa);
    let xb = tape.constant(xb);
    let ra = vars.encoder.forward_sequence(tape, &vars.encoder_vars, xa, &segs_a);
    let rb = vars.encoder.forward_sequence(tape, &vars.encoder_vars, xb, &segs_b);
    let mut off_a = 0;
    let mut off_b = 0;
    let mut terms = Vec::with_capacity(batch.len());
    for (s, &(lead, overlap)) in overlaps.iter().enumerate() {
        let va = tape.slice_rows(ra, off_a + lead, overlap);
        let vb = tape.slice_rows(rb, off_b, overlap);
        terms.push(timestamp_contrastive(tape, va, vb, cfg.temperature)?);
        off_a += segs_a[s];
        off_b += segs_b[s];
    }
    let all = tape.concat_rows(&terms);
    Ok(tape.mean(all))
}

fn masked_loss(
    tape: &mut Tape,
    cfg: &PretrainTemplateConfig,
    vars: &TemplateVars<'_>,
    data: &[Matrix],
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let head = vars
        .head
        .ok_or_else(|| Error::State("masked objective needs a reconstruction head".into()))?;
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut keeps = Vec::with_capacity(batch.len());
    for &i in batch {
        let x = &data[i];
        let (d, t) = x.shape();
        let mut m = sample_binary_mask((d, t), cfg.masking_rate, rng, cfg.mask_geometry)?;
        if m.count_masked() == 0 {
            m.set(rng.random_range(0..d), rng.random_range(0..t), false);
        }
        inputs.push(apply_mask(x, &m)?.transpose());
        targets.push(x.transpose());
        keeps.push(m.to_time_major());
    }
    let (input, segs) = stack(&inputs);
    let target = Matrix::vstack(&targets.iter().collect::<Vec<_>>());
    let keep = Matrix::vstack(&keeps.iter().collect::<Vec<_>>());
    let input = tape.constant(input);
    let seq = vars.encoder.forward_sequence(tape, &vars.encoder_vars, input, &segs);
    let recon = head.forward(tape, seq);
    let target = tape.constant(target);
    losses::masked_mse(tape, target, recon, &keep)
}
