//! Differentiable building blocks: encoders and affine layers.
//!
//! Parameters are stored as flat lists of [`NamedTensor`]s whose shapes are
//! fully determined by the owning config. Forward passes run on an
//! [`autodiff::Tape`](crate::autodiff::Tape) against the `Var`s returned by
//! `bind`, so the same code path serves training and inference.

use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Segments, Tape, Var};
use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Binds every tensor onto the tape, as trainable leaves or constants.
pub fn bind_all(tape: &mut Tape, params: &[NamedTensor], trainable: bool) -> Vec<Var> {
    params.iter().map(|p| tape.leaf(&p.value, trainable)).collect()
}

fn check_shapes(expected: &[(String, (usize, usize))], params: &[NamedTensor]) -> Result<()> {
    if expected.len() != params.len() {
        return Err(shape_err(format!(
            "expected {} parameter tensors, got {}",
            expected.len(),
            params.len()
        )));
    }
    for ((name, shape), p) in expected.iter().zip(params) {
        if &p.name != name {
            return Err(shape_err(format!("expected parameter '{name}', got '{}'", p.name)));
        }
        if p.value.shape() != *shape {
            return Err(shape_err(format!(
                "parameter '{name}' has shape {:?}, expected {shape:?}",
                p.value.shape()
            )));
        }
        if !p.value.is_finite() {
            return Err(Error::NonFinite(format!("parameter '{name}' holds non-finite values")));
        }
    }
    Ok(())
}

/// Uniform in `±1/sqrt(fan_in)`, rounded to `f32` so exported parameters
/// reproduce the in-memory model exactly.
fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a) as f32 as f64).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Affine map `y = x W + b` applied row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: uniform_init(rng, in_dim, out_dim, in_dim),
            bias: Matrix::zeros(1, out_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(in_dim, out_dim),
            bias: Matrix::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<NamedTensor> {
        vec![
            NamedTensor::new(format!("{prefix}.weight"), self.weight.clone()),
            NamedTensor::new(format!("{prefix}.bias"), self.bias.clone()),
        ]
    }

    pub fn from_named(prefix: &str, params: &[NamedTensor]) -> Result<Self> {
        let [w, b] = params else {
            return Err(shape_err(format!("'{prefix}' needs exactly weight and bias")));
        };
        if w.name != format!("{prefix}.weight") || b.name != format!("{prefix}.bias") {
            return Err(shape_err(format!(
                "unexpected tensor names '{}', '{}' for '{prefix}'",
                w.name, b.name
            )));
        }
        if b.value.shape() != (1, w.value.cols()) {
            return Err(shape_err(format!(
                "'{}' shape {:?} does not match weight {:?}",
                b.name,
                b.value.shape(),
                w.value.shape()
            )));
        }
        if !w.value.is_finite() || !b.value.is_finite() {
            return Err(Error::NonFinite(format!("'{prefix}' holds non-finite values")));
        }
        Ok(Self {
            weight: w.value.clone(),
            bias: b.value.clone(),
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        LinearVars {
            weight: tape.leaf(&self.weight, trainable),
            bias: tape.leaf(&self.bias, trainable),
        }
    }

    /// Plain evaluation without a tape.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = crate::tensor::matmul(x, &self.weight);
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(self.bias.as_slice()) {
                *o += b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = tape.matmul(x, self.weight);
        tape.add_bias(h, self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    DilatedConv,
    Mlp,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dilated_conv" => Ok(Self::DilatedConv),
            "mlp" => Ok(Self::Mlp),
            other => Err(param_err(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Encoder hyper-parameters. Together with `input_channels` they fix every
/// parameter shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    pub input_channels: usize,
    /// Residual conv blocks (dilations 1, 2, 4, ...) or hidden MLP layers.
    pub depth: usize,
    pub hidden_width: usize,
    pub repr_dim: usize,
    pub kernel_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::DilatedConv,
            input_channels: 1,
            depth: 3,
            hidden_width: 64,
            repr_dim: 64,
            kernel_size: 3,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.depth == 0 || self.hidden_width == 0 || self.repr_dim == 0 {
            return Err(param_err(
                "encoder needs input_channels, depth, hidden_width and repr_dim >= 1",
            ));
        }
        if self.architecture == Architecture::DilatedConv && self.kernel_size == 0 {
            return Err(param_err("kernel_size must be >= 1"));
        }
        Ok(())
    }

    /// Names and shapes of the parameter tensors, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (d, h, k) = (self.input_channels, self.hidden_width, self.repr_dim);
        let mut shapes = Vec::new();
        match self.architecture {
            Architecture::DilatedConv => {
                shapes.push(("input.weight".to_string(), (d, h)));
                shapes.push(("input.bias".to_string(), (1, h)));
                for i in 0..self.depth {
                    shapes.push((format!("block{i}.weight"), (self.kernel_size * h, h)));
                    shapes.push((format!("block{i}.bias"), (1, h)));
                }
            }
            Architecture::Mlp => {
                shapes.push(("layer0.weight".to_string(), (d, h)));
                shapes.push(("layer0.bias".to_string(), (1, h)));
                for i in 1..self.depth {
                    shapes.push((format!("layer{i}.weight"), (h, h)));
                    shapes.push((format!("layer{i}.bias"), (1, h)));
                }
            }
        }
        shapes.push(("output.weight".to_string(), (h, k)));
        shapes.push(("output.bias".to_string(), (1, k)));
        shapes
    }
}

/// A representation encoder `h_m`: maps a `T x D` series to per-timestep
/// representations (`T x K`) and, by max-pooling over time, to a `K`-vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    config: EncoderConfig,
    params: Vec<NamedTensor>,
}

impl Encoder {
    /// Randomly initialized from `config.seed`.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, (r, c))| {
                let value = if name.ends_with(".bias") {
                    Matrix::zeros(r, c)
                } else {
                    uniform_init(&mut rng, r, c, r)
                };
                NamedTensor::new(name, value)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_parameters(config: EncoderConfig, params: Vec<NamedTensor>) -> Result<Self> {
        config.validate()?;
        check_shapes(&config.parameter_shapes(), &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn repr_dim(&self) -> usize {
        self.config.repr_dim
    }

    pub fn parameters(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.params.iter_mut().map(|p| &mut p.value).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        bind_all(tape, &self.params, trainable)
    }

    /// Per-timestep representations of a row-stacked batch (`sum(segments) x D`).
    pub fn forward_sequence(&self, tape: &mut Tape, vars: &[Var], x: Var, segments: &Segments) -> Var {
        let cfg = &self.config;
        match cfg.architecture {
            Architecture::DilatedConv => {
                let h0 = tape.matmul(x, vars[0]);
                let mut h = tape.add_bias(h0, vars[1]);
                for i in 0..cfg.depth {
                    let dilation = 1usize << i;
                    let cols = tape.causal_im2col(h, cfg.kernel_size, dilation, segments);
                    let u = tape.matmul(cols, vars[2 + 2 * i]);
                    let u = tape.add_bias(u, vars[3 + 2 * i]);
                    let u = tape.gelu(u);
                    h = tape.add(h, u);
                }
                let o = 2 + 2 * cfg.depth;
                let out = tape.matmul(h, vars[o]);
                tape.add_bias(out, vars[o + 1])
            }
            Architecture::Mlp => {
                let mut h = x;
                for i in 0..cfg.depth {
                    let z = tape.matmul(h, vars[2 * i]);
                    let z = tape.add_bias(z, vars[2 * i + 1]);
                    h = tape.gelu(z);
                }
                let o = 2 * cfg.depth;
                let out = tape.matmul(h, vars[o]);
                tape.add_bias(out, vars[o + 1])
            }
        }
    }

    /// One pooled representation row per segment.
    pub fn forward_pooled(&self, tape: &mut Tape, vars: &[Var], x: Var, segments: &Segments) -> Var {
        let seq = self.forward_sequence(tape, vars, x, segments);
        tape.segment_max(seq, segments)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.config.input_channels {
            return Err(shape_err(format!(
                "encoder expects {} channels, input has {}",
                self.config.input_channels,
                x.rows()
            )));
        }
        if x.cols() == 0 {
            return Err(shape_err("input has no timesteps"));
        }
        Ok(())
    }

    /// Per-timestep representations of one `D x T` sample, as `T x K`.
    pub fn encode_sequence(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let input = tape.constant(x.transpose());
        let segs: Segments = Arc::from(vec![x.cols()]);
        let out = self.forward_sequence(&mut tape, &vars, input, &segs);
        Ok(tape.value(out).clone())
    }

    /// Max-pooled `K`-vector of one `D x T` sample.
    pub fn encode(&self, x: &Matrix) -> Result<Vec<f64>> {
        let seq = self.encode_sequence(x)?;
        Ok((0..seq.cols())
            .map(|c| (0..seq.rows()).map(|r| seq[(r, c)]).fold(f64::NEG_INFINITY, f64::max))
            .collect())
    }

    /// Pooled representations of time-major samples, processed in chunks.
    pub fn encode_batch(&self, samples: &[Matrix]) -> Result<Matrix> {
        let mut out = Matrix::zeros(samples.len(), self.repr_dim());
        for (chunk_idx, chunk) in samples.chunks(ENCODE_CHUNK).enumerate() {
            for s in chunk {
                if s.cols() != self.config.input_channels {
                    return Err(shape_err(format!(
                        "encoder expects {} channels, input has {}",
                        self.config.input_channels,
                        s.cols()
                    )));
                }
            }
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let (x, segs) = stack(chunk);
            let x = tape.constant(x);
            let pooled = self.forward_pooled(&mut tape, &vars, x, &segs);
            let v = tape.value(pooled);
            for r in 0..v.rows() {
                out.row_mut(chunk_idx * ENCODE_CHUNK + r).copy_from_slice(v.row(r));
            }
        }
        Ok(out)
    }
}

const ENCODE_CHUNK: usize = 64;

/// Row-stacks time-major samples and records their lengths.
pub fn stack(samples: &[Matrix]) -> (Matrix, Segments) {
    let refs: Vec<&Matrix> = samples.iter().collect();
    let segs: Segments = samples.iter().map(Matrix::rows).collect::<Vec<_>>().into();
    (Matrix::vstack(&refs), segs)
}
