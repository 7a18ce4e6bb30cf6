//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of a forward pass. Calling
//! [`Tape::backward`] on a 1x1 output walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! Constants (inputs, frozen parameters) never receive gradients and the
//! backward pass skips any subgraph that only depends on constants.

use std::sync::Arc;

use crate::tensor::{gemm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row counts of the samples stacked into a batch matrix.
pub type Segments = Arc<[usize]>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Abs(Var),
    Square(Var),
    LogSigmoid(Var),
    CausalIm2col {
        input: Var,
        kernel: usize,
        dilation: usize,
        segments: Segments,
    },
    SegmentMax {
        input: Var,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    RowNorms(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        excluded: Vec<Option<usize>>,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradients of `vars`, with zeros (shaped like `tape`'s values) for any
    /// var the output does not depend on.
    pub fn take_all(&mut self, tape: &Tape, vars: &[Var]) -> Vec<Matrix> {
        vars.iter()
            .map(|&v| {
                self.take(v).unwrap_or_else(|| {
                    let (r, c) = tape.value(v).shape();
                    Matrix::zeros(r, c)
                })
            })
            .collect()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: &Matrix) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: &Matrix, requires_grad: bool) -> Var {
        self.push(value.clone(), Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows(), bv.cols());
        gemm(1.0, av, false, bv, false, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        gemm(1.0, av, false, bv, true, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMulTransB(a, b), rg)
    }

    /// Adds a `1 x n` row vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), bv.cols(), "bias width mismatch");
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push(out, Op::AddBias(a, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSigmoid(a), rg)
    }

    /// Causal dilated im2col over a row-stacked batch.
    ///
    /// Row `t` of each segment becomes the concatenation of rows
    /// `t - (kernel-1)*dilation, ..., t - dilation, t` of the same segment,
    /// zero-padded before the segment start. Multiplying the result by a
    /// `(kernel*C) x C'` weight is a causal dilated 1-D convolution.
    pub fn causal_im2col(&mut self, input: Var, kernel: usize, dilation: usize, segments: &Segments) -> Var {
        let x = self.value(input);
        let c = x.cols();
        assert_eq!(
            segments.iter().sum::<usize>(),
            x.rows(),
            "segments do not cover the batch"
        );
        let mut out = Matrix::zeros(x.rows(), kernel * c);
        let mut start = 0;
        for &len in segments.iter() {
            for t in 0..len {
                let dst = out.row_mut(start + t);
                for j in 0..kernel {
                    let lag = (kernel - 1 - j) * dilation;
                    if lag <= t {
                        dst[j * c..(j + 1) * c].copy_from_slice(x.row(start + t - lag));
                    }
                }
            }
            start += len;
        }
        let rg = self.rg(&[input]);
        self.push(
            out,
            Op::CausalIm2col {
                input,
                kernel,
                dilation,
                segments: segments.clone(),
            },
            rg,
        )
    }

    /// Column-wise max over each segment; one output row per segment.
    pub fn segment_max(&mut self, input: Var, segments: &Segments) -> Var {
        let x = self.value(input);
        let c = x.cols();
        let mut out = Matrix::zeros(segments.len(), c);
        let mut argmax = vec![0usize; segments.len() * c];
        let mut start = 0;
        for (s, &len) in segments.iter().enumerate() {
            assert!(len > 0, "empty segment");
            for col in 0..c {
                let mut best = start;
                let mut best_v = x[(start, col)];
                for r in start + 1..start + len {
                    let v = x[(r, col)];
                    if v > best_v {
                        best_v = v;
                        best = r;
                    }
                }
                out[(s, col)] = best_v;
                argmax[s * c + col] = best;
            }
            start += len;
        }
        assert_eq!(start, x.rows(), "segments do not cover the batch");
        let rg = self.rg(&[input]);
        self.push(out, Op::SegmentMax { input, argmax }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Matrix::hstack(&mats);
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Matrix::vstack(&mats);
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, input: Var, rows: Vec<usize>) -> Var {
        let x = self.value(input);
        let mut out = Matrix::zeros(rows.len(), x.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(x.row(r));
        }
        let rg = self.rg(&[input]);
        self.push(out, Op::GatherRows(input, rows), rg)
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Var {
        self.gather_rows(input, (start..start + len).collect())
    }

    /// Scales each row to unit L2 norm (rows with norm below 1e-12 are
    /// divided by 1e-12 instead).
    pub fn l2_normalize_rows(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        let rg = self.rg(&[input]);
        self.push(out, Op::L2NormalizeRows { input, norms }, rg)
    }

    /// `m x 1` column of row L2 norms. The gradient at a zero row is zero.
    pub fn row_norms(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = (0..x.rows())
            .map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Matrix::from_vec(x.rows(), 1, data);
        let rg = self.rg(&[input]);
        self.push(out, Op::RowNorms(input), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Matrix::scalar(self.value(input).sum());
        let rg = self.rg(&[input]);
        self.push(out, Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).len().max(1) as f64;
        let s = self.sum(input);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`, where the
    /// softmax of row `i` skips column `excluded[i]` when given.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>, excluded: Vec<Option<usize>>) -> Var {
        let l = self.value(logits);
        let (m, n) = l.shape();
        assert_eq!(targets.len(), m, "one target per row");
        assert_eq!(excluded.len(), m, "one exclusion slot per row");
        let mut probs = Matrix::zeros(m, n);
        let mut total = 0.0;
        for i in 0..m {
            let row = l.row(i);
            let ex = excluded[i];
            assert!(targets[i] < n && Some(targets[i]) != ex, "invalid target");
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| Some(*j) != ex)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if Some(j) != ex {
                    let e = (v - max).exp();
                    probs[(i, j)] = e;
                    z += e;
                }
            }
            for v in probs.row_mut(i) {
                *v /= z;
            }
            total += -(row[targets[i]] - max - z.ln());
        }
        let out = Matrix::scalar(total / m as f64);
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                excluded,
                probs,
            },
            rg,
        )
    }

    /// Gradients of the scalar `output` with respect to every node that
    /// requires one.
    pub fn backward(&self, output: Var) -> Gradients {
        let out_val = self.value(output);
        assert_eq!(out_val.shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    gemm(1.0, g, false, bv, true, 0.0, &mut ga);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(1.0, av, true, g, false, 0.0, &mut gb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulTransB(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    gemm(1.0, g, false, bv, false, 0.0, &mut ga);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(1.0, g, true, av, false, 0.0, &mut gb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| 2.0 * x * gv);
                self.accumulate(grads, *a, ga);
            }
            Op::LogSigmoid(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * sigmoid(-x));
                self.accumulate(grads, *a, ga);
            }
            Op::CausalIm2col {
                input,
                kernel,
                dilation,
                segments,
            } => {
                let x = self.value(*input);
                let c = x.cols();
                let mut gx = Matrix::zeros(x.rows(), c);
                let mut start = 0;
                for &len in segments.iter() {
                    for t in 0..len {
                        let src = g.row(start + t);
                        for j in 0..*kernel {
                            let lag = (kernel - 1 - j) * dilation;
                            if lag <= t {
                                let dst = gx.row_mut(start + t - lag);
                                for (d, s) in dst.iter_mut().zip(&src[j * c..(j + 1) * c]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                    start += len;
                }
                self.accumulate(grads, *input, gx);
            }
            Op::SegmentMax { input, argmax } => {
                let x = self.value(*input);
                let c = x.cols();
                let mut gx = Matrix::zeros(x.rows(), c);
                for s in 0..g.rows() {
                    for col in 0..c {
                        gx[(argmax[s * c + col], col)] += g[(s, col)];
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.slice_rows(offset, h));
                    }
                    offset += h;
                }
            }
            Op::GatherRows(input, rows) => {
                let x = self.value(*input);
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (d, s) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::L2NormalizeRows { input, norms } => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yy), &gg) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = (gg - yy * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::RowNorms(input) => {
                let x = self.value(*input);
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = node.value[(r, 0)];
                    if n > 0.0 {
                        let scale = g[(r, 0)] / n;
                        for (d, &v) in gx.row_mut(r).iter_mut().zip(x.row(r)) {
                            *d = v * scale;
                        }
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Sum(input) => {
                let x = self.value(*input);
                self.accumulate(grads, *input, Matrix::filled(x.rows(), x.cols(), g.item()));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                excluded,
                probs,
            } => {
                let m = probs.rows();
                let scale = g.item() / m as f64;
                let mut gl = probs.map(|p| p * scale);
                for i in 0..m {
                    gl[(i, targets[i])] -= scale;
                    if let Some(e) = excluded[i] {
                        gl[(i, e)] = 0.0;
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Matrix) -> f64, x: &Matrix) -> Matrix {
        let eps = 1e-6;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.as_mut_slice()[i] += eps;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= eps;
            g.as_mut_slice()[i] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        g
    }

    fn check(f: impl Fn(&mut Tape, Var) -> Var, x: &Matrix) {
        let mut tape = Tape::new();
        let v = tape.param(x);
        let out = f(&mut tape, v);
        let grads = tape.backward(out);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let numeric = numeric_grad(
            |p| {
                let mut t = Tape::new();
                let v = t.param(p);
                let o = f(&mut t, v);
                t.value(o).item()
            },
            x,
        );
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-6, "gradient mismatch {err}: {analytic:?} vs {numeric:?}");
    }

    fn sample() -> Matrix {
        Matrix::from_rows(&[
            vec![0.3, -1.2, 0.7],
            vec![1.1, 0.4, -0.5],
            vec![-0.8, 0.9, 0.2],
            vec![0.05, -0.3, 1.4],
        ])
    }

    #[test]
    fn elementwise_ops() {
        let x = sample();
        check(|t, v| { let a = t.gelu(v); t.sum(a) }, &x);
        check(|t, v| { let a = t.log_sigmoid(v); t.sum(a) }, &x);
        check(|t, v| { let a = t.square(v); let b = t.abs(a); t.mean(b) }, &x);
        check(|t, v| { let a = t.mul(v, v); let b = t.scale(a, -0.5); t.sum(b) }, &x);
    }

    #[test]
    fn matmul_and_bias() {
        let x = sample();
        let w = Matrix::from_rows(&[vec![0.5, -0.1], vec![0.2, 0.3], vec![-0.7, 0.4]]);
        check(
            |t, v| {
                let wv = t.constant(w.clone());
                let b = t.constant(Matrix::from_rows(&[vec![0.1, -0.2]]));
                let h = t.matmul(v, wv);
                let h = t.add_bias(h, b);
                let h = t.gelu(h);
                t.sum(h)
            },
            &x,
        );
        check(
            |t, v| {
                let s = t.matmul_t(v, v);
                let s = t.square(s);
                t.sum(s)
            },
            &x,
        );
    }

    #[test]
    fn conv_pool_and_normalize() {
        let x = sample();
        let segs: Segments = Arc::from(vec![3usize, 1]);
        check(
            |t, v| {
                let c = t.causal_im2col(v, 2, 1, &segs);
                let w = t.constant(Matrix::from_vec(6, 2, vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.2, 0.7, 0.1, -0.3, 0.6, 0.2, -0.1]));
                let h = t.matmul(c, w);
                let p = t.segment_max(h, &segs);
                let n = t.l2_normalize_rows(p);
                let q = t.square(n);
                let r = t.row_norms(v);
                let s1 = t.sum(q);
                let s2 = t.sum(r);
                let s = t.add(s1, s2);
                let n2 = t.l2_normalize_rows(v);
                let n2 = t.gather_rows(n2, vec![0, 0, 2]);
                let w2 = t.constant(Matrix::from_rows(&[vec![1.0], vec![2.0], vec![-1.0]]));
                let m = t.matmul(n2, w2);
                let m = t.sum(m);
                t.add(s, m)
            },
            &x,
        );
    }

    #[test]
    fn cross_entropy_with_exclusion() {
        let x = sample();
        check(
            |t, v| t.softmax_cross_entropy(v, vec![2, 0, 1, 1], vec![Some(0), None, Some(2), None]),
            &x,
        );
    }

    #[test]
    fn causal_im2col_layout() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]));
        let segs: Segments = Arc::from(vec![4usize]);
        let c = t.causal_im2col(x, 3, 1, &segs);
        assert_eq!(
            t.value(c),
            &Matrix::from_rows(&[
                vec![0.0, 0.0, 1.0],
                vec![0.0, 1.0, 2.0],
                vec![1.0, 2.0, 3.0],
                vec![2.0, 3.0, 4.0]
            ])
        );
        let c2 = t.causal_im2col(x, 2, 2, &segs);
        assert_eq!(
            t.value(c2),
            &Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 2.0], vec![1.0, 3.0], vec![2.0, 4.0]])
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(sample());
        let b = t.param(&sample());
        let p = t.mul(a, b);
        let s = t.sum(p);
        let g = t.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &sample());
    }
}
