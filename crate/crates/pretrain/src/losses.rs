//! Self-supervised objectives.
//!
//! Each objective has a tape form (used for training, differentiable) and a
//! plain-value convenience wrapper.

use units_core::autodiff::{Tape, Var};
use units_core::data::BinaryMask;
use units_core::error::{param_err, shape_err, Result};
use units_core::tensor::Matrix;

/// Normalized-temperature cross-entropy over `2B` embeddings.
///
/// Rows are L2-normalized; for each anchor the positive is its counterpart
/// in the other view and the other `2B - 2` embeddings are negatives. The
/// result is the mean over all `2B` anchors.
pub fn nt_xent(tape: &mut Tape, view_a: Var, view_b: Var, temperature: f64) -> Result<Var> {
    let (b, k) = tape.value(view_a).shape();
    if tape.value(view_b).shape() != (b, k) {
        return Err(shape_err(format!(
            "views have shapes {:?} and {:?}",
            (b, k),
            tape.value(view_b).shape()
        )));
    }
    if b < 2 {
        return Err(param_err("contrastive loss needs at least 2 pairs (no negatives otherwise)"));
    }
    if !(temperature > 0.0) {
        return Err(param_err(format!("temperature {temperature} must be > 0")));
    }
    let z = tape.concat_rows(&[view_a, view_b]);
    let z = tape.l2_normalize_rows(z);
    let sim = tape.matmul_t(z, z);
    let logits = tape.scale(sim, 1.0 / temperature);
    let targets = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();
    let excluded = (0..2 * b).map(Some).collect();
    Ok(tape.softmax_cross_entropy(logits, targets, excluded))
}

pub fn nt_xent_loss(view_a: &Matrix, view_b: &Matrix, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(view_a.clone());
    let b = tape.constant(view_b.clone());
    let l = nt_xent(&mut tape, a, b, temperature)?;
    Ok(tape.value(l).item())
}

/// Temporal contrast between two aligned `T' x K` per-timestep encodings:
/// timestep `t` of one view must pick out timestep `t` of the other among
/// all `2T' - 1` candidates. Symmetric in the two views.
pub fn timestamp_contrastive(tape: &mut Tape, repr_a: Var, repr_b: Var, temperature: f64) -> Result<Var> {
    let t = tape.value(repr_a).rows();
    if t < 2 {
        return Err(param_err(format!("timestamp contrast needs an overlap of >= 2 steps, got {t}")));
    }
    nt_xent(tape, repr_a, repr_b, temperature)
}

pub fn timestamp_contrastive_loss(repr_a: &Matrix, repr_b: &Matrix, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(repr_a.clone());
    let b = tape.constant(repr_b.clone());
    let l = timestamp_contrastive(&mut tape, a, b, temperature)?;
    Ok(tape.value(l).item())
}

/// Negative-sampling triplet objective on window embeddings.
///
/// `z_ref` and `z_pos` are `B x K`; `z_neg` is `P x K` and `negatives[i]`
/// lists the rows of `z_neg` used for anchor `i`. The loss is
/// `mean_i [ -log σ(z_ref_i · z_pos_i) - Σ_j log σ(-z_ref_i · z_neg_j) ]`.
pub fn triplet_embedding_loss(
    tape: &mut Tape,
    z_ref: Var,
    z_pos: Var,
    z_neg: Option<Var>,
    negatives: &[Vec<usize>],
) -> Result<Var> {
    let (b, k) = tape.value(z_ref).shape();
    if tape.value(z_pos).shape() != (b, k) || negatives.len() != b {
        return Err(shape_err("reference, positive and negative lists must align"));
    }
    let prod = tape.mul(z_ref, z_pos);
    let ones = tape.constant(Matrix::filled(k, 1, 1.0));
    let pos_scores = tape.matmul(prod, ones);
    let pos_terms = tape.log_sigmoid(pos_scores);
    let pos_sum = tape.sum(pos_terms);
    let mut total = tape.scale(pos_sum, -1.0);

    if let Some(z_neg) = z_neg {
        let p = tape.value(z_neg).rows();
        let mut select = Matrix::zeros(b, p);
        for (i, negs) in negatives.iter().enumerate() {
            for &j in negs {
                if j >= p {
                    return Err(shape_err(format!("negative index {j} out of range ({p} windows)")));
                }
                select[(i, j)] += 1.0;
            }
        }
        let scores = tape.matmul_t(z_ref, z_neg);
        let neg_scores = tape.scale(scores, -1.0);
        let neg_terms = tape.log_sigmoid(neg_scores);
        let select = tape.constant(select);
        let chosen = tape.mul(neg_terms, select);
        let neg_sum = tape.sum(chosen);
        total = tape.sub(total, neg_sum);
    }
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Mean squared error over masked cells only; `x` and `x_hat` are
/// time-major (`T x D`) and `keep` is the matching 0/1 keep-matrix.
pub fn masked_mse(tape: &mut Tape, x: Var, x_hat: Var, keep: &Matrix) -> Result<Var> {
    if tape.value(x).shape() != keep.shape() || tape.value(x_hat).shape() != keep.shape() {
        return Err(shape_err("mask and reconstruction shapes differ"));
    }
    let dropped = keep.map(|v| 1.0 - v);
    let count = dropped.sum();
    if count == 0.0 {
        return Err(param_err("mask keeps every cell; masked objective is empty"));
    }
    let diff = tape.sub(x, x_hat);
    let dropped = tape.constant(dropped);
    let masked = tape.mul(diff, dropped);
    let sq = tape.square(masked);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / count))
}

/// `Σ_{m=0} (x - x̂)² / |{m=0}|` for `D x T` inputs.
pub fn masked_reconstruction_loss(x: &Matrix, x_hat: &Matrix, m: &BinaryMask) -> Result<f64> {
    if x.shape() != m.shape() || x_hat.shape() != m.shape() {
        return Err(shape_err(format!(
            "shapes {:?}, {:?} and mask {:?} differ",
            x.shape(),
            x_hat.shape(),
            m.shape()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.transpose());
    let hv = tape.constant(x_hat.transpose());
    let l = masked_mse(&mut tape, xv, hv, &m.to_time_major())?;
    Ok(tape.value(l).item())
}

pub fn check_hybrid_weight(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(param_err(format!("hybrid weight {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `λ·contrastive + (1-λ)·reconstruction` on the tape.
pub fn hybrid(tape: &mut Tape, contrastive: Var, reconstruction: Var, lambda: f64) -> Result<Var> {
    check_hybrid_weight(lambda)?;
    let a = tape.scale(contrastive, lambda);
    let b = tape.scale(reconstruction, 1.0 - lambda);
    Ok(tape.add(a, b))
}

pub fn hybrid_loss(contrastive: f64, reconstruction: f64, lambda: f64) -> Result<f64> {
    check_hybrid_weight(lambda)?;
    Ok(lambda * contrastive + (1.0 - lambda) * reconstruction)
}
