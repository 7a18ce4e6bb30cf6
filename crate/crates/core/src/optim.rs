//! First-order optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Algorithm {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Algorithm {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub step: u64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(algorithm: Algorithm, lr: f64) -> Self {
        Self {
            algorithm,
            lr,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(Algorithm::adam(), lr)
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(Algorithm::Sgd, lr)
    }
}

/// Applies one update to `params` in place. `names` label the tensors in
/// diagnostics. Any non-finite gradient aborts before a single parameter
/// moves.
pub fn gradient_step(params: &mut [&mut Matrix], grads: &[Matrix], names: &[String], opt: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(shape_err(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).map_or("<unnamed>", String::as_str);
        if p.shape() != g.shape() {
            return Err(shape_err(format!(
                "gradient for '{name}' has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of '{name}' at step {} is not finite",
                opt.step + 1
            )));
        }
    }
    opt.step += 1;
    match opt.algorithm {
        Algorithm::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                p.axpy(-opt.lr, g);
            }
        }
        Algorithm::Adam { beta1, beta2, eps } => {
            if opt.first_moment.len() != params.len() {
                opt.first_moment = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
                opt.second_moment = opt.first_moment.clone();
            }
            let t = opt.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let m = opt.first_moment[i].as_mut_slice();
                let v = opt.second_moment[i].as_mut_slice();
                for (((pv, &gv), mv), vv) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                    *mv = beta1 * *mv + (1.0 - beta1) * gv;
                    *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv -= opt.lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let mut p = Matrix::from_rows(&[vec![1.0, -2.0]]);
        let before = p.clone();
        let mut opt = OptimizerState::sgd(0.1);
        gradient_step(&mut [&mut p], &[Matrix::zeros(1, 2)], &names(1), &mut opt).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn sgd_moves_by_lr_times_grad() {
        let mut p = Matrix::from_rows(&[vec![1.0, -2.0]]);
        let g = Matrix::from_rows(&[vec![0.5, 3.0]]);
        let mut opt = OptimizerState::sgd(0.1);
        gradient_step(&mut [&mut p], &[g], &names(1), &mut opt).unwrap();
        assert!((p[(0, 0)] - 0.95).abs() < 1e-15);
        assert!((p[(0, 1)] - -2.3).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]);
        let g = Matrix::from_rows(&[vec![0.3, -7.0, 0.0]]);
        let mut opt = OptimizerState::adam(1e-3);
        gradient_step(&mut [&mut p], &[g], &names(1), &mut opt).unwrap();
        assert!((p[(0, 0)] + 1e-3).abs() < 1e-9);
        assert!((p[(0, 1)] - 1e-3).abs() < 1e-9);
        assert_eq!(p[(0, 2)], 0.0);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut a = Matrix::zeros(1, 1);
        let mut b = Matrix::zeros(1, 1);
        let mut opt = OptimizerState::adam(1e-3);
        let err = gradient_step(
            &mut [&mut a, &mut b],
            &[Matrix::zeros(1, 1), Matrix::scalar(f64::NAN)],
            &names(2),
            &mut opt,
        )
        .unwrap_err();
        assert!(err.to_string().contains("p1"), "{err}");
        assert_eq!(opt.step, 0);
    }
}
