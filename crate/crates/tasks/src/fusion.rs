//! Feature fusion: combining the `M` per-instance representations of a
//! sample into one vector `z'`.

use serde::{Deserialize, Serialize};

use units_core::autodiff::{Tape, Var};
use units_core::error::{param_err, shape_err, Result};
use units_core::model::{Linear, LinearVars};
use units_core::tensor::Matrix;

pub const DEFAULT_PROJECTION_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    #[serde(alias = "concat")]
    Concatenation,
    Projection,
}

impl std::str::FromStr for FusionKind {
    type Err = units_core::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" | "concatenation" => Ok(Self::Concatenation),
            "projection" => Ok(Self::Projection),
            other => Err(param_err(format!("unknown fusion kind '{other}'"))),
        }
    }
}

/// Concatenation (no parameters) or a single affine projection of the
/// concatenation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub kind: FusionKind,
    /// `K_m` of each instance, in registration order.
    pub input_dims: Vec<usize>,
    /// `sum(K_m) x K'` map; present iff `kind` is projection.
    pub projection: Option<Linear>,
    pub learnable: bool,
}

impl FusionModel {
    pub fn concatenation(input_dims: Vec<usize>) -> Result<Self> {
        check_dims(&input_dims)?;
        Ok(Self {
            kind: FusionKind::Concatenation,
            input_dims,
            projection: None,
            learnable: false,
        })
    }

    /// Projection to `output_dim` initialized to the identity truncated (or
    /// zero-padded) to `output_dim` columns, so it starts as concatenation.
    pub fn projection_identity(input_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        check_dims(&input_dims)?;
        if output_dim == 0 {
            return Err(param_err("projection output dimension must be >= 1"));
        }
        let total: usize = input_dims.iter().sum();
        let mut p = Linear::zeros(total, output_dim);
        for i in 0..total.min(output_dim) {
            p.weight[(i, i)] = 1.0;
        }
        Self::projection(input_dims, p)
    }

    pub fn projection(input_dims: Vec<usize>, map: Linear) -> Result<Self> {
        check_dims(&input_dims)?;
        let total: usize = input_dims.iter().sum();
        if map.in_dim() != total || map.out_dim() == 0 {
            return Err(shape_err(format!(
                "projection maps {} -> {}, but the concatenation has {total} features",
                map.in_dim(),
                map.out_dim()
            )));
        }
        Ok(Self {
            kind: FusionKind::Projection,
            input_dims,
            projection: Some(map),
            learnable: true,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dims.iter().sum()
    }

    pub fn output_dim(&self) -> usize {
        match &self.projection {
            Some(p) => p.out_dim(),
            None => self.input_dim(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Option<LinearVars> {
        self.projection.as_ref().map(|p| p.bind(tape, trainable && self.learnable))
    }

    /// Fuses row-aligned per-instance matrices (`rows x K_m`) on the tape.
    pub fn forward(&self, tape: &mut Tape, vars: Option<LinearVars>, parts: &[Var]) -> Var {
        let z = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(parts)
        };
        match vars {
            Some(v) => v.forward(tape, z),
            None => z,
        }
    }

    /// Row-wise fusion of `N x K_m` matrices.
    pub fn fuse_batch(&self, parts: &[Matrix]) -> Result<Matrix> {
        self.check_parts(parts.iter().map(Matrix::cols))?;
        let rows = parts[0].rows();
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(shape_err("representation matrices have different row counts"));
        }
        let concat = Matrix::hstack(&parts.iter().collect::<Vec<_>>());
        Ok(match &self.projection {
            Some(p) => p.apply(&concat),
            None => concat,
        })
    }

    fn check_parts(&self, dims: impl Iterator<Item = usize>) -> Result<()> {
        let dims: Vec<usize> = dims.collect();
        if dims.is_empty() {
            return Err(param_err("nothing to fuse"));
        }
        if dims != self.input_dims {
            return Err(shape_err(format!(
                "fusion expects dims {:?}, got {dims:?}",
                self.input_dims
            )));
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match &mut self.projection {
            Some(p) => p.params_mut(),
            None => Vec::new(),
        }
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() {
        return Err(param_err("fusion needs at least one representation"));
    }
    if dims.contains(&0) {
        return Err(param_err("representation dimensions must be >= 1"));
    }
    Ok(())
}

/// `z_1 ⊕ ... ⊕ z_M`.
pub fn concat_fuse(reprs: &[&[f64]]) -> Result<Vec<f64>> {
    if reprs.is_empty() {
        return Err(param_err("nothing to fuse"));
    }
    Ok(reprs.iter().flat_map(|r| r.iter().copied()).collect())
}

/// `p(z_1 ⊕ ... ⊕ z_M)`.
pub fn projection_fuse(fm: &FusionModel, reprs: &[&[f64]]) -> Result<Vec<f64>> {
    if fm.kind != FusionKind::Projection {
        return Err(param_err("projection_fuse needs a projection fusion model"));
    }
    fm.check_parts(reprs.iter().map(|r| r.len()))?;
    let z = concat_fuse(reprs)?;
    let row = Matrix::from_vec(1, z.len(), z);
    let p = fm.projection.as_ref().ok_or_else(|| param_err("projection parameters missing"))?;
    Ok(p.apply(&row).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_examples() {
        assert_eq!(concat_fuse(&[&[1.0, 2.0], &[3.0]]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(concat_fuse(&[&[4.0, 5.0]]).unwrap(), vec![4.0, 5.0]);
        assert!(concat_fuse(&[]).is_err());
        let fm = FusionModel::concatenation(vec![4, 8, 4]).unwrap();
        assert_eq!(fm.output_dim(), 16);
    }

    #[test]
    fn projection_hand_example() {
        // Rows index outputs: [[1, 1], [0, 2]] · [3, 5] = [8, 10].
        let map = Linear {
            weight: Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).transpose(),
            bias: Matrix::zeros(1, 2),
        };
        let fm = FusionModel::projection(vec![1, 1], map).unwrap();
        assert_eq!(projection_fuse(&fm, &[&[3.0], &[5.0]]).unwrap(), vec![8.0, 10.0]);
    }

    #[test]
    fn projection_identity_and_zero() {
        let fm = FusionModel::projection_identity(vec![2, 3], 5).unwrap();
        let a = [0.5, -1.0];
        let b = [2.0, 3.0, 4.0];
        assert_eq!(projection_fuse(&fm, &[&a, &b]).unwrap(), concat_fuse(&[&a, &b]).unwrap());
        let zero = FusionModel::projection(vec![2, 3], Linear::zeros(5, 4)).unwrap();
        assert_eq!(projection_fuse(&zero, &[&a, &b]).unwrap(), vec![0.0; 4]);
        assert!(projection_fuse(&fm, &[&a]).is_err());
        assert!(projection_fuse(&FusionModel::concatenation(vec![2]).unwrap(), &[&a]).is_err());
    }
}
