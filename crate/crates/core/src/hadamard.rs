//! Orthonormal Hadamard matrices (Sylvester construction) and rotations.

use crate::error::{Error, Result};
use crate::quant::Rotation;
use crate::tensor::Matrix;

/// A `dim x dim` Hadamard matrix scaled by `1/sqrt(dim)`, so `H * H^T = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct HadamardMatrix {
    dim: usize,
    matrix: Matrix,
}

impl HadamardMatrix {
    pub fn new(dim: usize) -> Result<Self> {
        hadamard_matrix(dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// The inverse rotation. Sylvester matrices are symmetric, but the
    /// transpose is taken explicitly so the intent is visible at call sites.
    pub fn transpose(&self) -> HadamardMatrix {
        HadamardMatrix {
            dim: self.dim,
            matrix: self.matrix.transpose(),
        }
    }

    /// `v * H` for a single row vector.
    pub fn rotate_row(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.matrix.vecmul(v)
    }
}

pub fn hadamard_matrix(dim: usize) -> Result<HadamardMatrix> {
    if dim == 0 || !dim.is_power_of_two() {
        return Err(Error::UnsupportedDimension {
            dim,
            reason: "Hadamard dimension must be a power of two",
        });
    }
    let mut h = vec![1.0f64];
    let mut n = 1;
    while n < dim {
        let mut next = vec![0.0; 4 * n * n];
        for i in 0..n {
            for j in 0..n {
                let v = h[i * n + j];
                next[i * 2 * n + j] = v;
                next[i * 2 * n + j + n] = v;
                next[(i + n) * 2 * n + j] = v;
                next[(i + n) * 2 * n + j + n] = -v;
            }
        }
        h = next;
        n *= 2;
    }
    let norm = 1.0 / (dim as f64).sqrt();
    for v in &mut h {
        *v *= norm;
    }
    Ok(HadamardMatrix {
        dim,
        matrix: Matrix::new(dim, dim, h)?,
    })
}

/// Applies `H * x` ([`Rotation::PreMultiply`]) or `x * H`
/// ([`Rotation::PostMultiply`]). `Rotation::None` returns a copy.
pub fn rotate(x: &Matrix, h: &HadamardMatrix, placement: Rotation) -> Result<Matrix> {
    match placement {
        Rotation::None => Ok(x.clone()),
        Rotation::PostMultiply => {
            if x.cols() != h.dim {
                return Err(Error::Dimension {
                    op: "rotate(post)",
                    left: x.shape(),
                    right: h.matrix.shape(),
                });
            }
            x.matmul(&h.matrix)
        }
        Rotation::PreMultiply => {
            if x.rows() != h.dim {
                return Err(Error::Dimension {
                    op: "rotate(pre)",
                    left: h.matrix.shape(),
                    right: x.shape(),
                });
            }
            h.matrix.matmul(x)
        }
    }
}

/// Pre-multiplies consecutive `h.dim()`-token blocks of `x` by `H`
/// (block-diagonal rotation over the sequence). Trailing rows that do not
/// fill a block are copied unchanged.
pub fn rotate_token_blocks(x: &Matrix, h: &HadamardMatrix) -> Result<Matrix> {
    let d = h.dim();
    let mut out = x.clone();
    let full = x.rows() / d * d;
    for start in (0..full).step_by(d) {
        let block = rotate(&x.slice_rows(start..start + d), h, Rotation::PreMultiply)?;
        out.data_mut()[start * x.cols()..(start + d) * x.cols()].copy_from_slice(block.data());
    }
    Ok(out)
}
