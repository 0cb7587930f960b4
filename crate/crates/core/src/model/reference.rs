//! Scalar reference forms of the discrete convolution and the activation.
//!
//! These are deliberately plain and serve as oracles for the vectorised
//! layers in [`super::layers`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slope of the activation for negative inputs.
pub const NEGATIVE_SLOPE: f64 = 0.01;

/// `0.01·x` for `x < 0`, `x` otherwise.
#[inline]
pub fn activation(x: f64) -> f64 {
    if x < 0.0 {
        NEGATIVE_SLOPE * x
    } else {
        x
    }
}

/// Derivative of [`activation`]; the kink at zero takes the `x ≥ 0` branch.
#[inline]
pub fn activation_slope(x: f64) -> f64 {
    if x < 0.0 {
        NEGATIVE_SLOPE
    } else {
        1.0
    }
}

/// Dense row-major 2-D grid of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{cols}"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Valid-padding discrete convolution `(x*k)(i,j) = Σ_m Σ_n k(m,n)·x(i−m, j−n)`.
///
/// Output position `(i, j)` corresponds to input coordinate
/// `(i·stride + kh − 1, j·stride + kw − 1)`, i.e. the first placement where the
/// flipped kernel lies entirely inside `x`.
pub fn conv2d_reference(x: &Grid, k: &Grid, stride: usize) -> Result<Grid> {
    if stride == 0 {
        return Err(Error::param("stride must be at least 1"));
    }
    if k.rows == 0 || k.cols == 0 || k.rows > x.rows || k.cols > x.cols {
        return Err(Error::ShapeMismatch {
            expected: format!("kernel no larger than {}x{}", x.rows, x.cols),
            actual: format!("{}x{}", k.rows, k.cols),
        });
    }
    let out_rows = (x.rows - k.rows) / stride + 1;
    let out_cols = (x.cols - k.cols) / stride + 1;
    let mut out = Grid::zeros(out_rows, out_cols);
    for i in 0..out_rows {
        for j in 0..out_cols {
            let base_r = i * stride + k.rows - 1;
            let base_c = j * stride + k.cols - 1;
            let mut acc = 0.0;
            for m in 0..k.rows {
                for n in 0..k.cols {
                    acc += k.at(m, n) * x.at(base_r - m, base_c - n);
                }
            }
            out.data[i * out_cols + j] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_branches() {
        assert_eq!(activation(2.0), 2.0);
        assert_eq!(activation(-1.0), -0.01);
        assert_eq!(activation(0.0), 0.0);
        assert_eq!(activation_slope(-3.0), 0.01);
        assert_eq!(activation_slope(0.0), 1.0);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Grid::zeros(5, 5);
        let k = Grid::new(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let out = conv2d_reference(&x, &k, 1).unwrap();
        assert_eq!((out.rows, out.cols), (4, 4));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Grid::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let k = Grid::new(1, 1, vec![1.0]).unwrap();
        assert_eq!(conv2d_reference(&x, &k, 1).unwrap(), x);
    }

    #[test]
    fn kernel_is_flipped() {
        // x = [1 2 3], k = [1 0] → x(i)·1 at i = 1, 2 (true convolution picks the later sample)
        let x = Grid::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let k = Grid::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(conv2d_reference(&x, &k, 1).unwrap().data, vec![2.0, 3.0]);
    }

    #[test]
    fn stride_subsamples() {
        let x = Grid::new(1, 5, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let k = Grid::new(1, 1, vec![2.0]).unwrap();
        assert_eq!(conv2d_reference(&x, &k, 2).unwrap().data, vec![2.0, 6.0, 10.0]);
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = Grid::zeros(2, 2);
        let k = Grid::zeros(3, 1);
        assert!(matches!(
            conv2d_reference(&x, &k, 1),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(conv2d_reference(&x, &Grid::zeros(1, 1), 0).is_err());
    }
}
