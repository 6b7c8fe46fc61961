//! Cholesky factorization with a jitter escalation ladder.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Jitter rungs relative to the signal variance, tried in order.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-6, 1e-5, 1e-4];

#[derive(Debug, Clone)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    /// Absolute jitter that was added to the diagonal.
    pub jitter: f64,
}

impl Factor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Factors `matrix + jitter * I`, escalating through [`JITTER_LADDER`] (scaled
/// by `scale`). The unjittered rung is accepted only if every squared pivot is
/// at least `min_pivot * scale`.
pub fn factor_with_jitter(matrix: &DMatrix<f64>, scale: f64, min_pivot: f64) -> Result<Factor> {
    let mut last = 0.0;
    for (rung, rel) in JITTER_LADDER.iter().enumerate() {
        let jitter = rel * scale;
        last = jitter;
        let mut m = matrix.clone();
        if jitter > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = m.cholesky() {
            if rung == 0 && min_pivot > 0.0 {
                let smallest = chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .fold(f64::INFINITY, |a, &d| a.min(d * d));
                if smallest < min_pivot * scale {
                    continue;
                }
            }
            if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(Factor { chol, jitter });
            }
        }
    }
    Err(Error::Conditioning { jitter: last })
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b).expect("triangular factor has a zero pivot")
}

/// Solves `L^T X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.tr_solve_lower_triangular(b).expect("triangular factor has a zero pivot")
}
