//! Numerical Jacobians and the rectangular log-volume `sum_i log sigma_i`.

use super::EstimatorError;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, EstimatorError> {
        if data.len() != rows * cols {
            return Err(EstimatorError::Dimension {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { rows: n, cols: n, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Columns of `self` (or of its transpose when wider than tall), so that
    /// the count is `min(rows, cols)`.
    fn narrow_columns(&self) -> Vec<Vec<f64>> {
        if self.cols <= self.rows {
            (0..self.cols).map(|j| (0..self.rows).map(|i| self.get(i, j)).collect()).collect()
        } else {
            self.data.chunks_exact(self.cols).map(<[f64]>::to_vec).collect()
        }
    }
}

/// Central differences: entry `(i, j) = (f_i(x + eps e_j) - f_i(x - eps e_j)) / (2 eps)`.
pub fn numerical_jacobian<F, E>(f: F, x: &[f64], eps: f64) -> Result<Matrix, EstimatorError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, E>,
    EstimatorError: From<E>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(EstimatorError::InvalidStep(eps));
    }
    let d = x.len();
    let mut columns = Vec::with_capacity(d);
    let mut probe = x.to_vec();
    let mut m = None;
    for j in 0..d {
        probe[j] = x[j] + eps;
        let plus = f(&probe)?;
        probe[j] = x[j] - eps;
        let minus = f(&probe)?;
        probe[j] = x[j];
        if plus.len() != minus.len() || m.is_some_and(|m| m != plus.len()) {
            return Err(EstimatorError::Dimension {
                expected: m.unwrap_or(minus.len()),
                got: plus.len(),
            });
        }
        m = Some(plus.len());
        let col: Vec<f64> = plus.iter().zip(&minus).map(|(p, q)| (p - q) / (2.0 * eps)).collect();
        if !col.iter().all(|v| v.is_finite()) {
            return Err(EstimatorError::NonFinite);
        }
        columns.push(col);
    }
    let rows = match m {
        Some(m) => m,
        None => f(x)?.len(),
    };
    let mut data = vec![0.0; rows * d];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[i * d + j] = *v;
        }
    }
    Matrix::new(rows, d, data)
}

/// Singular values, descending, via one-sided (Hestenes) Jacobi rotations.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let mut cols = a.narrow_columns();
    let n = cols.len();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = cols[p].iter().zip(&cols[q]).fold((0.0, 0.0, 0.0), |(a, b, g), (x, y)| {
                    (a + x * x, b + y * y, g + x * y)
                });
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// `sum log sigma_i` over singular values above
/// `tau = max(m, D) * sigma_max * 1e-12`.
pub fn jacobian_logvol(j: &Matrix) -> Result<f64, EstimatorError> {
    if !j.data.iter().all(|v| v.is_finite()) {
        return Err(EstimatorError::NonFinite);
    }
    let sv = singular_values(j);
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    if !(sigma_max > 0.0) {
        return Err(EstimatorError::DegenerateJacobian);
    }
    let tau = j.rows.max(j.cols) as f64 * sigma_max * 1e-12;
    Ok(sv.iter().filter(|&&s| s > tau).map(|s| s.ln()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    #[test]
    fn jacobian_of_linear_map_and_square() {
        let a = [[1.0, -2.0, 0.5], [3.0, 0.25, -1.0]];
        let f = |x: &[f64]| -> Result<Vec<f64>, Infallible> {
            Ok(a.iter().map(|r| r.iter().zip(x).map(|(w, v)| w * v).sum()).collect())
        };
        let j = numerical_jacobian(f, &[0.3, 0.1, -0.7], 1e-4).unwrap();
        assert_eq!((j.rows(), j.cols()), (2, 3));
        for i in 0..2 {
            for k in 0..3 {
                assert!((j.get(i, k) - a[i][k]).abs() < 1e-10);
            }
        }
        let sq = |x: &[f64]| -> Result<Vec<f64>, Infallible> { Ok(vec![x[0] * x[0]]) };
        let j = numerical_jacobian(sq, &[3.0], 1e-4).unwrap();
        assert!((j.get(0, 0) - 6.0).abs() < 1e-6);
        assert!(matches!(
            numerical_jacobian(sq, &[3.0], 0.0),
            Err(EstimatorError::InvalidStep(_))
        ));
    }

    #[test]
    fn logvol_hand_cases() {
        assert_eq!(jacobian_logvol(&Matrix::identity(5)).unwrap(), 0.0);
        let d = Matrix::new(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        assert!((jacobian_logvol(&d).unwrap() - 6f64.ln()).abs() < 1e-14);
        let embed = Matrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(jacobian_logvol(&embed).unwrap(), 0.0);
        let wide = Matrix::new(2, 3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap();
        assert!((jacobian_logvol(&wide).unwrap() - 2f64.ln()).abs() < 1e-14);
        let zero = Matrix::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(jacobian_logvol(&zero), Err(EstimatorError::DegenerateJacobian)));
    }

    #[test]
    fn rank_deficient_matrix_drops_null_directions() {
        // rank one: u v^T with |u| = 2, |v| = 3
        let u = [2.0, 0.0];
        let v = [0.0, 3.0, 0.0];
        let data = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let m = Matrix::new(2, 3, data).unwrap();
        assert!((jacobian_logvol(&m).unwrap() - 6f64.ln()).abs() < 1e-12);
    }
}
