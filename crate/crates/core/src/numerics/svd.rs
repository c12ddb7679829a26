//! Singular values by one-sided (Hestenes) Jacobi rotation.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

const TOLERANCE: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Singular values of a 2-D matrix, sorted descending.
pub fn singular_values<T: Scalar>(a: &Tensor<T>) -> Result<Vec<T>> {
    if a.shape().len() != 2 {
        return Err(Error::shape(
            "singular_values",
            "2-D matrix",
            format!("{:?}", a.shape()),
        ));
    }
    if a.is_empty() {
        return Err(Error::Empty("singular_values"));
    }
    a.check_finite("singular_values input")?;
    // Orthogonalize the columns of whichever orientation has fewer of them.
    let work = if a.rows() >= a.cols() { a.clone() } else { a.transpose() };
    let (m, n) = (work.rows(), work.cols());
    // Column-major copy so rotations touch contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| work.at(i, j).as_f64()).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for i in 0..m {
                    let x = cp[i];
                    let y = cq[i];
                    cp[i] = c * x - s * y;
                    cq[i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv.into_iter().map(T::of).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_singular_values() {
        let sv = singular_values(&Tensor::<f64>::eye(3)).unwrap();
        assert_eq!(sv, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn unit_outer_product_is_rank_one() {
        let u = [0.6, 0.8, 0.0];
        let v = [0.0, 1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
        let data: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let sv = singular_values(&Tensor::from_vec(&[3, 4], data).unwrap()).unwrap();
        assert!((sv[0] - 1.0).abs() < 1e-12);
        for s in &sv[1..] {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let t = Tensor::from_vec(&[1, 2], vec![1.0, f64::INFINITY]).unwrap();
        assert!(singular_values(&t).is_err());
    }

    #[test]
    fn wide_matrix_uses_transpose() {
        let t = Tensor::from_vec(&[1, 3], vec![3.0f64, 0.0, 4.0]).unwrap();
        let sv = singular_values(&t).unwrap();
        assert_eq!(sv.len(), 1);
        assert!((sv[0] - 5.0).abs() < 1e-12);
    }
}
