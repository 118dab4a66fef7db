//! Small dense helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix, DVector};

use crate::{Error, Result};

/// Eigenvalues of a general real square matrix.
pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    a.clone().complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a).iter().map(|l| l.norm()).fold(0.0, f64::max)
}

pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigenvalues().min()
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn ensure_finite_matrix(a: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub fn ensure_finite_vector(v: &DVector<f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Symmetrizes in place, `(A + Aᵀ)/2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

pub fn vector(values: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_of_rotation_scaling() {
        let a = DMatrix::from_row_slice(2, 2, &[-2.0, 2.0, -2.0, -2.0]);
        let mut ev = eigenvalues(&a);
        ev.sort_by(|x, y| x.im.partial_cmp(&y.im).unwrap());
        assert!((ev[0] - Complex::new(-2.0, -2.0)).norm() < 1e-12);
        assert!((ev[1] - Complex::new(-2.0, 2.0)).norm() < 1e-12);
        assert!((spectral_radius(&a) - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn symmetrize_averages() {
        let mut a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 1.0]);
        symmetrize(&mut a);
        assert_eq!(a[(0, 1)], 3.0);
        assert_eq!(a[(1, 0)], 3.0);
    }
}
