//! Extreme eigenvalues of dense symmetric matrices.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::rng::RngStream;

/// Largest size solved with the dense symmetric eigensolver.
pub const DIRECT_LIMIT: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EigenMethod {
    Direct,
    ShiftedPower { iterations: usize },
}

fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn require_square(m: &Matrix) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(Error::Dimension(format!("{}x{} matrix is not square", m.rows(), m.cols())));
    }
    Ok(())
}

/// All eigenvalues in ascending order.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    require_square(m)?;
    let mut ev: Vec<f64> = to_nalgebra(m).symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Smallest eigenvalue: dense solver up to [`DIRECT_LIMIT`], otherwise power
/// iteration on `σI − M` with `σ` a Gershgorin bound on the spectrum.
pub fn min_eigenvalue(m: &Matrix, tol: f64) -> Result<(f64, EigenMethod)> {
    require_square(m)?;
    if m.rows() <= DIRECT_LIMIT {
        let ev = symmetric_eigenvalues(m)?;
        return Ok((ev[0], EigenMethod::Direct));
    }
    let sigma = (0..m.rows())
        .map(|r| m.row(r).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let (top, iterations) = power_iteration(|v| {
        let mv = m.matvec(v).expect("square");
        v.iter().zip(mv).map(|(x, y)| sigma * x - y).collect()
    }, m.rows(), tol, 100_000)?;
    Ok((sigma - top, EigenMethod::ShiftedPower { iterations }))
}

/// Dominant eigenvalue of a symmetric operator by power iteration, stopping
/// once successive Rayleigh quotients differ by at most `tol` relative.
pub fn power_iteration<F: Fn(&[f64]) -> Vec<f64>>(apply: F, dim: usize, tol: f64, max_iter: usize) -> Result<(f64, usize)> {
    let mut rng = RngStream::new(0x5eed, 0).rng();
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = 0.0;
    for it in 1..=max_iter {
        let w = apply(&v);
        let next = dot(&v, &w);
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok((0.0, it));
        }
        v = w.into_iter().map(|x| x / nw).collect();
        if it > 1 && (next - lambda).abs() <= tol * next.abs().max(f64::MIN_POSITIVE) {
            return Ok((next, it));
        }
        lambda = next;
    }
    Err(Error::InvalidArgument(format!("power iteration did not converge in {max_iter} steps")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_spectrum() {
        let m = Matrix::from_vec(2, 2, vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        let ev = symmetric_eigenvalues(&m).unwrap();
        assert!(ev[0].abs() < 1e-12 && (ev[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn power_iteration_finds_dominant() {
        let m = Matrix::from_vec(3, 3, vec![3.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, -1.0]).unwrap();
        let (top, _) = power_iteration(|v| m.matvec(v).unwrap(), 3, 1e-13, 10_000).unwrap();
        let ev = symmetric_eigenvalues(&m).unwrap();
        assert!((top - ev[2]).abs() < 1e-6);
    }
}
