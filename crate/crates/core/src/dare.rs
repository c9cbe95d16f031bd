//! Discrete-time algebraic Riccati equation and the associated LQR gain.
//!
//! ```text
//! 0 = AᵀPA − P + Q − (AᵀPB + N)(BᵀPB + R)⁻¹(AᵀPB + N)ᵀ
//! K = (BᵀPB + R)⁻¹(AᵀPB + N)ᵀ,   u = −Kx
//! ```
//!
//! Solved by iterating the Riccati difference equation from `P₀ = Q`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const DARE_STEP_TOL: f64 = 1e-12;
pub const DARE_MAX_ITERS: usize = 1_000_000;
pub const DARE_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct LqrProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub spectral_radius: f64,
}

impl LqrProblem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        n: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        let (nx, nu) = (a.nrows(), b.ncols());
        let shapes_ok = a.is_square()
            && b.nrows() == nx
            && q.shape() == (nx, nx)
            && n.shape() == (nx, nu)
            && r.shape() == (nu, nu);
        if !shapes_ok {
            return Err(Error::invalid("lqr", "inconsistent matrix dimensions"));
        }
        Ok(Self { a, b, q, n, r })
    }

    /// `K = (BᵀPB + R)⁻¹(AᵀPB + N)ᵀ`.
    pub fn gain(&self, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let inner = self.b.transpose() * p * &self.b + &self.r;
        let cross = &self.a.transpose() * p * &self.b + &self.n;
        inner
            .lu()
            .solve(&cross.transpose())
            .ok_or(Error::SingularInnerMatrix)
    }

    /// Frobenius norm of the DARE right-hand side at `p`.
    pub fn residual(&self, p: &DMatrix<f64>) -> Result<f64> {
        Ok((self.riccati_map(p)? - p).norm())
    }

    fn riccati_map(&self, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let k = self.gain(p)?;
        let cross = &self.a.transpose() * p * &self.b + &self.n;
        let next = self.a.transpose() * p * &self.a + &self.q - cross * k;
        Ok((&next + next.transpose()) * 0.5)
    }

    pub fn solve(&self) -> Result<DareSolution> {
        let mut p = self.q.clone();
        let mut iterations = 0;
        loop {
            let next = self.riccati_map(&p)?;
            iterations += 1;
            let step = (&next - &p).norm();
            p = next;
            if !p.iter().all(|v| v.is_finite()) || p.norm() > 1e15 {
                return Err(Error::NotStabilizable);
            }
            if step <= DARE_STEP_TOL * p.norm().max(1.0) {
                break;
            }
            if iterations >= DARE_MAX_ITERS {
                return Err(Error::NoConvergence {
                    what: "discrete algebraic Riccati equation",
                    iterations,
                    residual: step,
                });
            }
        }
        let residual = self.residual(&p)?;
        if !(residual <= DARE_RESIDUAL_TOL) {
            return Err(Error::NoConvergence {
                what: "discrete algebraic Riccati equation",
                iterations,
                residual,
            });
        }
        if !is_positive_definite(&p) {
            return Err(Error::NotPositiveDefinite { what: "DARE solution P" });
        }
        let k = self.gain(&p)?;
        let spectral_radius = spectral_radius(&(&self.a - &self.b * &k));
        if !(spectral_radius < 1.0) {
            return Err(Error::NotStabilizable);
        }
        Ok(DareSolution {
            p,
            k,
            iterations,
            residual,
            spectral_radius,
        })
    }
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.is_square()
        && (m - m.transpose()).norm() <= 1e-9 * m.norm().max(1.0)
        && m.clone().cholesky().is_some()
}

/// Rank of `[B, AB, …, A^{n−1}B]`.
pub fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for i in 0..n {
        ctrb.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    ctrb.rank(1e-10 * ctrb.norm().max(1.0))
}
