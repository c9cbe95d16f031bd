//! Sampled double integrator on `ℝ²`, with LQR terminal ingredients.
//!
//! With `F = xᵀPx` from the DARE and an inactive terminal constraint, the
//! finite-horizon optimum is the LQR solution for every horizon.

use nalgebra::{DMatrix, Matrix2, Vector2};

use super::ManifoldSystem;
use crate::dare::LqrProblem;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DoubleIntegrator {
    pub dt: f64,
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub q: Matrix2<f64>,
    pub r: f64,
    pub p: Matrix2<f64>,
    /// Row gain, `u = −k·x`.
    pub k: Vector2<f64>,
    pub c: f64,
    pub input_bound: Option<f64>,
}

impl DoubleIntegrator {
    pub fn new(dt: f64, q: Matrix2<f64>, r: f64, c: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        if !(r > 0.0) {
            return Err(Error::invalid("r", "must be positive"));
        }
        let a = Matrix2::new(1.0, dt, 0.0, 1.0);
        let b = Vector2::new(0.5 * dt * dt, dt);
        let sol = LqrProblem::new(
            DMatrix::from_column_slice(2, 2, a.as_slice()),
            DMatrix::from_column_slice(2, 1, b.as_slice()),
            DMatrix::from_column_slice(2, 2, q.as_slice()),
            DMatrix::zeros(2, 1),
            DMatrix::from_element(1, 1, r),
        )?
        .solve()?;
        let p = Matrix2::from_column_slice(sol.p.as_slice());
        let k = Vector2::new(sol.k[(0, 0)], sol.k[(0, 1)]);
        Ok(Self {
            dt,
            a,
            b,
            q,
            r,
            p,
            k,
            c,
            input_bound: None,
        })
    }

    /// `dt = 0.1`, `Q = I`, `r = 0.1`, `c = 10⁶`.
    pub fn reference() -> Self {
        Self::new(0.1, Matrix2::identity(), 0.1, 1e6).expect("reference design is valid")
    }

    pub fn lqr_input(&self, x: &Vector2<f64>) -> f64 {
        -self.k.dot(x)
    }

    pub fn lqr_value(&self, x: &Vector2<f64>) -> f64 {
        x.dot(&(self.p * x))
    }

    /// Exact gradient of `V_N` with respect to the stacked inputs, by the
    /// adjoint recursion.
    pub fn cost_gradient(&self, x0: &Vector2<f64>, inputs: &[f64]) -> Vec<f64> {
        let n = inputs.len();
        let mut xs = Vec::with_capacity(n + 1);
        xs.push(*x0);
        for &u in inputs {
            let x = xs.last().unwrap();
            xs.push(self.a * x + self.b * u);
        }
        let mut lambda = 2.0 * self.p * xs[n];
        let mut grad = vec![0.0; n];
        for i in (0..n).rev() {
            grad[i] = 2.0 * self.r * inputs[i] + self.b.dot(&lambda);
            lambda = 2.0 * self.q * xs[i] + self.a.transpose() * lambda;
        }
        grad
    }
}

impl ManifoldSystem for DoubleIntegrator {
    type State = Vector2<f64>;

    fn input_dim(&self) -> usize {
        1
    }

    fn step(&self, x: &Vector2<f64>, u: &[f64]) -> Result<Vector2<f64>> {
        Ok(self.a * x + self.b * u[0])
    }

    fn distance(&self, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
        (a - b).norm()
    }

    fn equilibrium(&self) -> Vector2<f64> {
        Vector2::zeros()
    }

    fn stage_cost(&self, x: &Vector2<f64>, u: &[f64]) -> f64 {
        x.dot(&(self.q * x)) + self.r * u[0] * u[0]
    }

    fn terminal_cost(&self, x: &Vector2<f64>) -> f64 {
        self.lqr_value(x)
    }

    fn terminal_level(&self) -> f64 {
        self.c
    }

    fn local_law(&self, x: &Vector2<f64>) -> Result<Vec<f64>> {
        Ok(vec![self.lqr_input(x)])
    }

    fn input_bound(&self) -> Option<f64> {
        self.input_bound
    }

    fn sample_time(&self) -> f64 {
        self.dt
    }
}
