//! Terminal cost, local control law and terminal set for attitude MPC.
//!
//! The local chart is `φ(ζ, ω) = (exp(hat ζ), exp(h·hat ω))`. In these
//! coordinates the dynamics linearize to a discrete double integrator and the
//! trace-form stage cost has the quadratic expansion
//! `½ζᵀQ̃_gζ + ½ωᵀQ̃_fω + ½τᵀR̃τ` with `Q̃ = tr(Q)I − Q`. The DARE solution `P`
//! on that model gives `F = ξᵀPξ` and `κ = −Kξ`, and a sublevel `{F ≤ c}` is
//! certified by sampling to satisfy the local-law conditions on the true
//! nonlinear dynamics.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dare::{controllability_rank, is_positive_definite, LqrProblem};
use crate::error::{Error, Result};
use crate::lgvi::{InertiaMatrix, Lgvi, SpacecraftState, Torque};
use crate::so3::{exp_so3, hat_matrix, log_so3_with, BranchConvention};

pub type Matrix6 = SMatrix<f64, 6, 6>;
pub type Matrix6x3 = SMatrix<f64, 6, 3>;
pub type Matrix3x6 = SMatrix<f64, 3, 6>;

/// Tolerance on the local-law decrease condition.
pub const DECREASE_TOL: f64 = 1e-10;

/// `tr(Q)·I − Q`.
pub fn tilde_transform(q: &Matrix3<f64>) -> Matrix3<f64> {
    Matrix3::identity() * q.trace() - q
}

/// Both sides of `tr(hat(a)ᵀ R hat(b)) = aᵀ(tr(R)I − R)b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkewTraceIdentity {
    pub trace_form: f64,
    pub quadratic_form: f64,
}

impl SkewTraceIdentity {
    pub fn discrepancy(&self) -> f64 {
        (self.trace_form - self.quadratic_form).abs()
    }
}

pub fn skew_trace_identity_check(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    r: &Matrix3<f64>,
) -> SkewTraceIdentity {
    SkewTraceIdentity {
        trace_form: (hat_matrix(a).transpose() * r * hat_matrix(b)).trace(),
        quadratic_form: a.dot(&(tilde_transform(r) * b)),
    }
}

/// Discrete linearization in `(ζ, ω)` coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linearization {
    pub a: Matrix6,
    pub b: Matrix6x3,
}

impl Linearization {
    pub fn controllability_rank(&self) -> usize {
        controllability_rank(&dyn_matrix(&self.a), &dyn_matrix(&self.b))
    }
}

/// `A = [I hI; 0 I]`, `B = [0; hI]`: the double integrator in `(ζ, ω)`
/// with unit effective inertia.
pub fn build_linearization(h: f64) -> Result<Linearization> {
    linearization_with_input_map(h, Matrix3::identity())
}

/// Linearization of the integrator itself. Expanding `f = exp(h·hat ω)` in
/// `fJ − Jfᵀ = M` gives `J̃ω_{k+1} = J̃ω_k + hτ` with `J̃ = tr(J)I − J`, so
/// `B = [0; hJ̃⁻¹]`. Coincides with [`build_linearization`] when `J̃ = I`.
pub fn build_linearization_for(h: f64, inertia: &InertiaMatrix) -> Result<Linearization> {
    let effective = tilde_transform(inertia.matrix());
    let inv = effective
        .try_inverse()
        .ok_or(Error::NotPositiveDefinite { what: "tr(J)I - J" })?;
    linearization_with_input_map(h, inv)
}

fn linearization_with_input_map(h: f64, input_map: Matrix3<f64>) -> Result<Linearization> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("h", format!("step must be positive, got {h}")));
    }
    let mut a = Matrix6::identity();
    a.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(Matrix3::identity() * h));
    let mut b = Matrix6x3::zeros();
    b.fixed_view_mut::<3, 3>(3, 0).copy_from(&(input_map * h));
    Ok(Linearization { a, b })
}

/// Weights of the trace-form stage cost
/// `L = tr(Q_g(I − g)) + tr(Q_f(I − f))/h² + ½tr(hat(τ)ᵀ R hat(τ))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageWeights {
    pub q_g: Matrix3<f64>,
    pub q_f: Matrix3<f64>,
    pub r: Matrix3<f64>,
    /// Fraction of the stage cost the terminal cost must dominate, in (0, 1).
    pub lambda: f64,
}

impl StageWeights {
    pub fn new(q_g: Matrix3<f64>, q_f: Matrix3<f64>, r: Matrix3<f64>, lambda: f64) -> Result<Self> {
        for (name, m) in [("Q_g", &q_g), ("Q_f", &q_f), ("R", &r)] {
            if !is_positive_definite(&dyn_matrix(m)) {
                return Err(Error::invalid(name, "must be symmetric positive-definite"));
            }
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::invalid(
                "lambda",
                format!("must lie strictly between 0 and 1, got {lambda}"),
            ));
        }
        Ok(Self { q_g, q_f, r, lambda })
    }

    /// `Q_g = I`, `Q_f = J`, `R = 2I`, `λ = 0.1`.
    pub fn reference(inertia: &InertiaMatrix) -> Self {
        Self {
            q_g: Matrix3::identity(),
            q_f: *inertia.matrix(),
            r: Matrix3::identity() * 2.0,
            lambda: 0.1,
        }
    }

    pub fn stage_cost(&self, state: &SpacecraftState, torque: &Torque, h: f64) -> f64 {
        let eye = Matrix3::identity();
        let u = hat_matrix(torque);
        (self.q_g * (eye - state.g.matrix())).trace()
            + (self.q_f * (eye - state.f.matrix())).trace() / (h * h)
            + 0.5 * (u.transpose() * self.r * u).trace()
    }
}

/// Hessian blocks of `L' = L/λ` at the equilibrium.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticCostData {
    pub q: Matrix6,
    pub n_cross: Matrix6x3,
    pub r_dare: Matrix3<f64>,
}

pub fn build_cost_data(w: &StageWeights) -> Result<QuadraticCostData> {
    let w = StageWeights::new(w.q_g, w.q_f, w.r, w.lambda)?;
    let scale = 1.0 / w.lambda;
    let mut q = Matrix6::zeros();
    q.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(tilde_transform(&w.q_g) * scale));
    q.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(tilde_transform(&w.q_f) * scale));
    let r_dare = tilde_transform(&w.r) * scale;
    if !is_positive_definite(&dyn_matrix(&q)) {
        return Err(Error::NotPositiveDefinite {
            what: "tilde-transformed state weights",
        });
    }
    if !is_positive_definite(&dyn_matrix(&r_dare)) {
        return Err(Error::NotPositiveDefinite {
            what: "tilde-transformed input weight",
        });
    }
    Ok(QuadraticCostData {
        q,
        n_cross: Matrix6x3::zeros(),
        r_dare,
    })
}

/// DARE solution with its gain and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LqrDesign {
    pub p: Matrix6,
    pub k: Matrix3x6,
    pub residual: f64,
    pub spectral_radius: f64,
    pub iterations: usize,
}

fn lqr_problem(lin: &Linearization, cost: &QuadraticCostData) -> Result<LqrProblem> {
    LqrProblem::new(
        dyn_matrix(&lin.a),
        dyn_matrix(&lin.b),
        dyn_matrix(&cost.q),
        dyn_matrix(&cost.n_cross),
        dyn_matrix(&cost.r_dare),
    )
}

pub fn solve_dare(lin: &Linearization, cost: &QuadraticCostData) -> Result<LqrDesign> {
    let sol = lqr_problem(lin, cost)?.solve()?;
    Ok(LqrDesign {
        p: Matrix6::from_iterator(sol.p.iter().copied()),
        k: Matrix3x6::from_iterator(sol.k.iter().copied()),
        residual: sol.residual,
        spectral_radius: sol.spectral_radius,
        iterations: sol.iterations,
    })
}

/// `K = (BᵀPB + R)⁻¹(AᵀPB + N)ᵀ`.
pub fn lqr_gain(p: &Matrix6, lin: &Linearization, cost: &QuadraticCostData) -> Result<Matrix3x6> {
    let k = lqr_problem(lin, cost)?.gain(&dyn_matrix(p))?;
    Ok(Matrix3x6::from_iterator(k.iter().copied()))
}

pub fn dare_residual(p: &Matrix6, lin: &Linearization, cost: &QuadraticCostData) -> Result<f64> {
    lqr_problem(lin, cost)?.residual(&dyn_matrix(p))
}

/// Settings of the sampling-based terminal level certification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    pub n_samples: usize,
    /// Multiplier applied to the largest certified level.
    pub shrink: f64,
    pub c_min: f64,
    pub bisection_steps: usize,
    pub seed: u64,
    /// Minimum solvability margin required of every certified step.
    pub min_step_margin: f64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            shrink: 0.9,
            c_min: 1e-8,
            bisection_steps: 60,
            seed: 0,
            min_step_margin: 1e-6,
        }
    }
}

/// Worst-case values of the three local-law conditions over a sample set.
/// Each field is `≤ 0` (decrease: `≤ DECREASE_TOL`) when the condition holds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMargins {
    /// `max ‖κ(x)‖_∞ − τ_max`; `None` when torque is unbounded.
    pub input: Option<f64>,
    /// `max F(x⁺) − c`.
    pub invariance: f64,
    /// `max F(x⁺) − F(x) + L(x, κ(x))`.
    pub decrease: f64,
    /// Samples whose successor could not be computed (out of chart or
    /// unsolvable step).
    pub failures: usize,
}

impl ConditionMargins {
    pub fn holds(&self) -> bool {
        self.failures == 0
            && self.input.is_none_or(|v| v <= 0.0)
            && self.invariance <= 0.0
            && self.decrease <= DECREASE_TOL
    }

    /// Largest violation across the three conditions.
    pub fn max_violation(&self) -> f64 {
        let mut v = self.invariance.max(self.decrease);
        if let Some(i) = self.input {
            v = v.max(i);
        }
        if self.failures > 0 {
            v = f64::INFINITY;
        }
        v
    }

    fn combine(self, other: Self) -> Self {
        Self {
            input: match (self.input, other.input) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            },
            invariance: self.invariance.max(other.invariance),
            decrease: self.decrease.max(other.decrease),
            failures: self.failures + other.failures,
        }
    }

    fn empty() -> Self {
        Self {
            input: None,
            invariance: f64::NEG_INFINITY,
            decrease: f64::NEG_INFINITY,
            failures: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub n_samples: usize,
    pub seed: u64,
    pub max_violation: f64,
    pub margins: ConditionMargins,
}

/// Terminal cost `F`, local law `κ` and terminal set `{F ≤ c}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalDesign {
    pub lgvi: Lgvi,
    pub weights: StageWeights,
    pub p: Matrix6,
    pub k: Matrix3x6,
    pub c: f64,
    pub tau_max: Option<f64>,
    pub convention: BranchConvention,
    pub dare_residual: f64,
    pub spectral_radius: f64,
    pub certification: Option<Certification>,
}

/// A chart point `ξ = (ζ, ω)` with `ξᵀPξ` scaled to a prescribed level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TerminalSample {
    pub xi: Vector6<f64>,
    pub state: SpacecraftState,
}

impl TerminalDesign {
    /// Linearization, cost Hessian, DARE and gain; the level `c` is left at
    /// zero until [`TerminalDesign::calibrate`].
    pub fn draft(
        lgvi: Lgvi,
        weights: StageWeights,
        tau_max: Option<f64>,
        convention: BranchConvention,
    ) -> Result<Self> {
        let lin = build_linearization_for(lgvi.h, &lgvi.inertia)?;
        let cost = build_cost_data(&weights)?;
        let lqr = solve_dare(&lin, &cost)?;
        Ok(Self {
            lgvi,
            weights,
            p: lqr.p,
            k: lqr.k,
            c: 0.0,
            tau_max,
            convention,
            dare_residual: lqr.residual,
            spectral_radius: lqr.spectral_radius,
            certification: None,
        })
    }

    /// Full pipeline: draft plus calibration of `c`.
    pub fn compute(
        lgvi: Lgvi,
        weights: StageWeights,
        tau_max: Option<f64>,
        convention: BranchConvention,
        settings: &CalibrationSettings,
    ) -> Result<Self> {
        let mut design = Self::draft(lgvi, weights, tau_max, convention)?;
        design.calibrate(settings)?;
        Ok(design)
    }

    pub fn h(&self) -> f64 {
        self.lgvi.h
    }

    /// `ξ = (ζ, ω)` with `hat ζ = Log g`, `hat(hω) = Log f`.
    pub fn chart(&self, state: &SpacecraftState) -> Vector6<f64> {
        let zeta = log_so3_with(&state.g, self.convention);
        let hw = log_so3_with(&state.f, self.convention);
        let omega = hw.vector() / self.h();
        Vector6::new(zeta.vector().x, zeta.vector().y, zeta.vector().z, omega.x, omega.y, omega.z)
    }

    pub fn in_chart(&self, state: &SpacecraftState) -> bool {
        state.g.angle() < PI && state.f.angle() < PI
    }

    /// `F(x) = ξᵀPξ`.
    pub fn terminal_cost(&self, state: &SpacecraftState) -> f64 {
        let xi = self.chart(state);
        xi.dot(&(self.p * xi))
    }

    pub fn in_terminal_set(&self, state: &SpacecraftState) -> bool {
        self.in_chart(state) && self.terminal_cost(state) <= self.c
    }

    /// `κ(x) = −Kξ`, defined on the open chart.
    pub fn local_law(&self, state: &SpacecraftState) -> Result<Torque> {
        if !self.in_chart(state) {
            return Err(Error::OutOfChart);
        }
        Ok(self.feedback(state))
    }

    /// `−Kξ` evaluated through the principal logarithm everywhere, including
    /// on the branch cut, where the convention picks the sign.
    pub fn feedback(&self, state: &SpacecraftState) -> Torque {
        -(self.k * self.chart(state))
    }

    pub fn stage_cost(&self, state: &SpacecraftState, torque: &Torque) -> f64 {
        self.weights.stage_cost(state, torque, self.h())
    }

    pub fn chart_inverse(&self, xi: &Vector6<f64>) -> SpacecraftState {
        let zeta = Vector3::new(xi[0], xi[1], xi[2]);
        let omega = Vector3::new(xi[3], xi[4], xi[5]);
        SpacecraftState::new(exp_so3(&zeta), exp_so3(&(omega * self.h())))
    }

    /// Largest level whose ellipsoid stays inside the chart
    /// (`‖ζ‖ < π`, `h‖ω‖ < π`).
    pub fn chart_level(&self) -> f64 {
        let p_inv = self.p.try_inverse().unwrap_or_else(Matrix6::zeros);
        let block_max = |r: usize, s: f64| {
            let block = p_inv.fixed_view::<3, 3>(r, r).into_owned();
            let lmax = block.symmetric_eigenvalues().max();
            (PI * s).powi(2) / lmax
        };
        block_max(0, 1.0).min(block_max(3, 1.0 / self.h())) * (1.0 - 1e-9)
    }

    /// Reproducible sample set: directions drawn uniformly on the sphere
    /// in the `P`-metric; even indices lie on `{F = level}`, odd indices
    /// inside it.
    pub fn sample_level_set(&self, level: f64, n: usize, seed: u64) -> Vec<TerminalSample> {
        let directions = unit_directions(n, seed);
        let chol = self
            .p
            .cholesky()
            .expect("DARE solution is positive-definite");
        let l_t = chol.l().transpose();
        directions
            .into_iter()
            .map(|(d, radius)| {
                let xi = l_t
                    .solve_upper_triangular(&(d * (radius * level.sqrt())))
                    .expect("Cholesky factor is invertible");
                TerminalSample {
                    xi,
                    state: self.chart_inverse(&xi),
                }
            })
            .collect()
    }

    /// Evaluates the local-law conditions at `level` on the given states.
    pub fn check_conditions(&self, states: &[SpacecraftState], level: f64, min_step_margin: f64) -> ConditionMargins {
        states
            .par_iter()
            .map(|x| self.check_one(x, level, min_step_margin))
            .reduce(ConditionMargins::empty, ConditionMargins::combine)
    }

    fn check_one(&self, x: &SpacecraftState, level: f64, min_step_margin: f64) -> ConditionMargins {
        let failed = ConditionMargins {
            failures: 1,
            ..ConditionMargins::empty()
        };
        let Ok(tau) = self.local_law(x) else {
            return failed;
        };
        let input = self.tau_max.map(|t| tau.amax() - t);
        let Ok(next) = self.lgvi.step_checked(x, &tau, min_step_margin) else {
            return ConditionMargins { input, ..failed };
        };
        if !self.in_chart(&next.state) {
            return ConditionMargins { input, ..failed };
        }
        let f_next = self.terminal_cost(&next.state);
        ConditionMargins {
            input,
            invariance: f_next - level,
            decrease: f_next - self.terminal_cost(x) + self.stage_cost(x, &tau),
            failures: 0,
        }
    }

    fn certify_level(&self, level: f64, settings: &CalibrationSettings) -> ConditionMargins {
        let states: Vec<_> = self
            .sample_level_set(level, settings.n_samples, settings.seed)
            .into_iter()
            .map(|s| s.state)
            .collect();
        self.check_conditions(&states, level, settings.min_step_margin)
    }

    /// Bisection (in log scale) for the largest level passing the sampled
    /// conditions, followed by the safety shrink.
    pub fn calibrate(&mut self, settings: &CalibrationSettings) -> Result<f64> {
        let c = calibrate_c(self, settings)?;
        self.c = c;
        let margins = self.certify_level(c, settings);
        self.certification = Some(Certification {
            n_samples: settings.n_samples,
            seed: settings.seed,
            max_violation: margins.max_violation(),
            margins,
        });
        Ok(c)
    }

    /// Checks the local-law conditions on fresh samples of `{F ≤ level}`.
    pub fn certify_at(
        &self,
        level: f64,
        n_samples: usize,
        seed: u64,
        min_step_margin: f64,
    ) -> ConditionMargins {
        let settings = CalibrationSettings {
            n_samples,
            seed,
            min_step_margin,
            ..CalibrationSettings::default()
        };
        self.certify_level(level, &settings)
    }

    /// Re-certification at the design level.
    pub fn certify(&self, n_samples: usize, seed: u64, min_step_margin: f64) -> ConditionMargins {
        self.certify_at(self.c, n_samples, seed, min_step_margin)
    }
}

/// Largest certified terminal level for a drafted design (its `c` is
/// ignored).
pub fn calibrate_c(design: &TerminalDesign, settings: &CalibrationSettings) -> Result<f64> {
    if settings.n_samples == 0 || !(settings.shrink > 0.0 && settings.shrink <= 1.0) {
        return Err(Error::invalid(
            "calibration",
            "need n_samples > 0 and shrink in (0, 1]",
        ));
    }
    let passes = |level: f64| design.certify_level(level, settings).holds();
    let hi_bound = design.chart_level();
    let lo_bound = settings.c_min.min(hi_bound);
    if !passes(lo_bound) {
        return Err(Error::NoFeasibleC { smallest: lo_bound });
    }
    let accepted = if passes(hi_bound) {
        hi_bound
    } else {
        let (mut lo, mut hi) = (lo_bound.ln(), hi_bound.ln());
        for _ in 0..settings.bisection_steps {
            let mid = 0.5 * (lo + hi);
            if passes(mid.exp()) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo.exp()
    };
    Ok(accepted * settings.shrink)
}

fn unit_directions(n: usize, seed: u64) -> Vec<(Vector6<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let d = loop {
                let v = Vector6::<f64>::from_fn(|_, _| rng.sample(StandardNormal));
                let norm = v.norm();
                if norm > 1e-12 {
                    break v / norm;
                }
            };
            let radius = if i % 2 == 0 {
                1.0
            } else {
                rng.random::<f64>().powf(1.0 / 6.0)
            };
            (d, radius)
        })
        .collect()
}

pub(crate) fn dyn_matrix<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}
