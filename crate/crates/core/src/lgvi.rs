//! Lie group variational integrator for rigid-body attitude.
//!
//! The discrete dynamics are
//!
//! ```text
//! g_{k+1} = g_k f_k
//! f_{k+1} J − J f_{k+1}ᵀ = J f_k − f_kᵀ J + h² hat(τ_k)
//! ```
//!
//! The implicit second equation is solved by writing `f_{k+1} = (M/2 + S) J⁻¹`
//! with `M` the right-hand side, which turns orthogonality of `f_{k+1}` into
//! the symmetric matrix Riccati equation `(S − M/2)(S + M/2) = J²`.

use nalgebra::{Matrix3, SMatrix, SVector, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{
    exp_so3, geodesic_distance, hat_matrix, log_so3, project_so3, vee_unchecked, RotationMatrix,
};

/// Torque in body axes (N·m). The so(3) control is `hat(τ)`.
pub type Torque = Vector3<f64>;

/// `f'` is re-projected onto SO(3) only if its orthogonality error exceeds this.
pub const REPROJECTION_TOL: f64 = 1e-12;

const RICCATI_TOL: f64 = 1e-12;
const RICCATI_ACCEPT: f64 = 1e-10;
const RICCATI_MAX_ITERS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InertiaMatrix {
    j: Matrix3<f64>,
    j_inv: Matrix3<f64>,
    j_sq: Matrix3<f64>,
}

impl InertiaMatrix {
    pub fn new(j: Matrix3<f64>) -> Result<Self> {
        if !((j - j.transpose()).norm() <= 1e-12) {
            return Err(Error::NotPositiveDefinite { what: "inertia J" });
        }
        let eig = SymmetricEigen::new(j);
        if !(eig.eigenvalues.min() > 0.0) {
            return Err(Error::NotPositiveDefinite { what: "inertia J" });
        }
        let j_inv = j.try_inverse().ok_or(Error::NotPositiveDefinite { what: "inertia J" })?;
        Ok(Self {
            j,
            j_inv,
            j_sq: j * j,
        })
    }

    pub fn diagonal(d: [f64; 3]) -> Result<Self> {
        Self::new(Matrix3::from_diagonal(&Vector3::from(d)))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.j
    }

    pub fn inverse(&self) -> &Matrix3<f64> {
        &self.j_inv
    }
}

impl Default for InertiaMatrix {
    fn default() -> Self {
        Self::diagonal([1.0, 1.2, 1.5]).expect("default inertia is SPD")
    }
}

/// Attitude `g` and one-step attitude increment `f`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacecraftState {
    pub g: RotationMatrix,
    pub f: RotationMatrix,
}

impl SpacecraftState {
    pub fn new(g: RotationMatrix, f: RotationMatrix) -> Self {
        Self { g, f }
    }

    pub fn identity() -> Self {
        Self::at_rest(RotationMatrix::identity())
    }

    pub fn at_rest(g: RotationMatrix) -> Self {
        Self {
            g,
            f: RotationMatrix::identity(),
        }
    }

    /// State with body rate `omega` (rad/s), i.e. `f = exp(h·hat(ω))`.
    pub fn with_rate(g: RotationMatrix, omega: &Vector3<f64>, h: f64) -> Self {
        Self {
            g,
            f: exp_so3(&(omega * h)),
        }
    }

    /// `vee(Log f)/h`.
    pub fn angular_velocity(&self, h: f64) -> Vector3<f64> {
        log_so3(&self.f).vector() / h
    }

    /// Product metric on SO(3)×SO(3): the larger of the two geodesic distances.
    pub fn distance(&self, other: &Self) -> f64 {
        geodesic_distance(&self.g, &other.g).max(geodesic_distance(&self.f, &other.f))
    }
}

/// `M = J f − fᵀ J + h² hat(τ)`; skew-symmetric by construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentumMatrix(Matrix3<f64>);

impl MomentumMatrix {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let asymmetry = (m + m.transpose()).norm();
        if !(asymmetry <= 1e-12) {
            return Err(Error::NotSkew { asymmetry });
        }
        Ok(Self(m))
    }

    pub fn from_axial(v: &Vector3<f64>) -> Self {
        Self(hat_matrix(v))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

pub fn momentum_matrix(
    state: &SpacecraftState,
    torque: &Torque,
    h: f64,
    inertia: &InertiaMatrix,
) -> MomentumMatrix {
    let j = inertia.matrix();
    let f = state.f.matrix();
    MomentumMatrix(j * f - f.transpose() * j + hat_matrix(torque) * (h * h))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Solvability {
    pub solvable: bool,
    /// `λ_min(J² + M²/4)`.
    pub margin: f64,
}

pub fn check_solvability(m: &MomentumMatrix, inertia: &InertiaMatrix) -> Solvability {
    let margin = solvability_margin(m, inertia);
    Solvability {
        solvable: margin >= 0.0,
        margin,
    }
}

fn solvability_margin(m: &MomentumMatrix, inertia: &InertiaMatrix) -> f64 {
    let c = inertia.j_sq + m.0 * m.0 * 0.25;
    SymmetricEigen::new(c).eigenvalues.min()
}

/// Symmetric solution `S` of `(S − M/2)(S + M/2) = J²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiccatiSolution {
    pub s: Matrix3<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// `‖(M/2)S − S(M/2) − S² + J² + M²/4‖_F`.
pub fn riccati_residual(s: &Matrix3<f64>, m: &MomentumMatrix, inertia: &InertiaMatrix) -> f64 {
    let half = m.0 * 0.5;
    (half * s - s * half - s * s + inertia.j_sq + half * half).norm()
}

/// Newton iteration on `G(S) = S² + S·H − H·S − J² − H²`, `H = M/2`, started
/// from the SPD square root of `J² + H²`. Each step solves the Sylvester
/// equation `(S − H)Δ + Δ(S + H) = −G(S)`.
pub fn solve_step_riccati(m: &MomentumMatrix, inertia: &InertiaMatrix) -> Result<RiccatiSolution> {
    let h = m.0 * 0.5;
    let c = inertia.j_sq + h * h;
    let eig = SymmetricEigen::new(c);
    let margin = eig.eigenvalues.min();
    if !(margin >= 0.0) {
        return Err(Error::NotSolvable { margin });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let mut s = eig.eigenvectors * Matrix3::from_diagonal(&roots) * eig.eigenvectors.transpose();
    s = (s + s.transpose()) * 0.5;

    let scale = inertia.j_sq.norm().max(1.0);
    let g_of = |s: &Matrix3<f64>| s * s + s * h - h * s - c;
    let mut g = g_of(&s);
    let mut residual = g.norm();
    let mut iterations = 0;
    while residual > RICCATI_TOL * scale && iterations < RICCATI_MAX_ITERS {
        let Some(delta) = solve_sylvester(&(s - h), &(s + h), &(-g)) else {
            break;
        };
        let delta = (delta + delta.transpose()) * 0.5;
        s += delta;
        g = g_of(&s);
        let next = g.norm();
        iterations += 1;
        if delta.norm() <= 1e-15 * s.norm() && next >= residual {
            residual = next;
            break;
        }
        residual = next;
    }
    if !(residual <= RICCATI_ACCEPT * scale) {
        return Err(Error::NoConvergence {
            what: "step Riccati equation",
            iterations,
            residual,
        });
    }
    Ok(RiccatiSolution {
        s,
        iterations,
        residual,
    })
}

/// Solves `A X + X B = C` through its 9×9 Kronecker form.
fn solve_sylvester(a: &Matrix3<f64>, b: &Matrix3<f64>, c: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    // vec(AX + XB) = (I ⊗ A + Bᵀ ⊗ I) vec(X), column-major vec.
    let mut k = SMatrix::<f64, 9, 9>::zeros();
    for col in 0..3 {
        for row in 0..3 {
            let i = col * 3 + row;
            for p in 0..3 {
                k[(i, col * 3 + p)] += a[(row, p)];
                k[(i, p * 3 + row)] += b[(p, col)];
            }
        }
    }
    let rhs = SVector::<f64, 9>::from_column_slice(c.as_slice());
    let x = k.lu().solve(&rhs)?;
    Some(Matrix3::from_column_slice(x.as_slice()))
}

/// One integrator step with its diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: SpacecraftState,
    pub momentum: MomentumMatrix,
    pub margin: f64,
    /// `‖f'J − Jf'ᵀ − M‖_F`.
    pub implicit_residual: f64,
}

/// Fixed physical parameters of the integrator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lgvi {
    pub inertia: InertiaMatrix,
    pub h: f64,
}

impl Lgvi {
    pub fn new(inertia: InertiaMatrix, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::invalid("h", format!("step must be positive, got {h}")));
        }
        Ok(Self { inertia, h })
    }

    /// Advances one step, rejecting steps whose solvability margin falls
    /// below `min_margin`.
    pub fn step_checked(
        &self,
        state: &SpacecraftState,
        torque: &Torque,
        min_margin: f64,
    ) -> Result<StepOutcome> {
        if !torque.iter().all(|t| t.is_finite()) {
            return Err(Error::invalid("torque", "entries must be finite"));
        }
        let m = momentum_matrix(state, torque, self.h, &self.inertia);
        let margin = solvability_margin(&m, &self.inertia);
        if !(margin >= min_margin) {
            return Err(Error::NotSolvable { margin });
        }
        let sol = solve_step_riccati(&m, &self.inertia)?;
        let mut f_next = (m.0 * 0.5 + sol.s) * self.inertia.j_inv;
        if (f_next.transpose() * f_next - Matrix3::identity()).norm() > REPROJECTION_TOL {
            f_next = *project_so3(&f_next)?.matrix();
        }
        let j = self.inertia.matrix();
        let implicit_residual = (f_next * j - j * f_next.transpose() - m.0).norm();
        let g_next = state.g * state.f;
        Ok(StepOutcome {
            state: SpacecraftState {
                g: g_next,
                f: RotationMatrix::from_matrix_unchecked(f_next),
            },
            momentum: m,
            margin,
            implicit_residual,
        })
    }

    pub fn step(&self, state: &SpacecraftState, torque: &Torque) -> Result<SpacecraftState> {
        self.step_checked(state, torque, 0.0).map(|o| o.state)
    }

    pub fn rollout(&self, state0: &SpacecraftState, torques: &[Torque]) -> Result<Vec<SpacecraftState>> {
        let mut states = Vec::with_capacity(torques.len() + 1);
        states.push(*state0);
        let mut x = *state0;
        for (step, tau) in torques.iter().enumerate() {
            x = match self.step_checked(&x, tau, 0.0) {
                Ok(o) => o.state,
                Err(Error::NotSolvable { margin }) => {
                    return Err(Error::NotSolvableAt { step, margin })
                }
                Err(e) => return Err(e),
            };
            states.push(x);
        }
        Ok(states)
    }

    /// Spatial angular momentum `g·vee(fJ − Jfᵀ)`, conserved when `τ ≡ 0`.
    pub fn spatial_momentum(&self, state: &SpacecraftState) -> Vector3<f64> {
        let j = self.inertia.matrix();
        let f = state.f.matrix();
        &state.g * &vee_unchecked(&(f * j - j * f.transpose()))
    }
}

pub fn lgvi_step(
    state: &SpacecraftState,
    torque: &Torque,
    h: f64,
    inertia: &InertiaMatrix,
) -> Result<SpacecraftState> {
    Lgvi::new(*inertia, h)?.step(state, torque)
}

pub fn rollout(
    state0: &SpacecraftState,
    torques: &[Torque],
    h: f64,
    inertia: &InertiaMatrix,
) -> Result<Vec<SpacecraftState>> {
    Lgvi::new(*inertia, h)?.rollout(state0, torques)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e3() -> Vector3<f64> {
        Vector3::new(0.0, 0.0, 1.0)
    }

    fn random_spd(rng: &mut impl Rng) -> InertiaMatrix {
        let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        InertiaMatrix::new(a * a.transpose() + Matrix3::identity() * 0.5).unwrap()
    }

    #[test]
    fn momentum_examples() {
        let j = InertiaMatrix::default();
        let rest = SpacecraftState::identity();
        let m = momentum_matrix(&rest, &Vector3::zeros(), 0.1, &j);
        assert_eq!(*m.matrix(), Matrix3::zeros());

        let m = momentum_matrix(&rest, &e3(), 0.1, &j);
        assert_relative_eq!(*m.matrix(), hat_matrix(&e3()) * 0.01, epsilon = 1e-17);

        // Rz(θ) − Rz(θ)ᵀ = 2 sin θ hat(e3).
        let spin = SpacecraftState::new(RotationMatrix::identity(), RotationMatrix::about_z(0.1));
        let unit = InertiaMatrix::new(Matrix3::identity()).unwrap();
        let m = momentum_matrix(&spin, &Vector3::zeros(), 0.1, &unit);
        assert_relative_eq!(
            *m.matrix(),
            hat_matrix(&e3()) * (2.0 * 0.1f64.sin()),
            epsilon = 1e-15
        );
    }

    #[test]
    fn solvability_examples() {
        let j = InertiaMatrix::default();
        let s = check_solvability(&MomentumMatrix(Matrix3::zeros()), &j);
        assert!(s.solvable);
        assert_relative_eq!(s.margin, 1.0, epsilon = 1e-12);

        let unit = InertiaMatrix::new(Matrix3::identity()).unwrap();
        let s = check_solvability(&MomentumMatrix::from_axial(&Vector3::new(0.0, 0.0, 4.0)), &unit);
        assert!(!s.solvable);
        assert_relative_eq!(s.margin, -3.0, epsilon = 1e-12);

        let s = check_solvability(&MomentumMatrix::from_axial(&Vector3::new(0.0, 0.0, 2.0)), &unit);
        assert!(s.solvable);
        assert_eq!(s.margin, 0.0);
    }

    #[test]
    fn riccati_zero_momentum_gives_inertia() {
        let j = InertiaMatrix::default();
        let sol = solve_step_riccati(&MomentumMatrix(Matrix3::zeros()), &j).unwrap();
        assert_relative_eq!(sol.s, *j.matrix(), epsilon = 1e-14);
    }

    #[test]
    fn riccati_planar_spin() {
        let unit = InertiaMatrix::new(Matrix3::identity()).unwrap();
        let theta = 0.1f64;
        let m = MomentumMatrix::from_axial(&(e3() * (2.0 * theta.sin())));
        let sol = solve_step_riccati(&m, &unit).unwrap();
        let f = (m.matrix() * 0.5 + sol.s) * unit.inverse();
        assert_relative_eq!(f, *RotationMatrix::about_z(theta).matrix(), epsilon = 1e-13);
    }

    #[test]
    fn riccati_random_residual_and_factored_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let j = random_spd(&mut rng);
            let v = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
            let m = MomentumMatrix::from_axial(&v);
            let sol = solve_step_riccati(&m, &j).unwrap();
            assert!(riccati_residual(&sol.s, &m, &j) <= 1e-10);
            let half = m.matrix() * 0.5;
            let factored = (sol.s - half) * (sol.s + half) - j.matrix() * j.matrix();
            assert!(factored.norm() <= 1e-10);
            assert!((sol.s - sol.s.transpose()).norm() <= 1e-14);
        }
    }

    #[test]
    fn riccati_rejects_unsolvable() {
        let unit = InertiaMatrix::new(Matrix3::identity()).unwrap();
        let m = MomentumMatrix::from_axial(&Vector3::new(0.0, 0.0, 4.0));
        assert!(matches!(solve_step_riccati(&m, &unit), Err(Error::NotSolvable { .. })));
    }

    #[test]
    fn step_examples() {
        let j = InertiaMatrix::default();
        let g = exp_so3(&Vector3::new(0.3, -0.2, 1.0));
        let x = SpacecraftState::at_rest(g);
        let next = lgvi_step(&x, &Vector3::zeros(), 0.1, &j).unwrap();
        assert_relative_eq!(*next.g.matrix(), *g.matrix(), epsilon = 1e-15);
        assert_relative_eq!(*next.f.matrix(), Matrix3::identity(), epsilon = 1e-15);

        let unit = InertiaMatrix::new(Matrix3::identity()).unwrap();
        let rz = RotationMatrix::about_z(0.1);
        let x = SpacecraftState::new(RotationMatrix::identity(), rz);
        let next = lgvi_step(&x, &Vector3::zeros(), 0.1, &unit).unwrap();
        assert_relative_eq!(*next.g.matrix(), *rz.matrix(), epsilon = 1e-15);
        assert_relative_eq!(*next.f.matrix(), *rz.matrix(), epsilon = 1e-13);
    }

    #[test]
    fn step_uses_current_increment_for_attitude() {
        let lgvi = Lgvi::new(InertiaMatrix::default(), 0.1).unwrap();
        let x = SpacecraftState::at_rest(RotationMatrix::identity());
        let next = lgvi.step(&x, &Vector3::new(5.0, -3.0, 2.0)).unwrap();
        assert_eq!(next.g, x.g);
        assert!(next.f != x.f);
    }

    #[test]
    fn free_rollout_conserves_spatial_momentum() {
        let lgvi = Lgvi::new(InertiaMatrix::default(), 0.1).unwrap();
        let x0 = SpacecraftState::with_rate(
            RotationMatrix::identity(),
            &Vector3::new(3.0, 2.0, 1.0),
            0.1,
        );
        let states = lgvi.rollout(&x0, &vec![Vector3::zeros(); 1000]).unwrap();
        let p0 = lgvi.spatial_momentum(&states[0]);
        for x in &states {
            assert!((lgvi.spatial_momentum(x) - p0).norm() <= 1e-9 * p0.norm());
            assert!(x.g.orthogonality_error() <= 1e-9);
        }
    }

    #[test]
    fn rollout_examples() {
        let lgvi = Lgvi::new(InertiaMatrix::default(), 0.1).unwrap();
        let x0 = SpacecraftState::at_rest(RotationMatrix::about_z(1.0));
        assert_eq!(lgvi.rollout(&x0, &[]).unwrap(), vec![x0]);
        let states = lgvi.rollout(&x0, &[Vector3::zeros(); 5]).unwrap();
        assert_eq!(states.len(), 6);
        assert!(states.iter().all(|s| s.distance(&x0) <= 1e-15));
    }

    #[test]
    fn rollout_reports_failing_step() {
        let lgvi = Lgvi::new(InertiaMatrix::default(), 0.1).unwrap();
        let x0 = SpacecraftState::identity();
        let torques = [Vector3::zeros(), Vector3::zeros(), Vector3::new(0.0, 0.0, 1e4)];
        match lgvi.rollout(&x0, &torques) {
            Err(Error::NotSolvableAt { step, .. }) => assert_eq!(step, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn step_is_deterministic() {
        let lgvi = Lgvi::new(InertiaMatrix::default(), 0.1).unwrap();
        let x0 = SpacecraftState::with_rate(
            exp_so3(&Vector3::new(0.1, 0.2, 0.3)),
            &Vector3::new(0.5, -1.0, 0.25),
            0.1,
        );
        let tau = Vector3::new(0.3, 0.1, -0.7);
        let a = lgvi.step(&x0, &tau).unwrap();
        let b = lgvi.step(&x0, &tau).unwrap();
        assert_eq!(a.f.to_row_major(), b.f.to_row_major());
    }
}
