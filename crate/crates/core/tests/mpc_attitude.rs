use std::f64::consts::PI;
use std::sync::OnceLock;

use manifold_mpc_core::attitude::AttitudeSystem;
use manifold_mpc_core::config::RunConfig;
use manifold_mpc_core::lgvi::SpacecraftState;
use manifold_mpc_core::mpc::*;
use manifold_mpc_core::so3::{exp_so3, geodesic_distance, RotationMatrix};
use nalgebra::Vector3;
use proptest::prelude::*;

fn system() -> &'static AttitudeSystem {
    static SYS: OnceLock<AttitudeSystem> = OnceLock::new();
    SYS.get_or_init(|| AttitudeSystem::new(RunConfig::default().design().unwrap()))
}

fn config() -> MpcConfig {
    RunConfig::default().mpc_config().unwrap()
}

fn kappa_rollout_cost(sys: &AttitudeSystem, x0: &SpacecraftState, n: usize) -> (f64, Vec<Vec<f64>>) {
    let mut x = *x0;
    let mut inputs = Vec::new();
    for _ in 0..n {
        let u = sys.local_law(&x).unwrap();
        x = sys.step(&x, &u).unwrap();
        inputs.push(u);
    }
    (horizon_cost(sys, x0, &inputs).unwrap(), inputs)
}

#[test]
fn horizon_cost_examples() {
    let sys = system();
    let eq = sys.equilibrium();
    assert_eq!(horizon_cost(sys, &eq, &vec![vec![0.0; 3]; 10]).unwrap(), 0.0);

    let flipped = SpacecraftState::at_rest(RotationMatrix::about_z(PI));
    assert!((sys.stage_cost(&flipped, &[0.0; 3]) - 4.0).abs() <= 1e-12);
    let next = sys.step(&flipped, &[0.0; 3]).unwrap();
    let one = horizon_cost(sys, &flipped, &[vec![0.0; 3]]).unwrap();
    assert!((one - 4.0 - sys.terminal_cost(&next)).abs() <= 1e-9);

    assert!((sys.stage_cost(&eq, &[0.0, 0.0, 1.0]) - 2.0).abs() <= 1e-12);
}

#[test]
fn equilibrium_is_fixed_and_costless() {
    let sys = system();
    let eq = sys.equilibrium();
    let ue = sys.equilibrium_input();
    assert!(sys.distance(&sys.step(&eq, &ue).unwrap(), &eq) <= 1e-10);
    assert_eq!(sys.stage_cost(&eq, &ue), 0.0);
    assert_eq!(sys.terminal_cost(&eq), 0.0);
    let sol = solve_ocp(sys, &eq, &config(), None).unwrap();
    assert!(sol.cost <= 1e-8);
    assert!(sol.inputs.iter().flatten().all(|u| u.abs() <= 1e-8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stage_cost_is_positive_definite(
        zeta in prop::array::uniform3(-1.8..1.8f64),
        w in prop::array::uniform3(-2.0..2.0f64),
        tau in prop::array::uniform3(-5.0..5.0f64),
    ) {
        let sys = system();
        let x = SpacecraftState::with_rate(exp_so3(&Vector3::from(zeta)), &Vector3::from(w), 0.1);
        let l0 = sys.stage_cost(&x, &[0.0; 3]);
        let l = sys.stage_cost(&x, &tau);
        prop_assert!(l0 >= 0.0);
        prop_assert!(l >= l0 - 1e-12);
        if sys.distance(&x, &sys.equilibrium()) > 1e-6 {
            prop_assert!(l0 > 0.0);
        }
    }
}

#[test]
fn solution_never_costs_more_than_local_law_inside_terminal_set() {
    let sys = system();
    let design = &sys.design;
    for s in design.sample_level_set(design.c * 0.5, 6, 11) {
        let (kappa_cost, _) = kappa_rollout_cost(sys, &s.state, 10);
        let sol = solve_ocp(sys, &s.state, &config(), None).unwrap();
        assert!(sol.feasible);
        assert!(sol.cost <= kappa_cost + 1e-9, "{} > {kappa_cost}", sol.cost);
    }
}

#[test]
fn solution_from_branch_cut_is_feasible() {
    let sys = system();
    let x0 = SpacecraftState::at_rest(RotationMatrix::about_z(PI));
    let sol = solve_ocp(sys, &x0, &config(), None).unwrap();
    assert!(sol.feasible);
    assert!(sol.terminal_value <= sys.design.c + 1e-8);
    assert!(sol.cost > 0.0);
    assert_eq!(sol.inputs.len(), 10);
    assert_eq!(sol.predicted.len(), 11);
    let recomputed = horizon_cost(sys, &x0, &sol.inputs).unwrap();
    assert!((recomputed - sol.cost).abs() <= 1e-10 * sol.cost.max(1.0));
    let bound = sys.input_bound().unwrap();
    assert!(sol.inputs.iter().flatten().all(|u| u.abs() <= bound));
}

#[test]
fn shifted_candidate_is_feasible_and_decreases() {
    let sys = system();
    let x0 = SpacecraftState::at_rest(RotationMatrix::about_z(0.8 * PI));
    let sol = solve_ocp(sys, &x0, &config(), None).unwrap();
    let u0 = sol.first_input().to_vec();
    let x1 = sys.step(&x0, &u0).unwrap();
    let shifted = warm_start_shift(&sol, sys);
    assert_eq!(shifted.len(), 10);
    assert_eq!(&shifted[..9], &sol.inputs[1..]);
    let check = check_sequence(sys, &x1, &shifted, 1e-8).unwrap();
    assert!(check.feasible);
    assert!(check.terminal_value <= sys.design.c + 1e-8);
    assert!(check.cost - sol.cost + sys.stage_cost(&x0, &u0) <= 1e-8);
}

#[test]
fn one_step_shift_is_local_law_at_prediction() {
    let sys = system();
    let cfg = MpcConfig::new(1, SolverSettings::default()).unwrap();
    let x0 = sys.design.sample_level_set(sys.design.c * 0.3, 1, 2)[0].state;
    let sol = solve_ocp(sys, &x0, &cfg, None).unwrap();
    let shifted = warm_start_shift(&sol, sys);
    assert_eq!(shifted, vec![sys.local_law(sol.terminal_state()).unwrap()]);
}

#[test]
fn controller_at_equilibrium_applies_no_torque() {
    let sys = system();
    let mut controller = MpcController::new(sys, config());
    let (u, _) = mpc_step(&mut controller, &sys.equilibrium()).unwrap();
    assert!(u.iter().all(|v| v.abs() <= 1e-8));
    assert!(controller.previous().is_some());
}

#[test]
fn closed_loop_at_equilibrium_stays_put() {
    let sys = system();
    let options = ClosedLoopOptions {
        n_steps: 20,
        convergence_tol: 1e-6,
        stop_when_converged: false,
    };
    let run = closed_loop(sys, &sys.equilibrium(), &config(), &options).unwrap();
    assert_eq!(run.converged_at, Some(0));
    for r in &run.records {
        assert!(r.input.iter().all(|v| v.abs() <= 1e-8));
        assert!(r.v_star <= 1e-8);
    }
}

#[test]
fn small_tumble_converges_with_decreasing_candidate() {
    let sys = system();
    let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
    let x0 = SpacecraftState::with_rate(
        exp_so3(&(axis * 10f64.to_radians())),
        &Vector3::new(0.02, -0.01, 0.03),
        0.1,
    );
    let options = ClosedLoopOptions {
        n_steps: 200,
        convergence_tol: 1e-3,
        stop_when_converged: true,
    };
    let run = closed_loop(sys, &x0, &config(), &options).unwrap();
    let last = run.states.last().unwrap();
    assert!(geodesic_distance(&last.g, &RotationMatrix::identity()) < 1e-3);
    assert!(run.records.iter().all(|r| r.feasible));
    assert!(run.records.iter().all(|r| r.candidate_feasible.unwrap_or(true)));
    assert!(run.worst_decrease_margin().unwrap() <= 1e-8);
    let candidates: Vec<f64> = run.records.iter().filter_map(|r| r.v_candidate).collect();
    assert!(candidates.windows(2).all(|w| w[1] <= w[0] + 1e-8));
}

#[test]
fn solves_are_deterministic() {
    let sys = system();
    let x0 = SpacecraftState::with_rate(
        RotationMatrix::about_z(2.0),
        &Vector3::new(0.1, 0.2, -0.1),
        0.1,
    );
    let a = solve_ocp(sys, &x0, &config(), None).unwrap();
    let b = solve_ocp(sys, &x0, &config(), None).unwrap();
    assert_eq!(a.inputs, b.inputs);
}

#[test]
fn wrong_input_dimension_is_rejected() {
    let sys = system();
    assert!(sys.step(&sys.equilibrium(), &[0.0, 1.0]).is_err());
}
