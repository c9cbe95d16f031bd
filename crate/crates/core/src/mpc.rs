//! Receding-horizon control for discrete-time systems on manifolds.
//!
//! The optimal control problem is transcribed by single shooting over the
//! stacked input sequence. The manifold constraint holds by construction
//! since predictions are produced by the system's own step map. The terminal
//! constraint `F(x_N) ≤ c` is handled by a quadratic penalty with growing
//! weight and a multiplier shift (augmented Lagrangian), the input box by
//! projection. The inner solver is projected
//! gradient with Barzilai–Borwein trial steps and Armijo backtracking, on
//! central finite-difference gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod flat;

/// A controlled system `x⁺ = f(x, u)` on a manifold together with the
/// ingredients of a stabilizing MPC design.
pub trait ManifoldSystem: Sync {
    type State: Clone + Send + Sync;

    fn input_dim(&self) -> usize;

    /// One step of the dynamics. Fails where the step map is undefined
    /// (e.g. an implicit update with no solution).
    fn step(&self, x: &Self::State, u: &[f64]) -> Result<Self::State>;

    fn distance(&self, a: &Self::State, b: &Self::State) -> f64;

    fn equilibrium(&self) -> Self::State;

    fn equilibrium_input(&self) -> Vec<f64> {
        vec![0.0; self.input_dim()]
    }

    fn stage_cost(&self, x: &Self::State, u: &[f64]) -> f64;

    fn terminal_cost(&self, x: &Self::State) -> f64;

    /// Level `c` of the terminal set `{F ≤ c}`.
    fn terminal_level(&self) -> f64;

    fn in_terminal_set(&self, x: &Self::State) -> bool {
        self.terminal_cost(x) <= self.terminal_level()
    }

    /// The local law `κ`, defined on (a neighborhood of) the terminal set.
    fn local_law(&self, x: &Self::State) -> Result<Vec<f64>>;

    /// Feedback used to seed the solver from arbitrary states. Defaults to
    /// the local law, falling back to the equilibrium input.
    fn seed_law(&self, x: &Self::State) -> Vec<f64> {
        self.local_law(x)
            .unwrap_or_else(|_| self.equilibrium_input())
    }

    fn in_state_set(&self, _x: &Self::State) -> bool {
        true
    }

    /// Symmetric box `|u_i| ≤ bound`, if any.
    fn input_bound(&self) -> Option<f64> {
        None
    }

    /// Physical duration of one step, for reporting.
    fn sample_time(&self) -> f64 {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Inner projected-gradient iterations per penalty round.
    pub max_iters: usize,
    /// Stop when the projected gradient's ∞-norm falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step improves the objective by less than
    /// `ftol·max(1, |φ|)`.
    pub ftol: f64,
    pub fd_step: f64,
    pub penalty_weight: f64,
    pub penalty_growth: f64,
    pub max_penalty_rounds: usize,
    pub armijo_c1: f64,
    pub armijo_shrink: f64,
    pub max_backtracks: usize,
    /// The penalty targets `F ≤ (1 − terminal_margin)·c`.
    pub terminal_margin: f64,
    /// Largest accepted terminal-set violation `F(x_N) − c`.
    pub feasibility_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-7,
            ftol: 1e-13,
            fd_step: 1e-6,
            penalty_weight: 1.0,
            penalty_growth: 10.0,
            max_penalty_rounds: 6,
            armijo_c1: 1e-4,
            armijo_shrink: 0.5,
            max_backtracks: 40,
            terminal_margin: 1e-3,
            feasibility_tol: 1e-8,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("solver.grad_tol", self.grad_tol),
            ("solver.fd_step", self.fd_step),
            ("solver.penalty_weight", self.penalty_weight),
            ("solver.armijo_c1", self.armijo_c1),
            ("solver.feasibility_tol", self.feasibility_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.ftol >= 0.0) {
            return Err(Error::invalid("solver.ftol", "must be nonnegative"));
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::invalid("solver.penalty_growth", "must exceed 1"));
        }
        if !(self.armijo_shrink > 0.0 && self.armijo_shrink < 1.0) {
            return Err(Error::invalid("solver.armijo_shrink", "must lie in (0, 1)"));
        }
        if !(self.terminal_margin >= 0.0 && self.terminal_margin < 1.0) {
            return Err(Error::invalid("solver.terminal_margin", "must lie in [0, 1)"));
        }
        if self.max_iters == 0 || self.max_penalty_rounds == 0 {
            return Err(Error::invalid(
                "solver.max_iters",
                "iteration limits must be at least 1",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    pub solver: SolverSettings,
}

impl MpcConfig {
    pub fn new(horizon: usize, solver: SolverSettings) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("horizon", "must be at least 1"));
        }
        solver.validate()?;
        Ok(Self { horizon, solver })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcpSolution<S> {
    /// `N` inputs of dimension `m`.
    pub inputs: Vec<Vec<f64>>,
    /// `N + 1` predicted states, starting at `x0`.
    pub predicted: Vec<S>,
    /// `V_N` of `inputs` (penalty excluded).
    pub cost: f64,
    /// `F(x_N)`.
    pub terminal_value: f64,
    pub feasible: bool,
    /// `max(0, F(x_N) − c)`.
    pub violation: f64,
    pub iterations: usize,
    pub penalty_rounds: usize,
    /// ∞-norm of the projected gradient of the penalized objective at exit.
    pub kkt_residual: f64,
}

impl<S> OcpSolution<S> {
    pub fn first_input(&self) -> &[f64] {
        &self.inputs[0]
    }

    pub fn terminal_state(&self) -> &S {
        self.predicted.last().expect("prediction includes x0")
    }
}

/// `V_N(x0; u) = F(x_N) + Σ L(x_i, u_i)`.
pub fn horizon_cost<Sys: ManifoldSystem>(
    sys: &Sys,
    x0: &Sys::State,
    inputs: &[Vec<f64>],
) -> Result<f64> {
    let mut x = x0.clone();
    let mut total = 0.0;
    for (step, u) in inputs.iter().enumerate() {
        total += sys.stage_cost(&x, u);
        x = sys.step(&x, u).map_err(|e| Error::RolloutFailure {
            step,
            reason: e.to_string(),
        })?;
    }
    Ok(total + sys.terminal_cost(&x))
}

/// Rolls `inputs` out from `x0`, returning all `len + 1` states.
pub fn predict<Sys: ManifoldSystem>(
    sys: &Sys,
    x0: &Sys::State,
    inputs: &[Vec<f64>],
) -> Result<Vec<Sys::State>> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for (step, u) in inputs.iter().enumerate() {
        let next = sys
            .step(states.last().expect("nonempty"), u)
            .map_err(|e| Error::RolloutFailure {
                step,
                reason: e.to_string(),
            })?;
        states.push(next);
    }
    Ok(states)
}

/// Drops the first input of a feasible solution and appends `κ` at its
/// predicted terminal state.
pub fn warm_start_shift<Sys: ManifoldSystem>(
    previous: &OcpSolution<Sys::State>,
    sys: &Sys,
) -> Vec<Vec<f64>> {
    let terminal = previous.terminal_state();
    let tail = sys
        .local_law(terminal)
        .unwrap_or_else(|_| sys.seed_law(terminal));
    let mut shifted: Vec<Vec<f64>> = previous.inputs.iter().skip(1).cloned().collect();
    shifted.push(clip(sys, tail));
    shifted
}

/// Constraint status of an input sequence applied from `x0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceCheck<S> {
    pub predicted: Vec<S>,
    pub cost: f64,
    pub terminal_value: f64,
    pub violation: f64,
    pub feasible: bool,
}

pub fn check_sequence<Sys: ManifoldSystem>(
    sys: &Sys,
    x0: &Sys::State,
    inputs: &[Vec<f64>],
    feasibility_tol: f64,
) -> Result<SequenceCheck<Sys::State>> {
    let predicted = predict(sys, x0, inputs)?;
    let stage: f64 = predicted
        .iter()
        .zip(inputs)
        .map(|(x, u)| sys.stage_cost(x, u))
        .sum();
    let terminal = predicted.last().expect("nonempty");
    let terminal_value = sys.terminal_cost(terminal);
    let violation = (terminal_value - sys.terminal_level()).max(0.0);
    let inputs_ok = inputs.iter().all(|u| {
        u.iter()
            .all(|v| v.is_finite() && sys.input_bound().is_none_or(|b| v.abs() <= b))
    });
    let states_ok = predicted.iter().all(|x| sys.in_state_set(x));
    let feasible = inputs_ok && states_ok && violation <= feasibility_tol;
    Ok(SequenceCheck {
        cost: stage + terminal_value,
        terminal_value,
        violation,
        feasible,
        predicted,
    })
}

fn clip<Sys: ManifoldSystem>(sys: &Sys, mut u: Vec<f64>) -> Vec<f64> {
    if let Some(b) = sys.input_bound() {
        for v in &mut u {
            *v = v.clamp(-b, b);
        }
    }
    u
}

/// Applies the seed law along its own prediction, halving any input whose
/// step is undefined.
pub fn seed_inputs<Sys: ManifoldSystem>(sys: &Sys, x0: &Sys::State, horizon: usize) -> Vec<Vec<f64>> {
    let mut x = x0.clone();
    let mut inputs = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut u = clip(sys, sys.seed_law(&x));
        let mut next = sys.step(&x, &u);
        let mut tries = 0;
        while next.is_err() && tries < 40 {
            u.iter_mut().for_each(|v| *v *= 0.5);
            next = sys.step(&x, &u);
            tries += 1;
        }
        match next {
            Ok(n) => x = n,
            Err(_) => {
                u = sys.equilibrium_input();
                match sys.step(&x, &u) {
                    Ok(n) => x = n,
                    Err(_) => {
                        inputs.push(u);
                        inputs.resize(horizon, sys.equilibrium_input());
                        return inputs;
                    }
                }
            }
        }
        inputs.push(u);
    }
    inputs
}

struct Problem<'a, Sys: ManifoldSystem> {
    sys: &'a Sys,
    x0: &'a Sys::State,
    horizon: usize,
    m: usize,
    settings: &'a SolverSettings,
    level_target: f64,
    level_scale: f64,
    rho: f64,
    multiplier: f64,
}

struct Evaluation<S> {
    states: Vec<S>,
    objective: f64,
}

struct InnerResult {
    u: Vec<f64>,
    iterations: usize,
    kkt: f64,
}

impl<'a, Sys: ManifoldSystem> Problem<'a, Sys> {
    /// `g = (F − c_target)/c`, the relative terminal excess.
    fn excess(&self, terminal_value: f64) -> f64 {
        (terminal_value - self.level_target) / self.level_scale
    }

    /// Shifted quadratic penalty `(max(0, μ + ρg)² − μ²)/(2ρ)`; with `μ = 0`
    /// this is `ρ/2·max(0, g)²`.
    fn penalty(&self, terminal_value: f64) -> f64 {
        let g = self.excess(terminal_value);
        let shifted = (self.multiplier + self.rho * g).max(0.0);
        (shifted * shifted - self.multiplier * self.multiplier) / (2.0 * self.rho)
    }

    fn project(&self, u: &mut [f64]) {
        if let Some(b) = self.sys.input_bound() {
            for v in u.iter_mut() {
                *v = v.clamp(-b, b);
            }
        }
    }

    fn evaluate(&self, u: &[f64]) -> Option<Evaluation<Sys::State>> {
        let mut states = Vec::with_capacity(self.horizon + 1);
        states.push(self.x0.clone());
        let mut objective = 0.0;
        for i in 0..self.horizon {
            let ui = &u[i * self.m..(i + 1) * self.m];
            let x = states.last().expect("nonempty");
            objective += self.sys.stage_cost(x, ui);
            let next = self.sys.step(x, ui).ok()?;
            states.push(next);
        }
        let terminal = self.sys.terminal_cost(states.last().expect("nonempty"));
        objective += terminal + self.penalty(terminal);
        objective.is_finite().then_some(Evaluation { states, objective })
    }

    /// Objective restricted to steps `i..N`, starting from `x_i`.
    fn suffix_objective(&self, start: &Sys::State, i0: usize, u: &[f64]) -> Option<f64> {
        let mut x = start.clone();
        let mut total = 0.0;
        for i in i0..self.horizon {
            let ui = &u[i * self.m..(i + 1) * self.m];
            total += self.sys.stage_cost(&x, ui);
            x = self.sys.step(&x, ui).ok()?;
        }
        let terminal = self.sys.terminal_cost(&x);
        let total = total + terminal + self.penalty(terminal);
        total.is_finite().then_some(total)
    }

    fn gradient(&self, u: &[f64], nominal: &Evaluation<Sys::State>) -> Vec<f64> {
        let delta = self.settings.fd_step;
        let bound = self.sys.input_bound();
        (0..u.len())
            .into_par_iter()
            .map(|idx| {
                let i = idx / self.m;
                let start = &nominal.states[i];
                let base = self.suffix_objective(start, i, u);
                let mut up = u.to_vec();
                let mut down = u.to_vec();
                up[idx] += delta;
                down[idx] -= delta;
                // Stay inside the box so the difference is taken on the
                // feasible side.
                if let Some(b) = bound {
                    up[idx] = up[idx].min(b);
                    down[idx] = down[idx].max(-b);
                }
                let span_up = up[idx] - u[idx];
                let span_down = u[idx] - down[idx];
                let fu = self.suffix_objective(start, i, &up);
                let fd = self.suffix_objective(start, i, &down);
                match (fu, fd, base) {
                    (Some(a), Some(b), _) if span_up + span_down > 0.0 => {
                        (a - b) / (span_up + span_down)
                    }
                    (Some(a), None, Some(c)) if span_up > 0.0 => (a - c) / span_up,
                    (None, Some(b), Some(c)) if span_down > 0.0 => (c - b) / span_down,
                    _ => 0.0,
                }
            })
            .collect()
    }

    fn projected_gradient_norm(&self, u: &[f64], g: &[f64]) -> f64 {
        let mut trial: Vec<f64> = u.iter().zip(g).map(|(a, b)| a - b).collect();
        self.project(&mut trial);
        trial
            .iter()
            .zip(u)
            .map(|(t, a)| (t - a).abs())
            .fold(0.0, f64::max)
    }

    fn minimize(&self, u0: Vec<f64>) -> Option<InnerResult> {
        let s = self.settings;
        let mut u = u0;
        self.project(&mut u);
        let mut eval = self.evaluate(&u)?;
        let mut g = self.gradient(&u, &eval);
        let mut kkt = self.projected_gradient_norm(&u, &g);
        let mut alpha = 1.0 / kkt.max(1e-12);
        let mut iterations = 0;
        while iterations < s.max_iters && kkt > s.grad_tol {
            let mut target: Vec<f64> = u.iter().zip(&g).map(|(a, b)| a - alpha * b).collect();
            self.project(&mut target);
            let d: Vec<f64> = target.iter().zip(&u).map(|(t, a)| t - a).collect();
            let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if !(slope < 0.0) {
                break;
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=s.max_backtracks {
                let trial: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                if let Some(e) = self.evaluate(&trial) {
                    if e.objective <= eval.objective + s.armijo_c1 * t * slope {
                        accepted = Some((trial, e));
                        break;
                    }
                }
                t *= s.armijo_shrink;
            }
            let Some((next_u, next_eval)) = accepted else {
                break;
            };
            iterations += 1;
            let improvement = eval.objective - next_eval.objective;
            let next_g = self.gradient(&next_u, &next_eval);
            let step: Vec<f64> = next_u.iter().zip(&u).map(|(a, b)| a - b).collect();
            let ss: f64 = step.iter().map(|v| v * v).sum();
            let sy: f64 = step
                .iter()
                .zip(next_g.iter().zip(&g))
                .map(|(s, (gn, go))| s * (gn - go))
                .sum();
            alpha = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { 1e12f64.min(alpha * 10.0) };
            u = next_u;
            eval = next_eval;
            g = next_g;
            kkt = self.projected_gradient_norm(&u, &g);
            if improvement <= s.ftol * eval.objective.abs().max(1.0) {
                break;
            }
        }
        Some(InnerResult { u, iterations, kkt })
    }
}

fn flatten(inputs: &[Vec<f64>], horizon: usize, m: usize, fill: &[f64]) -> Vec<f64> {
    let mut u = Vec::with_capacity(horizon * m);
    for i in 0..horizon {
        match inputs.get(i) {
            Some(v) if v.len() == m => u.extend_from_slice(v),
            _ => u.extend_from_slice(fill),
        }
    }
    u
}

fn unflatten(u: &[f64], m: usize) -> Vec<Vec<f64>> {
    u.chunks(m).map(<[f64]>::to_vec).collect()
}

/// Solves the finite-horizon problem from `x0`. The returned solution is
/// the cheapest feasible sequence among the initial guess and the penalty
/// rounds; without a warm start the guess is the seed law along its own
/// prediction.
pub fn solve_ocp<Sys: ManifoldSystem>(
    sys: &Sys,
    x0: &Sys::State,
    config: &MpcConfig,
    warm_start: Option<&[Vec<f64>]>,
) -> Result<OcpSolution<Sys::State>> {
    if !sys.in_state_set(x0) {
        return Err(Error::Infeasible {
            violation: f64::INFINITY,
        });
    }
    let s = &config.solver;
    let m = sys.input_dim();
    let horizon = config.horizon;
    let guess = match warm_start {
        Some(w) => w.to_vec(),
        None => seed_inputs(sys, x0, horizon),
    };
    let mut u = flatten(&guess, horizon, m, &sys.equilibrium_input());

    let mut best: Option<(Vec<f64>, SequenceCheck<Sys::State>)> = None;
    let consider = |u: &[f64], best: &mut Option<(Vec<f64>, SequenceCheck<Sys::State>)>| {
        let inputs = unflatten(u, m);
        if let Ok(check) = check_sequence(sys, x0, &inputs, s.feasibility_tol) {
            let better = best.as_ref().is_none_or(|(_, b)| check.cost < b.cost);
            if check.feasible && better {
                *best = Some((u.to_vec(), check));
            }
        }
    };
    {
        let mut projected = u.clone();
        if let Some(b) = sys.input_bound() {
            projected.iter_mut().for_each(|v| *v = v.clamp(-b, b));
        }
        consider(&projected, &mut best);
    }

    let mut problem = Problem {
        sys,
        x0,
        horizon,
        m,
        settings: s,
        level_target: sys.terminal_level() * (1.0 - s.terminal_margin),
        level_scale: sys.terminal_level().abs().max(f64::MIN_POSITIVE),
        rho: s.penalty_weight,
        multiplier: 0.0,
    };
    let mut iterations = 0;
    let mut kkt = f64::INFINITY;
    let mut rounds = 0;
    let mut last_violation = f64::INFINITY;
    for _ in 0..s.max_penalty_rounds {
        rounds += 1;
        let Some(result) = problem.minimize(u.clone()) else {
            break;
        };
        iterations += result.iterations;
        kkt = result.kkt;
        u = result.u;
        let inputs = unflatten(&u, m);
        let Ok(check) = check_sequence(sys, x0, &inputs, s.feasibility_tol) else {
            last_violation = f64::INFINITY;
            problem.rho *= s.penalty_growth;
            continue;
        };
        last_violation = check.violation;
        consider(&u, &mut best);
        if check.feasible {
            break;
        }
        let excess = problem.excess(check.terminal_value);
        problem.multiplier = (problem.multiplier + problem.rho * excess).max(0.0);
        problem.rho *= s.penalty_growth;
    }

    let Some((u_best, check)) = best else {
        return Err(Error::Infeasible {
            violation: last_violation,
        });
    };
    Ok(OcpSolution {
        inputs: unflatten(&u_best, m),
        predicted: check.predicted,
        cost: check.cost,
        terminal_value: check.terminal_value,
        feasible: check.feasible,
        violation: check.violation,
        iterations,
        penalty_rounds: rounds,
        kkt_residual: kkt,
    })
}

/// Per-step record of a closed-loop run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    /// `d(x_k, x_e)`.
    pub distance: f64,
    pub input: Vec<f64>,
    pub v_star: f64,
    /// Cost at `x_k` of the previous solution shifted with `κ` appended.
    pub v_candidate: Option<f64>,
    pub candidate_feasible: Option<bool>,
    /// `V_candidate(x_k) − V*(x_{k−1}) + L(x_{k−1}, u_{k−1})`.
    pub decrease_margin: Option<f64>,
    /// `L(x_k, u_k)`.
    pub stage_cost: f64,
    /// `F` at the predicted terminal state.
    pub terminal_value: f64,
    pub feasible: bool,
    pub violation: f64,
    pub iterations: usize,
}

/// Holds the warm start between successive MPC steps.
pub struct MpcController<'a, Sys: ManifoldSystem> {
    pub sys: &'a Sys,
    pub config: MpcConfig,
    previous: Option<OcpSolution<Sys::State>>,
}

impl<'a, Sys: ManifoldSystem> MpcController<'a, Sys> {
    pub fn new(sys: &'a Sys, config: MpcConfig) -> Self {
        Self {
            sys,
            config,
            previous: None,
        }
    }

    pub fn previous(&self) -> Option<&OcpSolution<Sys::State>> {
        self.previous.as_ref()
    }

    /// Shifted candidate for the next state, if a previous solution exists.
    pub fn candidate(&self) -> Option<Vec<Vec<f64>>> {
        self.previous
            .as_ref()
            .map(|p| warm_start_shift(p, self.sys))
    }

    /// Solves at `x` and returns `u = u*_{0}` with the full solution.
    pub fn step(&mut self, x: &Sys::State) -> Result<(Vec<f64>, OcpSolution<Sys::State>)> {
        let warm = self.candidate();
        let sol = solve_ocp(self.sys, x, &self.config, warm.as_deref())?;
        let u = sol.first_input().to_vec();
        self.previous = Some(sol.clone());
        Ok((u, sol))
    }
}

pub fn mpc_step<Sys: ManifoldSystem>(
    controller: &mut MpcController<'_, Sys>,
    x: &Sys::State,
) -> Result<(Vec<f64>, OcpSolution<Sys::State>)> {
    controller.step(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopOptions {
    pub n_steps: usize,
    pub convergence_tol: f64,
    pub stop_when_converged: bool,
}

#[derive(Clone, Debug)]
pub struct ClosedLoopRun<S> {
    /// `x_0 … x_K`, one more than `records`.
    pub states: Vec<S>,
    pub records: Vec<StepRecord>,
    /// First `k` with `d(x_k, x_e) < convergence_tol`.
    pub converged_at: Option<usize>,
}

impl<S> ClosedLoopRun<S> {
    pub fn converged(&self) -> bool {
        self.converged_at.is_some()
    }

    /// Worst `V_cand(x_{k+1}) − V*(x_k) + L(x_k, u_k)` over the run.
    pub fn worst_decrease_margin(&self) -> Option<f64> {
        self.records
            .iter()
            .filter_map(|r| r.decrease_margin)
            .reduce(f64::max)
    }
}

pub fn closed_loop<Sys: ManifoldSystem>(
    sys: &Sys,
    x0: &Sys::State,
    config: &MpcConfig,
    options: &ClosedLoopOptions,
) -> Result<ClosedLoopRun<Sys::State>> {
    let mut controller = MpcController::new(sys, *config);
    let eq = sys.equilibrium();
    let mut states = vec![x0.clone()];
    let mut records: Vec<StepRecord> = Vec::with_capacity(options.n_steps);
    let mut converged_at = None;
    let tol = config.solver.feasibility_tol;
    for k in 0..options.n_steps {
        let x = states.last().expect("nonempty").clone();
        let distance = sys.distance(&x, &eq);
        if converged_at.is_none() && distance < options.convergence_tol {
            converged_at = Some(k);
            if options.stop_when_converged {
                break;
            }
        }
        let candidate = controller
            .candidate()
            .and_then(|c| check_sequence(sys, &x, &c, tol).ok());
        let (u, sol) = controller.step(&x).map_err(|e| match e {
            Error::Infeasible { violation } => Error::InfeasibleAt { step: k, violation },
            other => other,
        })?;
        let decrease_margin = match (&candidate, records.last()) {
            (Some(c), Some(prev)) => Some(c.cost - prev.v_star + prev.stage_cost),
            _ => None,
        };
        records.push(StepRecord {
            k,
            t: k as f64 * sys.sample_time(),
            distance,
            stage_cost: sys.stage_cost(&x, &u),
            input: u.clone(),
            v_star: sol.cost,
            v_candidate: candidate.as_ref().map(|c| c.cost),
            candidate_feasible: candidate.as_ref().map(|c| c.feasible),
            decrease_margin,
            terminal_value: sol.terminal_value,
            feasible: sol.feasible,
            violation: sol.violation,
            iterations: sol.iterations,
        });
        let next = sys.step(&x, &u).map_err(|e| Error::RolloutFailure {
            step: k,
            reason: e.to_string(),
        })?;
        states.push(next);
    }
    if converged_at.is_none() && records.len() == options.n_steps {
        let last = states.last().expect("nonempty");
        if sys.distance(last, &eq) < options.convergence_tol {
            converged_at = Some(options.n_steps);
        }
    }
    Ok(ClosedLoopRun {
        states,
        records,
        converged_at,
    })
}
