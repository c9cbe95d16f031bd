//! Executable experiments: the branch-cut discontinuity probe, conservation
//! diagnostics, local-law certification and Lyapunov audits. Each produces
//! an [`ExperimentReport`] whose verdicts carry the measured worst case.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attitude::AttitudeSystem;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{write_diagnostics_csv, write_json, write_snapshots_csv, write_trajectory_csv};
use crate::lgvi::{Lgvi, SpacecraftState, Torque};
use crate::mpc::{closed_loop, ClosedLoopRun, ManifoldSystem, MpcConfig};
use crate::so3::{exp_so3, geodesic_distance, hat, BranchConvention, RotationMatrix};
use crate::terminal::{TerminalDesign, DECREASE_TOL};

/// Tolerance of the candidate-cost chain and of the summability check.
pub const CHAIN_TOL: f64 = 1e-8;
pub const CONSERVATION_TOL: f64 = 1e-9;
/// Required distance `d(g, I)` at the end of a discontinuity-probe run.
pub const CONVERGENCE_TOL: f64 = 1e-2;
pub const SAME_SIDE_TOL: f64 = 0.1;
pub const STRADDLE_GAP: f64 = 1.0;
/// Torques below this magnitude count as zero when looking for the first
/// nonzero `τ_z`.
pub const ZERO_TORQUE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    AtMost,
    Above,
    Below,
    Report,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub invariant: String,
    pub measured: f64,
    pub threshold: f64,
    pub comparison: Comparison,
    pub passed: bool,
}

impl Verdict {
    pub fn at_most(invariant: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self::make(invariant, measured, threshold, Comparison::AtMost, measured <= threshold)
    }

    pub fn above(invariant: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self::make(invariant, measured, threshold, Comparison::Above, measured > threshold)
    }

    pub fn below(invariant: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self::make(invariant, measured, threshold, Comparison::Below, measured < threshold)
    }

    /// Recorded for information; never fails a report.
    pub fn report(invariant: impl Into<String>, measured: f64) -> Self {
        Self::make(invariant, measured, f64::NAN, Comparison::Report, true)
    }

    fn make(
        invariant: impl Into<String>,
        measured: f64,
        threshold: f64,
        comparison: Comparison,
        passed: bool,
    ) -> Self {
        Self {
            invariant: invariant.into(),
            measured,
            threshold,
            comparison,
            passed,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match (self.comparison, self.passed) {
            (Comparison::Report, _) => "INFO",
            (_, true) => "PASS",
            (_, false) => "FAIL",
        };
        let op = match self.comparison {
            Comparison::AtMost => "<=",
            Comparison::Above => ">",
            Comparison::Below => "<",
            Comparison::Report => return write!(f, "{tag} {}: {:.6e}", self.invariant, self.measured),
        };
        write!(
            f,
            "{tag} {}: {:.6e} {op} {:.3e}",
            self.invariant, self.measured, self.threshold
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub passed: bool,
    pub verdicts: Vec<Verdict>,
    pub csv_paths: Vec<PathBuf>,
    pub config: Option<serde_json::Value>,
}

impl ExperimentReport {
    pub fn new(name: impl Into<String>, seed: u64) -> Self {
        Self {
            name: name.into(),
            seed,
            passed: true,
            verdicts: Vec::new(),
            csv_paths: Vec::new(),
            config: None,
        }
    }

    pub fn push(&mut self, verdict: Verdict) {
        self.passed &= verdict.passed;
        self.verdicts.push(verdict);
    }

    pub fn verdict(&self, invariant: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.invariant == invariant)
    }

    pub fn with_config(mut self, config: &RunConfig) -> Self {
        self.config = Some(config.to_json_value());
        self
    }

    /// Writes `<dir>/<name>.json`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.json", self.name));
        write_json(&path, self)?;
        Ok(path)
    }
}

impl fmt::Display for ExperimentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        writeln!(f, "[{status}] {} (seed {})", self.name, self.seed)?;
        for v in &self.verdicts {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

/// Writes trajectory and diagnostics CSVs for an attitude run.
pub fn write_run_csv(
    dir: &Path,
    label: &str,
    run: &ClosedLoopRun<SpacecraftState>,
    h: f64,
    every: usize,
) -> Result<Vec<PathBuf>> {
    let torques: Vec<Vec<f64>> = run.records.iter().map(|r| r.input.clone()).collect();
    let trajectory = dir.join(format!("{label}_trajectory.csv"));
    let diagnostics = dir.join(format!("{label}_diagnostics.csv"));
    write_trajectory_csv(&trajectory, &run.states, &torques, h, every)?;
    write_diagnostics_csv(&diagnostics, &run.records)?;
    Ok(vec![trajectory, diagnostics])
}

/// Closed loop from rest at `Rz(angle)`.
pub fn run_from_rest(
    sys: &AttitudeSystem,
    config: &RunConfig,
    mpc: &MpcConfig,
    angle: f64,
) -> Result<ClosedLoopRun<SpacecraftState>> {
    let x0 = SpacecraftState::at_rest(RotationMatrix::about_z(angle));
    closed_loop(sys, &x0, mpc, &config.closed_loop_options())
}

/// First `τ_z` whose magnitude exceeds [`ZERO_TORQUE`].
pub fn first_nonzero_tau_z(run: &ClosedLoopRun<SpacecraftState>) -> Option<f64> {
    run.records
        .iter()
        .map(|r| r.input[2])
        .find(|t| t.abs() > ZERO_TORQUE)
}

/// `max_k ‖u_k − v_k‖_∞` over the common length of two runs.
pub fn max_torque_difference(
    a: &ClosedLoopRun<SpacecraftState>,
    b: &ClosedLoopRun<SpacecraftState>,
) -> f64 {
    a.records
        .iter()
        .zip(&b.records)
        .flat_map(|(ra, rb)| ra.input.iter().zip(&rb.input).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

fn final_attitude_error(run: &ClosedLoopRun<SpacecraftState>) -> f64 {
    let last = run.states.last().expect("runs include x0");
    geodesic_distance(&last.g, &RotationMatrix::identity())
}

/// Runs started from rest at the listed `Rz` angles.
#[derive(Clone, Debug)]
pub struct DiscontinuityProbe {
    pub report: ExperimentReport,
    pub labels: Vec<String>,
    pub angles: Vec<f64>,
    pub runs: Vec<ClosedLoopRun<SpacecraftState>>,
}

/// Closed loops from rest at `Rz(π)` and `Rz(−0.99π)`, which straddle the
/// branch cut, plus `Rz(±0.99π)` on the same side as `Rz(π)` under the
/// design's convention.
pub fn probe_discontinuity(
    config: &RunConfig,
    design: &TerminalDesign,
    out_dir: Option<&Path>,
) -> Result<DiscontinuityProbe> {
    let sys = AttitudeSystem::new(design.clone());
    let mpc = config.mpc_config()?;
    let same_side = match design.convention {
        BranchConvention::NonNegative => 0.99 * PI,
        BranchConvention::NonPositive => -0.99 * PI,
    };
    let labels = ["rz_pi", "rz_minus_0p99pi", "rz_same_side"];
    let angles = [PI, -0.99 * PI, same_side];
    let runs = angles
        .iter()
        .map(|&a| run_from_rest(&sys, config, &mpc, a))
        .collect::<Result<Vec<_>>>()?;

    let mut report = ExperimentReport::new("discontinuity", config.experiment.seed).with_config(config);
    let worst_final = final_attitude_error(&runs[0]).max(final_attitude_error(&runs[1]));
    report.push(Verdict::below(
        "both runs reach d(g, I) below tolerance",
        worst_final,
        CONVERGENCE_TOL,
    ));
    let sign_product = match (first_nonzero_tau_z(&runs[0]), first_nonzero_tau_z(&runs[1])) {
        (Some(a), Some(b)) => a.signum() * b.signum(),
        _ => 0.0,
    };
    report.push(Verdict::below(
        "first nonzero tau_z of the two runs have opposite signs (sign product)",
        sign_product,
        0.0,
    ));
    if let Some(t) = first_nonzero_tau_z(&runs[0]) {
        report.push(Verdict::report("first nonzero tau_z from Rz(pi)", t));
    }
    if let Some(t) = first_nonzero_tau_z(&runs[1]) {
        report.push(Verdict::report("first nonzero tau_z from Rz(-0.99pi)", t));
    }
    report.push(Verdict::above(
        "straddling pair max torque difference",
        max_torque_difference(&runs[0], &runs[1]),
        STRADDLE_GAP,
    ));
    report.push(Verdict::at_most(
        "same-side pair max torque difference",
        max_torque_difference(&runs[0], &runs[2]),
        SAME_SIDE_TOL,
    ));

    if let Some(dir) = out_dir {
        let h = design.h();
        for (label, run) in labels.iter().zip(&runs) {
            report
                .csv_paths
                .extend(write_run_csv(dir, label, run, h, config.output.csv_every_steps)?);
        }
        let snapshots = dir.join("discontinuity_snapshots.csv");
        write_snapshots_csv(
            &snapshots,
            &[(labels[0], &runs[0].states), (labels[1], &runs[1].states)],
            h,
            config.experiment.snapshot_interval_seconds,
        )?;
        report.csv_paths.push(snapshots);
        report.write(dir)?;
    }
    Ok(DiscontinuityProbe {
        report,
        labels: labels.iter().map(|s| s.to_string()).collect(),
        angles: angles.to_vec(),
        runs,
    })
}

/// Worst-case structure errors of a torque-free rollout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConservationStats {
    /// `max_k max(‖gᵀg − I‖_F, ‖fᵀf − I‖_F)`.
    pub orthogonality: f64,
    /// `max_k ‖π_k − π_0‖ / max(‖π_0‖, 1)`.
    pub momentum_drift: f64,
    pub implicit_residual: f64,
}

pub fn conservation_stats(lgvi: &Lgvi, x0: &SpacecraftState, n_steps: usize) -> Result<ConservationStats> {
    let pi0 = lgvi.spatial_momentum(x0);
    let scale = pi0.norm().max(1.0);
    let mut x = *x0;
    let mut stats = ConservationStats {
        orthogonality: x.g.orthogonality_error().max(x.f.orthogonality_error()),
        momentum_drift: 0.0,
        implicit_residual: 0.0,
    };
    for step in 0..n_steps {
        let out = lgvi
            .step_checked(&x, &Torque::zeros(), 0.0)
            .map_err(|e| Error::RolloutFailure {
                step,
                reason: e.to_string(),
            })?;
        x = out.state;
        stats.orthogonality = stats
            .orthogonality
            .max(x.g.orthogonality_error())
            .max(x.f.orthogonality_error());
        stats.momentum_drift = stats
            .momentum_drift
            .max((lgvi.spatial_momentum(&x) - pi0).norm() / scale);
        stats.implicit_residual = stats.implicit_residual.max(out.implicit_residual);
    }
    Ok(stats)
}

/// Explicit Euler on `Ṙ = R·hat(ω)`, `Jω̇ = Jω × ω`; returns the largest
/// `‖RᵀR − I‖_F` seen.
pub fn forward_euler_orthogonality(
    lgvi: &Lgvi,
    g0: &RotationMatrix,
    omega0: &Vector3<f64>,
    n_steps: usize,
) -> f64 {
    let j = lgvi.inertia.matrix();
    let j_inv = lgvi.inertia.inverse();
    let h = lgvi.h;
    let mut r: Matrix3<f64> = *g0.matrix();
    let mut w = *omega0;
    let mut worst: f64 = 0.0;
    for _ in 0..n_steps {
        let r_next = r + r * hat(&w).matrix() * h;
        w += j_inv * (j * w).cross(&w) * h;
        r = r_next;
        worst = worst.max((r.transpose() * r - Matrix3::identity()).norm());
    }
    worst
}

/// Random attitude and body rate with components in `[−1, 1]` rad/s.
pub fn random_spinning_state(seed: u64) -> (RotationMatrix, Vector3<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    while axis.norm() < 1e-3 {
        axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    }
    let angle = rng.random_range(0.0..PI);
    let g = exp_so3(&(axis.normalize() * angle));
    let omega = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    (g, omega)
}

pub fn verify_conservation(config: &RunConfig, n_steps: usize, seed: u64) -> Result<ExperimentReport> {
    let lgvi = config.lgvi()?;
    let (g0, omega0) = random_spinning_state(seed);
    let x0 = SpacecraftState::with_rate(g0, &omega0, lgvi.h);
    let stats = conservation_stats(&lgvi, &x0, n_steps)?;
    let euler = forward_euler_orthogonality(&lgvi, &g0, &omega0, n_steps);

    let mut report = ExperimentReport::new("conservation", seed).with_config(config);
    report.push(Verdict::at_most(
        "orthogonality error of g and f",
        stats.orthogonality,
        CONSERVATION_TOL,
    ));
    report.push(Verdict::at_most(
        "relative spatial momentum drift",
        stats.momentum_drift,
        CONSERVATION_TOL,
    ));
    report.push(Verdict::report("implicit equation residual", stats.implicit_residual));
    report.push(Verdict::report("forward Euler orthogonality error", euler));
    report.push(Verdict::above(
        "forward Euler to integrator orthogonality ratio",
        euler / stats.orthogonality.max(f64::EPSILON),
        100.0,
    ));
    Ok(report)
}

pub fn certify_local_law(design: &TerminalDesign, n_samples: usize, seed: u64) -> ExperimentReport {
    certify_local_law_at(design, design.c, n_samples, seed)
}

/// Local-law conditions on fresh samples of `{F ≤ level}`.
pub fn certify_local_law_at(
    design: &TerminalDesign,
    level: f64,
    n_samples: usize,
    seed: u64,
) -> ExperimentReport {
    let margins = design.certify_at(level, n_samples, seed, crate::attitude::MIN_STEP_MARGIN);
    let mut report = ExperimentReport::new("local_law", seed);
    report.push(Verdict::report("terminal level c", level));
    report.push(Verdict::at_most(
        "decrease F(x+) - F(x) + L(x, kappa(x))",
        margins.decrease,
        DECREASE_TOL,
    ));
    report.push(Verdict::at_most("invariance F(x+) - c", margins.invariance, 0.0));
    if let Some(input) = margins.input {
        report.push(Verdict::at_most("input |kappa(x)|_inf - tau_max", input, 0.0));
    }
    report.push(Verdict::at_most(
        "samples leaving the chart or with unsolvable steps",
        margins.failures as f64,
        0.0,
    ));
    report
}

/// Worst margins of a recorded closed loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LyapunovAudit {
    /// `max_k V_cand(x_{k+1}) − V*(x_k) + L(x_k, u_k)`.
    pub candidate_chain: f64,
    pub infeasible_candidates: usize,
    /// `Σ L(x_k, u_k) − V*(x_0)`.
    pub summability: f64,
    /// `max_k V*(x_{k+1}) − V*(x_k) + L(x_k, u_k)`; depends on the solver.
    pub optimal_chain: f64,
    /// Largest increase of `min(V*(x_k), V_cand(x_k))` along the run.
    pub surrogate_increase: f64,
}

pub fn lyapunov_audit<S>(run: &ClosedLoopRun<S>) -> LyapunovAudit {
    let r = &run.records;
    let candidate_chain = r
        .iter()
        .filter_map(|x| x.decrease_margin)
        .fold(f64::NEG_INFINITY, f64::max);
    let infeasible_candidates = r
        .iter()
        .filter(|x| x.candidate_feasible == Some(false))
        .count();
    let summability = match r.first() {
        Some(first) => r.iter().map(|x| x.stage_cost).sum::<f64>() - first.v_star,
        None => 0.0,
    };
    let optimal_chain = r
        .windows(2)
        .map(|w| w[1].v_star - w[0].v_star + w[0].stage_cost)
        .fold(f64::NEG_INFINITY, f64::max);
    let surrogate: Vec<f64> = r
        .iter()
        .map(|x| x.v_candidate.map_or(x.v_star, |c| c.min(x.v_star)))
        .collect();
    let surrogate_increase = surrogate
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let finite_or_zero = |v: f64| if v.is_finite() { v } else { 0.0 };
    LyapunovAudit {
        candidate_chain: finite_or_zero(candidate_chain),
        infeasible_candidates,
        summability,
        optimal_chain: finite_or_zero(optimal_chain),
        surrogate_increase: finite_or_zero(surrogate_increase),
    }
}

pub fn audit_lyapunov<S>(run: &ClosedLoopRun<S>, seed: u64) -> ExperimentReport {
    let a = lyapunov_audit(run);
    let mut report = ExperimentReport::new("lyapunov", seed);
    report.push(Verdict::at_most(
        "candidate chain V_cand(x+) - V*(x) + L(x, u)",
        a.candidate_chain,
        CHAIN_TOL,
    ));
    report.push(Verdict::at_most(
        "infeasible shifted candidates",
        a.infeasible_candidates as f64,
        0.0,
    ));
    report.push(Verdict::at_most(
        "stage cost sum minus V*(x0)",
        a.summability,
        CHAIN_TOL,
    ));
    report.push(Verdict::at_most(
        "increase of min(V*, V_cand) along the run",
        a.surrogate_increase,
        CHAIN_TOL,
    ));
    report.push(Verdict::report(
        "optimal-value chain V*(x+) - V*(x) + L(x, u)",
        a.optimal_chain,
    ));
    report
}

/// Closed loop from the configured initial state followed by its audit.
pub fn run_lyapunov_audit(
    config: &RunConfig,
    design: &TerminalDesign,
    mpc: &MpcConfig,
    out_dir: Option<&Path>,
) -> Result<(ExperimentReport, ClosedLoopRun<SpacecraftState>)> {
    let sys = AttitudeSystem::new(design.clone());
    let x0 = config.initial_state()?;
    let run = closed_loop(&sys, &x0, mpc, &config.closed_loop_options())?;
    let mut report = audit_lyapunov(&run, config.experiment.seed).with_config(config);
    report.push(Verdict::report(
        "final distance to equilibrium",
        sys.distance(run.states.last().expect("nonempty"), &sys.equilibrium()),
    ));
    if let Some(dir) = out_dir {
        report.csv_paths = write_run_csv(dir, "lyapunov", &run, design.h(), config.output.csv_every_steps)?;
        report.write(dir)?;
    }
    Ok((report, run))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Conservation,
    LocalLaw,
    Lyapunov,
    Discontinuity,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["conservation", "local-law", "lyapunov", "discontinuity", "all"];

    pub fn needs_design(self) -> bool {
        !matches!(self, Suite::Conservation)
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conservation" => Ok(Suite::Conservation),
            "local-law" => Ok(Suite::LocalLaw),
            "lyapunov" => Ok(Suite::Lyapunov),
            "discontinuity" => Ok(Suite::Discontinuity),
            "all" => Ok(Suite::All),
            other => Err(Error::invalid(
                "suite",
                format!("unknown suite `{other}`; expected one of {}", Suite::NAMES.join(", ")),
            )),
        }
    }
}

/// Runs a suite; `design` is computed from the config when not supplied.
pub fn run_suite(
    suite: Suite,
    config: &RunConfig,
    design: Option<&TerminalDesign>,
    out_dir: Option<&Path>,
) -> Result<Vec<ExperimentReport>> {
    let computed;
    let design = match design {
        Some(d) => Some(d),
        None if suite.needs_design() => {
            computed = config.design()?;
            Some(&computed)
        }
        None => None,
    };
    let seed = config.experiment.seed;
    let mut reports = Vec::new();
    let wants = |s: Suite| suite == s || suite == Suite::All;
    if wants(Suite::Conservation) {
        let r = verify_conservation(config, config.experiment.conservation_steps, seed)?;
        if let Some(dir) = out_dir {
            r.write(dir)?;
        }
        reports.push(r);
    }
    if let Some(design) = design {
        if wants(Suite::LocalLaw) {
            let r = certify_local_law(design, config.experiment.certification_samples, seed)
                .with_config(config);
            if let Some(dir) = out_dir {
                r.write(dir)?;
            }
            reports.push(r);
        }
        if wants(Suite::Lyapunov) {
            let (r, _) = run_lyapunov_audit(config, design, &config.mpc_config()?, out_dir)?;
            reports.push(r);
        }
        if wants(Suite::Discontinuity) {
            reports.push(probe_discontinuity(config, design, out_dir)?.report);
        }
    }
    Ok(reports)
}
