//! CSV traces and the terminal-design JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lgvi::{InertiaMatrix, Lgvi, SpacecraftState};
use crate::mpc::StepRecord;
use crate::so3::BranchConvention;
use crate::terminal::{Certification, Matrix3x6, Matrix6, StageWeights, TerminalDesign};

pub const TRAJECTORY_HEADER: [&str; 26] = [
    "k", "t", "g11", "g12", "g13", "g21", "g22", "g23", "g31", "g32", "g33", "f11", "f12", "f13",
    "f21", "f22", "f23", "f31", "f32", "f33", "omega_x", "omega_y", "omega_z", "tau_x", "tau_y",
    "tau_z",
];

pub const DIAGNOSTICS_HEADER: [&str; 9] = [
    "k",
    "t",
    "V_star",
    "V_candidate",
    "L",
    "F_terminal",
    "feasible",
    "penalty_violation",
    "solver_iters",
];

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Rows `k, t, g, f, ω, τ`. `states` has one more entry than `torques`;
/// the final row carries empty torque fields. Only every `every`-th row
/// (and the last) is written.
pub fn write_trajectory_csv(
    path: &Path,
    states: &[SpacecraftState],
    torques: &[Vec<f64>],
    h: f64,
    every: usize,
) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRAJECTORY_HEADER)?;
    let every = every.max(1);
    for (k, x) in states.iter().enumerate() {
        if k % every != 0 && k + 1 != states.len() {
            continue;
        }
        let mut row = vec![k.to_string(), num(k as f64 * h)];
        row.extend(x.g.to_row_major().iter().map(|v| num(*v)));
        row.extend(x.f.to_row_major().iter().map(|v| num(*v)));
        row.extend(x.angular_velocity(h).iter().map(|v| num(*v)));
        match torques.get(k) {
            Some(u) => row.extend(u.iter().map(|v| num(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), 3)),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_diagnostics_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DIAGNOSTICS_HEADER)?;
    for r in records {
        w.write_record([
            r.k.to_string(),
            num(r.t),
            num(r.v_star),
            r.v_candidate.map(num).unwrap_or_default(),
            num(r.stage_cost),
            num(r.terminal_value),
            r.feasible.to_string(),
            num(r.violation),
            r.iterations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Attitude every `interval` seconds as `label, k, t, g11 … g33`.
pub fn write_snapshots_csv(
    path: &Path,
    runs: &[(&str, &[SpacecraftState])],
    h: f64,
    interval: f64,
) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["run", "k", "t"];
    header.extend(&TRAJECTORY_HEADER[2..11]);
    w.write_record(&header)?;
    let stride = ((interval / h).round() as usize).max(1);
    for (label, states) in runs {
        for (k, x) in states.iter().enumerate().step_by(stride) {
            let mut row = vec![label.to_string(), k.to_string(), num(k as f64 * h)];
            row.extend(x.g.to_row_major().iter().map(|v| num(*v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Flat JSON form of a [`TerminalDesign`]. Matrices are row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignDocument {
    pub h: f64,
    #[serde(rename = "J")]
    pub j: Vec<f64>,
    #[serde(rename = "Q_g")]
    pub q_g: Vec<f64>,
    #[serde(rename = "Q_f")]
    pub q_f: Vec<f64>,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    pub lambda: f64,
    #[serde(rename = "P")]
    pub p: Vec<f64>,
    #[serde(rename = "K")]
    pub k: Vec<f64>,
    pub c: f64,
    pub tau_max: Option<f64>,
    pub branch_convention: BranchConvention,
    pub dare_residual: f64,
    pub spectral_radius: f64,
    pub certification: Option<Certification>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

fn row_major<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> Vec<f64> {
    (0..R).flat_map(|i| (0..C).map(move |j| m[(i, j)])).collect()
}

fn from_row_major<const R: usize, const C: usize>(
    key: &str,
    v: &[f64],
) -> Result<nalgebra::SMatrix<f64, R, C>> {
    if v.len() != R * C || !v.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid(
            key,
            format!("expected {} finite values, got {}", R * C, v.len()),
        ));
    }
    Ok(nalgebra::SMatrix::from_row_slice(v))
}

impl DesignDocument {
    pub fn from_design(design: &TerminalDesign, config: Option<serde_json::Value>) -> Self {
        let w = &design.weights;
        Self {
            h: design.h(),
            j: row_major(design.lgvi.inertia.matrix()),
            q_g: row_major(&w.q_g),
            q_f: row_major(&w.q_f),
            r: row_major(&w.r),
            lambda: w.lambda,
            p: row_major(&design.p),
            k: row_major(&design.k),
            c: design.c,
            tau_max: design.tau_max,
            branch_convention: design.convention,
            dare_residual: design.dare_residual,
            spectral_radius: design.spectral_radius,
            certification: design.certification,
            config,
        }
    }

    pub fn to_design(&self) -> Result<TerminalDesign> {
        let inertia = InertiaMatrix::new(from_row_major::<3, 3>("J", &self.j)?)?;
        let m3 = |key, v: &[f64]| from_row_major::<3, 3>(key, v);
        let weights: StageWeights = StageWeights::new(
            m3("Q_g", &self.q_g)?,
            m3("Q_f", &self.q_f)?,
            m3("R", &self.r)?,
            self.lambda,
        )?;
        let p: Matrix6 = from_row_major("P", &self.p)?;
        if p.cholesky().is_none() || (p - p.transpose()).norm() > 1e-9 * p.norm() {
            return Err(Error::NotPositiveDefinite { what: "terminal weight P" });
        }
        let k: Matrix3x6 = from_row_major("K", &self.k)?;
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::invalid("c", "terminal level must be positive"));
        }
        Ok(TerminalDesign {
            lgvi: Lgvi::new(inertia, self.h)?,
            weights,
            p,
            k,
            c: self.c,
            tau_max: self.tau_max,
            convention: self.branch_convention,
            dare_residual: self.dare_residual,
            spectral_radius: self.spectral_radius,
            certification: self.certification,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| Error::invalid(e.path().to_string(), e.into_inner().to_string()))
    }
}
