//! Run configuration. Keys carry their units; parse and validation errors
//! name the offending key by its dotted path.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::attitude::AttitudeSystem;
use crate::error::{Error, Result};
use crate::lgvi::{InertiaMatrix, Lgvi, SpacecraftState};
use crate::mpc::{ClosedLoopOptions, MpcConfig, SolverSettings};
use crate::so3::{exp_so3, BranchConvention};
use crate::terminal::{CalibrationSettings, StageWeights, TerminalDesign};

pub type Rows3 = [[f64; 3]; 3];

fn rows(m: &Matrix3<f64>) -> Rows3 {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

fn matrix(r: &Rows3) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicalConfig {
    pub inertia_kg_m2: Rows3,
    pub h_seconds: f64,
}

impl Default for PhysicalConfig {
    fn default() -> Self {
        Self {
            inertia_kg_m2: rows(InertiaMatrix::default().matrix()),
            h_seconds: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    #[serde(rename = "Q_g")]
    pub q_g: Rows3,
    /// Defaults to the inertia.
    #[serde(rename = "Q_f")]
    pub q_f: Option<Rows3>,
    #[serde(rename = "R")]
    pub r: Rows3,
    pub lambda: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        Self {
            q_g: rows(&Matrix3::identity()),
            q_f: None,
            r: rows(&(Matrix3::identity() * 2.0)),
            lambda: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub horizon_steps: usize,
    /// `null` means unbounded.
    pub tau_max_newton_meters: Option<f64>,
    pub branch_convention: BranchConvention,
    pub solver: SolverSettings,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self {
            horizon_steps: 10,
            tau_max_newton_meters: Some(100.0),
            branch_convention: BranchConvention::default(),
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub initial_axis_angle_radians: [f64; 3],
    pub initial_omega_radians_per_second: [f64; 3],
    pub n_steps: usize,
    pub convergence_tol_radians: f64,
    pub stop_when_converged: bool,
    pub seed: u64,
    pub conservation_steps: usize,
    pub certification_samples: usize,
    pub snapshot_interval_seconds: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            initial_axis_angle_radians: [0.0, 0.0, PI],
            initial_omega_radians_per_second: [0.0; 3],
            n_steps: 200,
            convergence_tol_radians: 1e-2,
            stop_when_converged: false,
            seed: 1,
            conservation_steps: 1000,
            certification_samples: 1000,
            snapshot_interval_seconds: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Write every n-th trajectory row.
    pub csv_every_steps: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            csv_every_steps: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub physical: PhysicalConfig,
    pub weights: WeightsConfig,
    pub mpc: MpcSection,
    pub calibration: CalibrationSettings,
    pub experiment: ExperimentConfig,
    pub output: OutputConfig,
}

fn rename(err: Error, key: &str) -> Error {
    match err {
        Error::InvalidParameter { reason, .. } => Error::invalid(key, reason),
        Error::NotPositiveDefinite { what } => {
            Error::invalid(key, format!("{what} is not symmetric positive-definite"))
        }
        other => other,
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(key, format!("must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    /// Parses and validates a JSON document.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "<root>".to_string() } else { path };
            Error::invalid(key, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.lgvi()?;
        self.weights()?;
        self.mpc_config()?;
        if let Some(t) = self.mpc.tau_max_newton_meters {
            positive("mpc.tau_max_newton_meters", t)?;
        }
        let c = &self.calibration;
        if c.n_samples == 0 {
            return Err(Error::invalid("calibration.n_samples", "must be at least 1"));
        }
        if !(c.shrink > 0.0 && c.shrink <= 1.0) {
            return Err(Error::invalid("calibration.shrink", "must lie in (0, 1]"));
        }
        positive("calibration.c_min", c.c_min)?;
        if !(c.min_step_margin >= 0.0) {
            return Err(Error::invalid("calibration.min_step_margin", "must be nonnegative"));
        }
        let e = &self.experiment;
        for (i, v) in e
            .initial_axis_angle_radians
            .iter()
            .chain(&e.initial_omega_radians_per_second)
            .enumerate()
        {
            if !v.is_finite() {
                let key = if i < 3 {
                    "experiment.initial_axis_angle_radians"
                } else {
                    "experiment.initial_omega_radians_per_second"
                };
                return Err(Error::invalid(key, "entries must be finite"));
            }
        }
        if Vector3::from(e.initial_axis_angle_radians).norm() > PI + 1e-12 {
            return Err(Error::invalid(
                "experiment.initial_axis_angle_radians",
                "rotation angle must not exceed pi",
            ));
        }
        positive("experiment.convergence_tol_radians", e.convergence_tol_radians)?;
        positive("experiment.snapshot_interval_seconds", e.snapshot_interval_seconds)?;
        if e.certification_samples == 0 {
            return Err(Error::invalid("experiment.certification_samples", "must be at least 1"));
        }
        if self.output.csv_every_steps == 0 {
            return Err(Error::invalid("output.csv_every_steps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn inertia(&self) -> Result<InertiaMatrix> {
        InertiaMatrix::new(matrix(&self.physical.inertia_kg_m2))
            .map_err(|e| rename(e, "physical.inertia_kg_m2"))
    }

    pub fn lgvi(&self) -> Result<Lgvi> {
        positive("physical.h_seconds", self.physical.h_seconds)?;
        Lgvi::new(self.inertia()?, self.physical.h_seconds)
    }

    pub fn weights(&self) -> Result<StageWeights> {
        let w = &self.weights;
        let q_f = match &w.q_f {
            Some(q) => matrix(q),
            None => *self.inertia()?.matrix(),
        };
        StageWeights::new(matrix(&w.q_g), q_f, matrix(&w.r), w.lambda).map_err(|e| match e {
            Error::InvalidParameter { name, reason } => {
                Error::invalid(format!("weights.{name}"), reason)
            }
            other => other,
        })
    }

    pub fn mpc_config(&self) -> Result<MpcConfig> {
        MpcConfig::new(self.mpc.horizon_steps, self.mpc.solver).map_err(|e| match e {
            Error::InvalidParameter { name, reason } if name == "horizon" => {
                Error::invalid("mpc.horizon_steps", reason)
            }
            Error::InvalidParameter { name, reason } => {
                Error::invalid(format!("mpc.{name}"), reason)
            }
            other => other,
        })
    }

    pub fn closed_loop_options(&self) -> ClosedLoopOptions {
        ClosedLoopOptions {
            n_steps: self.experiment.n_steps,
            convergence_tol: self.experiment.convergence_tol_radians,
            stop_when_converged: self.experiment.stop_when_converged,
        }
    }

    pub fn initial_state(&self) -> Result<SpacecraftState> {
        let g = exp_so3(&Vector3::from(self.experiment.initial_axis_angle_radians));
        let omega = Vector3::from(self.experiment.initial_omega_radians_per_second);
        Ok(SpacecraftState::with_rate(g, &omega, self.physical.h_seconds))
    }

    /// Runs the full terminal-design pipeline.
    pub fn design(&self) -> Result<TerminalDesign> {
        TerminalDesign::compute(
            self.lgvi()?,
            self.weights()?,
            self.mpc.tau_max_newton_meters,
            self.mpc.branch_convention,
            &self.calibration,
        )
    }

    pub fn attitude_system(&self, design: TerminalDesign) -> AttitudeSystem {
        AttitudeSystem::new(design)
    }
}
