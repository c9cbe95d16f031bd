//! Spacecraft attitude stabilization as a [`ManifoldSystem`].

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::lgvi::{SpacecraftState, Torque};
use crate::mpc::ManifoldSystem;
use crate::terminal::TerminalDesign;

/// Smallest accepted solvability margin of a predicted step.
pub const MIN_STEP_MARGIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AttitudeSystem {
    pub design: TerminalDesign,
    pub min_step_margin: f64,
}

fn torque(u: &[f64]) -> Result<Torque> {
    match u {
        [a, b, c] => Ok(Vector3::new(*a, *b, *c)),
        _ => Err(Error::invalid("torque", format!("expected 3 entries, got {}", u.len()))),
    }
}

impl AttitudeSystem {
    pub fn new(design: TerminalDesign) -> Self {
        Self {
            design,
            min_step_margin: MIN_STEP_MARGIN,
        }
    }
}

impl ManifoldSystem for AttitudeSystem {
    type State = SpacecraftState;

    fn input_dim(&self) -> usize {
        3
    }

    fn step(&self, x: &SpacecraftState, u: &[f64]) -> Result<SpacecraftState> {
        self.design
            .lgvi
            .step_checked(x, &torque(u)?, self.min_step_margin)
            .map(|o| o.state)
    }

    fn distance(&self, a: &SpacecraftState, b: &SpacecraftState) -> f64 {
        a.distance(b)
    }

    fn equilibrium(&self) -> SpacecraftState {
        SpacecraftState::identity()
    }

    fn stage_cost(&self, x: &SpacecraftState, u: &[f64]) -> f64 {
        match torque(u) {
            Ok(t) => self.design.stage_cost(x, &t),
            Err(_) => f64::INFINITY,
        }
    }

    fn terminal_cost(&self, x: &SpacecraftState) -> f64 {
        self.design.terminal_cost(x)
    }

    fn terminal_level(&self) -> f64 {
        self.design.c
    }

    fn in_terminal_set(&self, x: &SpacecraftState) -> bool {
        self.design.in_terminal_set(x)
    }

    fn local_law(&self, x: &SpacecraftState) -> Result<Vec<f64>> {
        self.design.local_law(x).map(|t| t.as_slice().to_vec())
    }

    fn seed_law(&self, x: &SpacecraftState) -> Vec<f64> {
        self.design.feedback(x).as_slice().to_vec()
    }

    fn input_bound(&self) -> Option<f64> {
        self.design.tau_max
    }

    fn sample_time(&self) -> f64 {
        self.design.h()
    }
}
