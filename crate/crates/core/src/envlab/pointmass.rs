use rand::Rng;

use super::{Action, ActionSpace, Environment, Step};
use crate::dataset::ActionLayout;
use crate::error::{Error, Result};
use crate::numkit::seeded_rng;

const DT: f64 = 0.1;
const MASS: f64 = 1.0;
const FORCE_LIMIT: f64 = 1.0;
pub const MAX_STEPS: usize = 100;

/// Frictionless 2-D point mass pushed toward the origin.
///
/// State is `[x, y, vx, vy]`, actions are force components clipped to ±1,
/// integrated with semi-implicit Euler. Reward is the negative distance to the
/// origin after each step. Resets place the mass uniformly in [-1, 1]² at rest.
#[derive(Clone, Debug, Default)]
pub struct PointMass {
    state: [f64; 4],
    steps: usize,
    done: bool,
}

impl PointMass {
    pub fn new() -> Self {
        Self {
            done: true,
            ..Default::default()
        }
    }

    /// Place the mass at an explicit state (test fixtures).
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.steps = 0;
        self.done = false;
    }
}

impl Environment for PointMass {
    fn name(&self) -> &str {
        "pointmass"
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace {
            discrete: false,
            layout: ActionLayout::identity(&["force_x", "force_y"], &[true, true])
                .expect("static layout"),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        self.state = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0, 0.0];
        self.steps = 0;
        self.done = false;
        self.state.to_vec()
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        let force = match action {
            Action::Continuous(f) if f.len() == 2 => f,
            other => return Err(Error::Shape(format!("pointmass expects 2 force components, got {other:?}"))),
        };
        if force.iter().any(|f| f.is_nan()) {
            return Err(Error::Numerical("NaN force".into()));
        }
        let [x, y, vx, vy] = self.state;
        let fx = force[0].clamp(-FORCE_LIMIT, FORCE_LIMIT);
        let fy = force[1].clamp(-FORCE_LIMIT, FORCE_LIMIT);
        let vx = vx + DT * fx / MASS;
        let vy = vy + DT * fy / MASS;
        self.state = [x + DT * vx, y + DT * vy, vx, vy];
        self.steps += 1;
        self.done = self.steps >= MAX_STEPS;
        Ok(Step {
            state: self.state.to_vec(),
            reward: -(self.state[0].hypot(self.state[1])),
            done: self.done,
        })
    }
}
