use rand::Rng;

use super::{Action, ActionSpace, Environment, Step};
use crate::dataset::ActionLayout;
use crate::error::{Error, Result};
use crate::numkit::seeded_rng;

const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
// Half the pole length.
const LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = MASS_POLE * LENGTH;
const FORCE_MAG: f64 = 10.0;
const TAU: f64 = 0.02;
const THETA_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
const X_LIMIT: f64 = 2.4;
pub const MAX_STEPS: usize = 200;

/// Classic cart-pole balancing with explicit Euler integration.
///
/// State is `[x, x_dot, theta, theta_dot]`; action 0 pushes left, 1 pushes
/// right. Reward is 1 per step, episodes end when the pole leaves ±12°, the
/// cart leaves ±2.4, or after 200 steps.
#[derive(Clone, Debug, Default)]
pub struct CartPole {
    state: [f64; 4],
    steps: usize,
    done: bool,
}

impl CartPole {
    pub fn new() -> Self {
        Self {
            done: true,
            ..Default::default()
        }
    }

    pub fn state(&self) -> [f64; 4] {
        self.state
    }
}

impl Environment for CartPole {
    fn name(&self) -> &str {
        "cartpole"
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace {
            discrete: true,
            layout: ActionLayout::identity(&["left", "right"], &[false, false])
                .expect("static layout"),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        for s in &mut self.state {
            *s = rng.random_range(-0.05..0.05);
        }
        self.steps = 0;
        self.done = false;
        self.state.to_vec()
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        let push = match action {
            Action::Discrete(0) => -FORCE_MAG,
            Action::Discrete(1) => FORCE_MAG,
            other => return Err(Error::Shape(format!("cartpole expects action 0 or 1, got {other:?}"))),
        };
        let [x, x_dot, theta, theta_dot] = self.state;
        let (sin, cos) = theta.sin_cos();
        let temp = (push + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
        let theta_acc =
            (GRAVITY * sin - cos * temp) / (LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
        self.state = [
            x + TAU * x_dot,
            x_dot + TAU * x_acc,
            theta + TAU * theta_dot,
            theta_dot + TAU * theta_acc,
        ];
        self.steps += 1;
        let fell = self.state[0].abs() > X_LIMIT || self.state[2].abs() > THETA_LIMIT;
        self.done = fell || self.steps >= MAX_STEPS;
        Ok(Step {
            state: self.state.to_vec(),
            reward: 1.0,
            done: self.done,
        })
    }
}
