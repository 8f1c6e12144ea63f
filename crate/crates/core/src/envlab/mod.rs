//! Desk-scale environments, the trainable black-box policy and baseline
//! prototype selectors.

mod baselines;
mod blackbox;
mod cartpole;
mod pointmass;

pub use baselines::{canonical_prototypes, class_mean_prototypes, kmeans_prototypes};
pub use blackbox::{default_target, score_policy, train_blackbox, BlackBoxConfig, BlackBoxPolicy};
pub use cartpole::CartPole;
pub use pointmass::PointMass;

use crate::dataset::ActionLayout;
use crate::error::{Error, Result};
use crate::numkit::argmax;

#[derive(Clone, Debug, PartialEq)]
pub struct ActionSpace {
    pub discrete: bool,
    pub layout: ActionLayout,
}

impl ActionSpace {
    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    /// Greedy action from policy outputs: argmax for discrete spaces, the outputs themselves otherwise.
    pub fn greedy(&self, values: &[f64]) -> Result<Action> {
        crate::error::ensure_len("action values", values.len(), self.dim())?;
        if self.discrete {
            argmax(values)
                .map(Action::Discrete)
                .ok_or_else(|| Error::Shape("empty action vector".into()))
        } else {
            Ok(Action::Continuous(values.to_vec()))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<Step>;
}

/// Anything that maps a state to an executable action.
pub trait Actor {
    fn act(&self, state: &[f64]) -> Result<Action>;
}

pub const ENV_NAMES: &[&str] = &["cartpole", "pointmass"];

pub fn make_env(name: &str) -> Result<Box<dyn Environment + Send>> {
    match name {
        "cartpole" => Ok(Box::new(CartPole::new())),
        "pointmass" => Ok(Box::new(PointMass::new())),
        other => Err(Error::Config(format!(
            "unknown environment `{other}` (expected one of {})",
            ENV_NAMES.join(", ")
        ))),
    }
}
