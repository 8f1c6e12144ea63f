use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{make_env, Action, ActionSpace, Actor, Environment};
use crate::dataset::PolicyDecomposition;
use crate::error::{Error, Result};
use crate::numkit::{derive_seed, seeded_rng, Matrix};
use crate::textfmt::{check_name, join_floats, parse_floats, Header};

/// `π(s) = W · tanh(W₁ s + b₁) + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlackBoxPolicy {
    pub env_name: String,
    pub encoder_weight: Matrix,
    pub encoder_bias: Vec<f64>,
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub discrete: bool,
    pub method: String,
    pub seed: u64,
    /// Mean evaluation reward when training stopped.
    pub achieved: f64,
}

impl PolicyDecomposition for BlackBoxPolicy {
    fn encode(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.encoder_weight.matvec(state)?;
        h.iter_mut()
            .zip(&self.encoder_bias)
            .for_each(|(v, b)| *v = (*v + b).tanh());
        Ok(h)
    }

    fn final_weight(&self) -> &Matrix {
        &self.weight
    }

    fn final_bias(&self) -> &[f64] {
        &self.bias
    }
}

impl Actor for BlackBoxPolicy {
    fn act(&self, state: &[f64]) -> Result<Action> {
        let values = self.action_values(state)?;
        if self.discrete {
            Ok(Action::Discrete(crate::numkit::argmax(&values).unwrap_or(0)))
        } else {
            Ok(Action::Continuous(values))
        }
    }
}

const POLICY_KIND: &str = "protoscope-policy";

impl BlackBoxPolicy {
    fn param_count(state_dim: usize, d_z: usize, actions: usize) -> usize {
        d_z * state_dim + d_z + actions * d_z + actions
    }

    fn from_params(
        params: &[f64],
        state_dim: usize,
        d_z: usize,
        space: &ActionSpace,
        env_name: &str,
    ) -> Self {
        let a = space.dim();
        let (w1, rest) = params.split_at(d_z * state_dim);
        let (b1, rest) = rest.split_at(d_z);
        let (w, b) = rest.split_at(a * d_z);
        Self {
            env_name: env_name.to_string(),
            encoder_weight: Matrix::from_vec(d_z, state_dim, w1.to_vec()).expect("sized"),
            encoder_bias: b1.to_vec(),
            weight: Matrix::from_vec(a, d_z, w.to_vec()).expect("sized"),
            bias: b.to_vec(),
            discrete: space.discrete,
            method: "cem".into(),
            seed: 0,
            achieved: f64::NAN,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.encoder_weight.cols()
    }

    /// Rescale and shift the final layer so logits over `states` lie in
    /// `[low, low + span]`. A positive scale plus a shift shared by all actions
    /// keeps every greedy choice unchanged. Discrete policies only.
    pub fn calibrate_logits(&mut self, states: &[Vec<f64>], low: f64, span: f64) -> Result<()> {
        if !self.discrete || states.is_empty() {
            return Ok(());
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in states {
            for v in self.action_values(s)? {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let scale = if hi > lo { span / (hi - lo) } else { 1.0 };
        self.weight.as_mut_slice().iter_mut().for_each(|w| *w *= scale);
        let shift = low - lo * scale;
        self.bias.iter_mut().for_each(|b| *b = *b * scale + shift);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut h = Header::new(POLICY_KIND);
        h.push("version", 1)
            .push("env", &self.env_name)
            .push("state_dim", self.state_dim())
            .push("d_z", self.latent_dim())
            .push("actions", self.action_dim())
            .push("discrete", self.discrete)
            .push("method", &self.method)
            .push("seed", self.seed)
            .push("achieved", self.achieved);
        let mut out = h.render();
        out.push('\n');
        for r in self.encoder_weight.row_iter() {
            out.push_str(&format!("encoder_weight {}\n", join_floats(r)));
        }
        out.push_str(&format!("encoder_bias {}\n", join_floats(&self.encoder_bias)));
        for r in self.weight.row_iter() {
            out.push_str(&format!("weight {}\n", join_floats(r)));
        }
        out.push_str(&format!("bias {}\n", join_floats(&self.bias)));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let h = Header::parse_line(lines.next().unwrap_or_default(), POLICY_KIND)?;
        h.expect_version(1)?;
        let state_dim: usize = h.parse("state_dim")?;
        let d_z: usize = h.parse("d_z")?;
        let a: usize = h.parse("actions")?;
        let mut ew = Vec::new();
        let mut eb = None;
        let mut w = Vec::new();
        let mut b = None;
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let mut t = line.split(' ');
            let tag = t.next().unwrap_or_default();
            let v = parse_floats(t, lineno)?;
            let want = match tag {
                "encoder_weight" => state_dim,
                "encoder_bias" | "weight" => d_z,
                "bias" => a,
                other => return Err(Error::format(lineno, format!("unknown record `{other}`"))),
            };
            if v.len() != want {
                return Err(Error::format(lineno, format!("`{tag}` needs {want} values")));
            }
            match tag {
                "encoder_weight" => ew.extend(v),
                "encoder_bias" => eb = Some(v),
                "weight" => w.extend(v),
                _ => b = Some(v),
            }
        }
        let missing = |what: &str| Error::format(0, format!("missing or short `{what}` records"));
        Ok(Self {
            env_name: h.get("env")?.to_string(),
            encoder_weight: Matrix::from_vec(d_z, state_dim, ew).map_err(|_| missing("encoder_weight"))?,
            encoder_bias: eb.ok_or_else(|| missing("encoder_bias"))?,
            weight: Matrix::from_vec(a, d_z, w).map_err(|_| missing("weight"))?,
            bias: b.ok_or_else(|| missing("bias"))?,
            discrete: h.parse("discrete")?,
            method: h.get("method")?.to_string(),
            seed: h.parse("seed")?,
            achieved: h.parse("achieved")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        check_name(&self.env_name)?;
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlackBoxConfig {
    pub d_z: usize,
    pub population: usize,
    pub elite: usize,
    pub init_std: f64,
    /// Extra standard deviation added each iteration so the search never collapses.
    pub extra_std: f64,
    pub max_iters: usize,
    /// Episodes per candidate during search.
    pub train_episodes: usize,
    /// Episodes for the stopping check.
    pub eval_episodes: usize,
    /// Mean evaluation reward that stops the search; `None` uses the env default.
    pub target: Option<f64>,
    /// Discrete logits are mapped into `[1, 1 + logit_span]` after training.
    pub logit_span: f64,
}

impl Default for BlackBoxConfig {
    fn default() -> Self {
        Self {
            d_z: 8,
            population: 64,
            elite: 10,
            init_std: 0.5,
            extra_std: 0.02,
            max_iters: 60,
            train_episodes: 3,
            eval_episodes: 20,
            target: None,
            logit_span: 3.0,
        }
    }
}

pub fn default_target(env_name: &str) -> Result<f64> {
    match env_name {
        "cartpole" => Ok(195.0),
        "pointmass" => Ok(-25.0),
        other => Err(Error::Config(format!("no default training target for `{other}`"))),
    }
}

fn mean_reward(policy: &BlackBoxPolicy, env: &mut dyn Environment, episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..episodes {
        let mut state = env.reset(derive_seed(seed, k as u64));
        loop {
            let step = env.step(&policy.act(&state)?)?;
            total += step.reward;
            if step.done {
                break;
            }
            state = step.state;
        }
    }
    Ok(total / episodes as f64)
}

fn visited_states(policy: &BlackBoxPolicy, env: &mut dyn Environment, episodes: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for k in 0..episodes {
        let mut state = env.reset(derive_seed(seed, k as u64));
        loop {
            out.push(state.clone());
            let step = env.step(&policy.act(&state)?)?;
            if step.done {
                break;
            }
            state = step.state;
        }
    }
    Ok(out)
}

/// Cross-entropy search over all policy parameters. Candidates in one iteration
/// share episode seeds; the stopping check uses a separate seed stream.
pub fn train_blackbox(env_name: &str, cfg: &BlackBoxConfig, seed: u64) -> Result<BlackBoxPolicy> {
    let probe = make_env(env_name)?;
    let space = probe.action_space();
    let state_dim = probe.state_dim();
    drop(probe);
    let target = match cfg.target {
        Some(t) => t,
        None => default_target(env_name)?,
    };
    if cfg.population == 0 || cfg.elite == 0 || cfg.elite > cfg.population || cfg.d_z == 0 {
        return Err(Error::Config("need 1 <= elite <= population and d_z >= 1".into()));
    }
    if cfg.train_episodes == 0 || cfg.eval_episodes == 0 {
        return Err(Error::Config("episode counts must be >= 1".into()));
    }
    let n = BlackBoxPolicy::param_count(state_dim, cfg.d_z, space.dim());
    let mut rng = seeded_rng(derive_seed(seed, 0));
    let mut mean = vec![0.0; n];
    let mut std = vec![cfg.init_std; n];
    let mut best = f64::NEG_INFINITY;

    for iter in 0..cfg.max_iters {
        let candidates: Vec<Vec<f64>> = (0..cfg.population)
            .map(|_| {
                (0..n)
                    .map(|k| mean[k] + std[k] * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let episode_seed = derive_seed(seed, 1_000 + iter as u64);
        let scores: Vec<f64> = candidates
            .par_iter()
            .map(|p| {
                let pol = BlackBoxPolicy::from_params(p, state_dim, cfg.d_z, &space, env_name);
                let mut env = make_env(env_name)?;
                mean_reward(&pol, env.as_mut(), cfg.train_episodes, episode_seed)
            })
            .collect::<Result<_>>()?;
        let mut ranked: Vec<usize> = (0..cfg.population).collect();
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let elites = &ranked[..cfg.elite];
        for k in 0..n {
            let m = elites.iter().map(|&e| candidates[e][k]).sum::<f64>() / cfg.elite as f64;
            let v = elites.iter().map(|&e| (candidates[e][k] - m).powi(2)).sum::<f64>() / cfg.elite as f64;
            mean[k] = m;
            std[k] = v.sqrt() + cfg.extra_std;
        }

        let mut policy = BlackBoxPolicy::from_params(&mean, state_dim, cfg.d_z, &space, env_name);
        let mut env = make_env(env_name)?;
        let eval_seed = derive_seed(seed, 1);
        let score = mean_reward(&policy, env.as_mut(), cfg.eval_episodes, eval_seed)?;
        best = best.max(score);
        if score >= target {
            let states = visited_states(&policy, env.as_mut(), cfg.eval_episodes, eval_seed)?;
            policy.calibrate_logits(&states, 1.0, cfg.logit_span)?;
            policy.seed = seed;
            policy.achieved = score;
            return Ok(policy);
        }
    }
    Err(Error::TrainingFailed { best })
}

/// Mean reward of `policy` over `episodes` episodes of its own environment.
pub fn score_policy(policy: &BlackBoxPolicy, episodes: usize, seed: u64) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be >= 1".into()));
    }
    let mut env = make_env(&policy.env_name)?;
    mean_reward(policy, env.as_mut(), episodes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_iterations_fail() {
        let cfg = BlackBoxConfig {
            max_iters: 0,
            ..Default::default()
        };
        assert!(matches!(
            train_blackbox("cartpole", &cfg, 1),
            Err(Error::TrainingFailed { .. })
        ));
    }

    #[test]
    fn calibration_preserves_greedy_actions() {
        let space = make_env("cartpole").unwrap().action_space();
        let mut rng = seeded_rng(3);
        let n = BlackBoxPolicy::param_count(4, 8, 2);
        let params: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
        let pol = BlackBoxPolicy::from_params(&params, 4, 8, &space, "cartpole");
        let states: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..4).map(|_| rng.random_range(-0.5..0.5)).collect())
            .collect();
        let mut cal = pol.clone();
        cal.calibrate_logits(&states, 1.0, 6.0).unwrap();
        for s in &states {
            assert_eq!(pol.act(s).unwrap(), cal.act(s).unwrap());
            for v in cal.action_values(s).unwrap() {
                assert!((1.0 - 1e-9..=7.0 + 1e-9).contains(&v));
            }
        }
    }

    #[test]
    fn policy_file_round_trip() {
        let space = make_env("pointmass").unwrap().action_space();
        let params: Vec<f64> = (0..BlackBoxPolicy::param_count(4, 3, 2)).map(|k| k as f64 * 0.1 - 1.0).collect();
        let mut pol = BlackBoxPolicy::from_params(&params, 4, 3, &space, "pointmass");
        pol.achieved = -12.5;
        assert_eq!(BlackBoxPolicy::from_text(&pol.to_text()).unwrap(), pol);
    }
}
