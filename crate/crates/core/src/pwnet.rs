//! Stage 2: the prototype-wrapper head, its imitation fit and reward evaluation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{ActionLayout, EncodedDataset, PolicyDecomposition};
use crate::discover::PrototypeSet;
use crate::envlab::{Action, ActionSpace, Actor, Environment};
use crate::error::{ensure_len, Error, Result};
use crate::numkit::{derive_seed, dot, seeded_rng, sq_dist, Matrix, MomentOptimizer};
use crate::textfmt::{join_floats, parse_floats, parse_token, Header};

pub const DEFAULT_EPS_SIM: f64 = 1e-5;

/// `log((d² + 1) / (d² + ε))`, written to stay accurate for large `d²`.
pub fn sim_sq(d2: f64, eps_sim: f64) -> f64 {
    ((1.0 - eps_sim) / (d2 + eps_sim)).ln_1p()
}

pub fn sim(u: &[f64], proto: &[f64], eps_sim: f64) -> f64 {
    sim_sq(sq_dist(u, proto), eps_sim)
}

/// d sim / d(d²).
fn sim_sq_derivative(d2: f64, eps_sim: f64) -> f64 {
    1.0 / (d2 + 1.0) - 1.0 / (d2 + eps_sim)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    /// p × d_z, trained in stage 2.
    pub projection: Matrix,
    /// Frozen.
    pub prototype_embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PWNetHead {
    pub slots: Vec<Slot>,
    /// A × K, fixed at construction.
    pub w_prime: Matrix,
    pub eps_sim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadForward {
    pub projected: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub action: Vec<f64>,
}

/// Class-identity weights: `W′[a][j] = 1` iff slot `j` belongs to class `a`.
pub fn class_identity_weights(actions: usize, slot_classes: &[usize]) -> Matrix {
    let mut w = Matrix::zeros(actions, slot_classes.len());
    for (j, &c) in slot_classes.iter().enumerate() {
        if c < actions {
            w.set(c, j, 1.0);
        }
    }
    w
}

impl PWNetHead {
    pub fn new(slots: Vec<Slot>, w_prime: Matrix, eps_sim: f64) -> Result<Self> {
        if !(eps_sim > 0.0 && eps_sim < 1.0) {
            return Err(Error::Config(format!("eps_sim {eps_sim} must lie in (0, 1)")));
        }
        if slots.is_empty() {
            return Err(Error::Shape("head needs at least one slot".into()));
        }
        ensure_len("W' columns", w_prime.cols(), slots.len())?;
        let (p, d_z) = (slots[0].projection.rows(), slots[0].projection.cols());
        for s in &slots {
            if s.projection.rows() != p || s.projection.cols() != d_z {
                return Err(Error::Shape("slot projections disagree in shape".into()));
            }
            ensure_len("prototype embedding", s.prototype_embedding.len(), p)?;
        }
        Ok(Self { slots, w_prime, eps_sim })
    }

    /// One slot per prototype, class-identity `W′`. Each projection starts as the
    /// rank-one map sending the prototype's `z` onto its embedding, plus seeded noise
    /// of scale `init_noise / √d_z`.
    pub fn from_prototypes(
        protos: &PrototypeSet,
        actions: usize,
        eps_sim: f64,
        init_noise: f64,
        seed: u64,
    ) -> Result<Self> {
        if !protos.is_embedded() {
            return Err(Error::Contract("prototypes must be embedded before wrapping".into()));
        }
        let mut rng = seeded_rng(seed);
        let mut slots = Vec::with_capacity(protos.entries.len());
        for e in &protos.entries {
            let (p, d_z) = (e.embedding.len(), e.z.len());
            let zz = dot(&e.z, &e.z);
            let scale = init_noise / (d_z as f64).sqrt();
            let mut proj = Matrix::zeros(p, d_z);
            for r in 0..p {
                for c in 0..d_z {
                    let rank_one = if zz > 0.0 { e.embedding[r] * e.z[c] / zz } else { 0.0 };
                    let noise: f64 = rng.sample(StandardNormal);
                    proj.set(r, c, rank_one + scale * noise);
                }
            }
            slots.push(Slot {
                projection: proj,
                prototype_embedding: e.embedding.clone(),
            });
        }
        let classes: Vec<usize> = protos.entries.iter().map(|e| e.class).collect();
        if let Some(&c) = classes.iter().find(|&&c| c >= actions) {
            return Err(Error::Shape(format!("prototype class {c} exceeds action count {actions}")));
        }
        Self::new(slots, class_identity_weights(actions, &classes), eps_sim)
    }

    pub fn latent_dim(&self) -> usize {
        self.slots[0].projection.cols()
    }

    pub fn prototype_dim(&self) -> usize {
        self.slots[0].projection.rows()
    }

    pub fn action_dim(&self) -> usize {
        self.w_prime.rows()
    }

    pub fn forward_full(&self, z: &[f64]) -> Result<HeadForward> {
        ensure_len("latent", z.len(), self.latent_dim())?;
        let mut projected = Vec::with_capacity(self.slots.len());
        let mut scores = Vec::with_capacity(self.slots.len());
        for s in &self.slots {
            let u = s.projection.matvec(z)?;
            scores.push(sim(&u, &s.prototype_embedding, self.eps_sim));
            projected.push(u);
        }
        let action = self.w_prime.matvec(&scores)?;
        Ok(HeadForward { projected, scores, action })
    }

    /// `a′ = W′ · sim(P_j z, e_j)` in class order.
    pub fn wrap_forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_full(z)?.action)
    }

    pub fn to_text(&self) -> String {
        let mut h = Header::new(HEAD_KIND);
        h.push("version", 1)
            .push("slots", self.slots.len())
            .push("actions", self.action_dim())
            .push("d_z", self.latent_dim())
            .push("p", self.prototype_dim())
            .push("eps_sim", self.eps_sim);
        let mut out = h.render();
        out.push('\n');
        for row in self.w_prime.row_iter() {
            out.push_str(&format!("w_prime {}\n", join_floats(row)));
        }
        for (j, s) in self.slots.iter().enumerate() {
            out.push_str(&format!("prototype {j} {}\n", join_floats(&s.prototype_embedding)));
            for row in s.projection.row_iter() {
                out.push_str(&format!("projection {j} {}\n", join_floats(row)));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let h = Header::parse_line(lines.next().unwrap_or_default(), HEAD_KIND)?;
        h.expect_version(1)?;
        let k: usize = h.parse("slots")?;
        let a: usize = h.parse("actions")?;
        let d_z: usize = h.parse("d_z")?;
        let p: usize = h.parse("p")?;
        let mut w = Vec::new();
        let mut protos: Vec<Option<Vec<f64>>> = vec![None; k];
        let mut projs: Vec<Vec<f64>> = vec![Vec::new(); k];
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let mut t = line.split(' ');
            match t.next().unwrap_or_default() {
                "w_prime" => {
                    let row = parse_floats(t, lineno)?;
                    if row.len() != k {
                        return Err(Error::format(lineno, "W' row has wrong length"));
                    }
                    w.extend(row);
                }
                tag @ ("prototype" | "projection") => {
                    let j: usize = parse_token(t.next(), lineno, "slot")?;
                    let v = parse_floats(t, lineno)?;
                    let want = if tag == "prototype" { p } else { d_z };
                    if j >= k || v.len() != want {
                        return Err(Error::format(lineno, format!("bad {tag} record")));
                    }
                    if tag == "prototype" {
                        protos[j] = Some(v);
                    } else {
                        projs[j].extend(v);
                    }
                }
                other => return Err(Error::format(lineno, format!("unknown record `{other}`"))),
            }
        }
        let w_prime = Matrix::from_vec(a, k, w).map_err(|_| Error::format(0, "W' has wrong row count"))?;
        let slots = protos
            .into_iter()
            .zip(projs)
            .map(|(e, pr)| {
                Ok(Slot {
                    prototype_embedding: e.ok_or_else(|| Error::format(0, "missing prototype record"))?,
                    projection: Matrix::from_vec(p, d_z, pr)
                        .map_err(|_| Error::format(0, "projection has wrong row count"))?,
                })
            })
            .collect::<Result<_>>()?;
        Self::new(slots, w_prime, h.parse("eps_sim")?).map_err(|e| Error::format(1, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

const HEAD_KIND: &str = "protoscope-head";

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub slot: usize,
    pub class: usize,
    pub dataset_index: usize,
    pub score: f64,
}

/// Slots ranked by similarity score, highest first; ties keep slot order.
pub fn explain(head: &PWNetHead, z: &[f64], protos: &PrototypeSet) -> Result<Vec<Explanation>> {
    ensure_len("prototype entries", protos.entries.len(), head.slots.len())?;
    let fwd = head.forward_full(z)?;
    let mut out: Vec<Explanation> = protos
        .entries
        .iter()
        .zip(fwd.scores)
        .enumerate()
        .map(|(slot, (e, score))| Explanation {
            slot,
            class: e.class,
            dataset_index: e.dataset_index,
            score,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub eps_sim: f64,
    /// Scale of the random part of the projection initialization.
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            lr: 1e-2,
            lr_decay: 0.97,
            eps_sim: DEFAULT_EPS_SIM,
            init_noise: 0.1,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub const KEYS: &'static [&'static str] = &[
        "stage2_epochs",
        "stage2_batch_size",
        "stage2_lr",
        "stage2_lr_decay",
        "eps_sim",
        "stage2_init_noise",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{k}`")))
        }
        match key {
            "stage2_epochs" => self.epochs = p(key, value)?,
            "stage2_batch_size" => self.batch_size = p(key, value)?,
            "stage2_lr" => self.lr = p(key, value)?,
            "stage2_lr_decay" => self.lr_decay = p(key, value)?,
            "eps_sim" => self.eps_sim = p(key, value)?,
            "stage2_init_noise" => self.init_noise = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let v = [
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.lr.to_string(),
            self.lr_decay.to_string(),
            self.eps_sim.to_string(),
            self.init_noise.to_string(),
        ];
        Self::KEYS.iter().copied().zip(v).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("stage2_batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0) {
            return Err(Error::Config("stage2 learning rate and decay must be positive".into()));
        }
        if !(self.eps_sim > 0.0 && self.eps_sim < 1.0) {
            return Err(Error::Config("eps_sim must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Imitation targets in class order.
pub fn targets(dataset: &EncodedDataset) -> Result<Vec<Vec<f64>>> {
    dataset.rows.iter().map(|r| dataset.meta.layout.flatten(&r.raw_action)).collect()
}

pub fn mse(head: &PWNetHead, zs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (z, t) in zs.iter().zip(targets) {
        let a = head.wrap_forward(z)?;
        ensure_len("target", t.len(), a.len())?;
        total += a.iter().zip(t).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        count += a.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Fraction of rows where `argmax a′` equals the row's label.
pub fn agreement(head: &PWNetHead, dataset: &EncodedDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(1.0);
    }
    let mut hits = 0usize;
    for r in &dataset.rows {
        let a = head.wrap_forward(&r.z)?;
        if crate::numkit::argmax(&a) == Some(r.label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}

/// MSE and its gradient w.r.t. every slot projection over one batch.
fn batch_gradient(head: &PWNetHead, zs: &[&[f64]], targets: &[&[f64]]) -> Result<(f64, Vec<Matrix>)> {
    let a_dim = head.action_dim();
    let norm = (zs.len() * a_dim) as f64;
    let mut grads: Vec<Matrix> = head
        .slots
        .iter()
        .map(|s| Matrix::zeros(s.projection.rows(), s.projection.cols()))
        .collect();
    let mut loss = 0.0;
    for (z, t) in zs.iter().zip(targets) {
        let fwd = head.forward_full(z)?;
        let resid: Vec<f64> = fwd.action.iter().zip(t.iter()).map(|(a, y)| a - y).collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>();
        // dL/dscore_j = Σ_a 2 r_a W′[a][j] / norm
        let g_scores = head.w_prime.matvec_t(&resid)?;
        for (j, slot) in head.slots.iter().enumerate() {
            let gs = 2.0 * g_scores[j] / norm;
            if gs == 0.0 {
                continue;
            }
            let u = &fwd.projected[j];
            let d2 = sq_dist(u, &slot.prototype_embedding);
            let coef = gs * sim_sq_derivative(d2, head.eps_sim) * 2.0;
            let g = &mut grads[j];
            for r in 0..g.rows() {
                let c = coef * (u[r] - slot.prototype_embedding[r]);
                for (dst, zc) in g.row_mut(r).iter_mut().zip(z.iter()) {
                    *dst += c * zc;
                }
            }
        }
    }
    Ok((loss / norm, grads))
}

/// Stage-2 imitation fit: only slot projections move. Returns per-epoch mean batch MSE.
pub fn train_stage2(head: &mut PWNetHead, dataset: &EncodedDataset, cfg: &Stage2Config) -> Result<Vec<f64>> {
    cfg.validate()?;
    ensure_len("dataset latent dim", dataset.meta.d_z, head.latent_dim())?;
    ensure_len("dataset action dim", dataset.meta.action_dim(), head.action_dim())?;
    let tgt = targets(dataset)?;
    let sizes: Vec<usize> = head.slots.iter().map(|s| s.projection.as_slice().len()).collect();
    let mut opt = MomentOptimizer::new(cfg.lr, &sizes);
    let mut rng = seeded_rng(derive_seed(cfg.seed, 0x5_7a9e));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.step_size = crate::discover::lr_at_epoch(cfg.lr, cfg.lr_decay, epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let zs: Vec<&[f64]> = chunk.iter().map(|&i| dataset.rows[i].z.as_slice()).collect();
            let ts: Vec<&[f64]> = chunk.iter().map(|&i| tgt[i].as_slice()).collect();
            let (loss, grads) = batch_gradient(head, &zs, &ts)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite stage-2 loss at epoch {epoch}")));
            }
            let mut params: Vec<&mut [f64]> = head.slots.iter_mut().map(|s| s.projection.as_mut_slice()).collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Matrix::as_slice).collect();
            opt.step(&mut params, &grad_refs)
                .map_err(|e| Error::Numerical(format!("stage 2, epoch {epoch}: {e}")))?;
            sum += loss;
            batches += 1;
        }
        history.push(if batches == 0 { 0.0 } else { sum / batches as f64 });
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardStats {
    pub rewards: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over √n; 0 for a single episode.
    pub stderr: f64,
    pub episodes: usize,
}

impl RewardStats {
    pub fn from_rewards(rewards: Vec<f64>) -> Self {
        let n = rewards.len();
        let mean = if n == 0 { 0.0 } else { rewards.iter().sum::<f64>() / n as f64 };
        let stderr = if n < 2 {
            0.0
        } else {
            let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Self {
            rewards,
            mean,
            stderr,
            episodes: n,
        }
    }
}

/// Total reward per episode; episode `k` resets with `derive_seed(seed, k)`.
pub fn evaluate<A, E>(actor: &A, env: &mut E, episodes: usize, seed: u64) -> Result<RewardStats>
where
    A: Actor + ?Sized,
    E: Environment + ?Sized,
{
    if episodes == 0 {
        return Err(Error::Config("episodes must be >= 1".into()));
    }
    let mut rewards = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let mut state = env.reset(derive_seed(seed, k as u64));
        let mut total = 0.0;
        loop {
            let step = env.step(&actor.act(&state)?)?;
            total += step.reward;
            if step.done {
                break;
            }
            state = step.state;
        }
        rewards.push(total);
    }
    Ok(RewardStats::from_rewards(rewards))
}

/// Class-ordered values back to the environment's raw action order.
pub fn unflatten(layout: &ActionLayout, flat: &[f64]) -> Result<Vec<f64>> {
    ensure_len("action values", flat.len(), layout.len())?;
    Ok(layout.order().iter().map(|&o| flat[o]).collect())
}

/// The black-box encoder followed by the prototype head.
pub struct WrappedPolicy<'a, P: ?Sized> {
    pub encoder: &'a P,
    pub head: &'a PWNetHead,
    pub space: ActionSpace,
}

impl<P: PolicyDecomposition + ?Sized> Actor for WrappedPolicy<'_, P> {
    fn act(&self, state: &[f64]) -> Result<Action> {
        let a = self.head.wrap_forward(&self.encoder.encode(state)?)?;
        self.space.greedy(&unflatten(&self.space.layout, &a)?)
    }
}
