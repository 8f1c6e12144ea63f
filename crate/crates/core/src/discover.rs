//! Stage 1: train the mapping net and proxies on a dataset, then ground each
//! momentum proxy in its nearest real instance.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::dataset::EncodedDataset;
use crate::embednet::{total_loss, LossConfig, MappingNet, ProxyBank, SignMode};
use crate::error::{ensure_len, Error, Result};
use crate::manifold::{build_charts_with, pairwise_similarity_with, SimilarityParams};
use crate::numkit::{derive_seed, seeded_rng, sq_dist, Matrix, MomentOptimizer};
use crate::textfmt::{check_name, join_floats, parse_floats, parse_token, Header};

/// Space in which batch charts and similarity targets are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ChartSpace {
    /// Raw encoded states `z`.
    #[default]
    Input,
    /// Current embeddings `h(z)`, held constant within the batch.
    Embedding,
}

impl fmt::Display for ChartSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChartSpace::Input => "input",
            ChartSpace::Embedding => "embedding",
        })
    }
}

impl FromStr for ChartSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(ChartSpace::Input),
            "embedding" => Ok(ChartSpace::Embedding),
            other => Err(Error::Config(format!("unknown chart space `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_net: f64,
    pub lr_proxy: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub eps_margin: f64,
    pub delta: f64,
    pub similarity: SimilarityParams,
    pub prototypes_per_class: usize,
    pub prototype_dim: usize,
    pub sign_mode: SignMode,
    pub chart_space: ChartSpace,
    pub seed: u64,
    /// Worker threads for chart building and similarity; 1 runs single-threaded.
    pub workers: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr_net: 1e-3,
            lr_proxy: 1e-3,
            lr_decay: 0.97,
            gamma: 0.999,
            alpha: 32.0,
            eps_margin: 0.1,
            delta: 2.0,
            similarity: SimilarityParams::default(),
            prototypes_per_class: 1,
            prototype_dim: 50,
            sign_mode: SignMode::Semantic,
            chart_space: ChartSpace::Input,
            seed: 0,
            workers: 1,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_auto(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn show_auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |n| n.to_string())
}

impl Stage1Config {
    /// Keys accepted by [`Stage1Config::set`], in canonical order.
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "batch_size",
        "lr_net",
        "lr_proxy",
        "lr_decay",
        "gamma",
        "alpha",
        "eps_margin",
        "delta",
        "m",
        "threshold",
        "n_alpha",
        "n_beta",
        "n_anchors",
        "k_max_neighbors",
        "prototypes_per_class",
        "prototype_dim",
        "sign_mode",
        "chart_space",
        "seed",
    ];

    /// Set one field by key. Returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr_net" => self.lr_net = parse_value(key, value)?,
            "lr_proxy" => self.lr_proxy = parse_value(key, value)?,
            "lr_decay" => self.lr_decay = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "eps_margin" => self.eps_margin = parse_value(key, value)?,
            "delta" => self.delta = parse_value(key, value)?,
            "m" => self.similarity.m = parse_value(key, value)?,
            "threshold" => self.similarity.threshold = parse_value(key, value)?,
            "n_alpha" => self.similarity.n_alpha = parse_value(key, value)?,
            "n_beta" => self.similarity.n_beta = parse_value(key, value)?,
            "n_anchors" => self.similarity.n_anchors = parse_auto(key, value)?,
            "k_max_neighbors" => self.similarity.k_max_neighbors = parse_auto(key, value)?,
            "prototypes_per_class" => self.prototypes_per_class = parse_value(key, value)?,
            "prototype_dim" => self.prototype_dim = parse_value(key, value)?,
            "sign_mode" => self.sign_mode = value.parse()?,
            "chart_space" => self.chart_space = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let s = &self.similarity;
        let values = [
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.lr_net.to_string(),
            self.lr_proxy.to_string(),
            self.lr_decay.to_string(),
            self.gamma.to_string(),
            self.alpha.to_string(),
            self.eps_margin.to_string(),
            self.delta.to_string(),
            s.m.to_string(),
            s.threshold.to_string(),
            s.n_alpha.to_string(),
            s.n_beta.to_string(),
            show_auto(s.n_anchors),
            show_auto(s.k_max_neighbors),
            self.prototypes_per_class.to_string(),
            self.prototype_dim.to_string(),
            self.sign_mode.to_string(),
            self.chart_space.to_string(),
            self.seed.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    /// Hard errors for invalid values, soft warnings otherwise.
    pub fn validate(&self) -> Result<Vec<String>> {
        let positive = [
            ("lr_net", self.lr_net),
            ("lr_proxy", self.lr_proxy),
            ("lr_decay", self.lr_decay),
            ("alpha", self.alpha),
            ("delta", self.delta),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        if !(self.eps_margin >= 0.0) {
            return Err(Error::Config("`eps_margin` must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("`gamma` {} outside [0, 1]", self.gamma)));
        }
        if self.batch_size == 0 || self.prototypes_per_class == 0 || self.prototype_dim < 2 || self.workers == 0 {
            return Err(Error::Config(
                "batch_size, prototypes_per_class and workers must be >= 1; prototype_dim >= 2".into(),
            ));
        }
        if self.batch_size < self.similarity.m + 1 {
            return Err(Error::Config(format!(
                "batch_size {} too small for m = {}",
                self.batch_size, self.similarity.m
            )));
        }
        self.similarity.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            eps_margin: self.eps_margin,
            delta: self.delta,
            sign_mode: self.sign_mode,
        }
    }
}

/// `lr₀ · decay^epoch`.
pub fn lr_at_epoch(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Batch-mean losses for one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub pa_loss: f64,
    pub manifold_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedState {
    pub config: Stage1Config,
    pub net: MappingNet,
    pub bank: ProxyBank,
    pub loss_history: Vec<EpochSummary>,
}

pub fn momentum_update(bank: &mut ProxyBank) {
    bank.momentum_update();
}

pub fn init_state(d_z: usize, classes: usize, cfg: &Stage1Config) -> TrainedState {
    let mut rng = seeded_rng(derive_seed(cfg.seed, 0));
    let net = MappingNet::init(d_z, cfg.prototype_dim, &mut rng);
    let bank = ProxyBank::init(classes, cfg.prototypes_per_class, cfg.prototype_dim, cfg.gamma, &mut rng);
    TrainedState {
        config: cfg.clone(),
        net,
        bank,
        loss_history: Vec::new(),
    }
}

/// Train stage 1.
///
/// Each epoch shuffles the rows, drops the trailing partial batch, and per batch
/// builds fresh charts, evaluates the joint loss, and takes one step with each
/// optimizer. The momentum proxies and both learning rates update once per epoch.
pub fn train_stage1(dataset: &EncodedDataset, cfg: &Stage1Config) -> Result<TrainedState> {
    cfg.validate()?;
    let n = dataset.len();
    if n < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset has {n} rows, fewer than batch_size {}",
            cfg.batch_size
        )));
    }
    if let Some(c) = dataset.class_counts().iter().position(|&k| k == 0) {
        return Err(Error::Config(format!("class {c} has no rows in the dataset")));
    }
    let mut state = init_state(dataset.meta.d_z, dataset.classes(), cfg);
    if cfg.epochs == 0 {
        return Ok(state);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let parallel = cfg.workers > 1;
    let loss_cfg = cfg.loss_config();
    let mut opt_net = MomentOptimizer::new(
        cfg.lr_net,
        &[state.net.weight.as_slice().len(), state.net.bias.len()],
    );
    let mut opt_proxy = MomentOptimizer::new(cfg.lr_proxy, &[state.bank.theta_q.len()]);
    let mut shuffle_rng = seeded_rng(derive_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        opt_net.step_size = lr_at_epoch(cfg.lr_net, cfg.lr_decay, epoch);
        opt_proxy.step_size = lr_at_epoch(cfg.lr_proxy, cfg.lr_decay, epoch);
        order.shuffle(&mut shuffle_rng);
        let epoch_seed = derive_seed(cfg.seed, 2 + epoch as u64);
        let mut sums = (0.0, 0.0, 0.0);
        let batches = n / cfg.batch_size;
        for (b, chunk) in order.chunks_exact(cfg.batch_size).enumerate() {
            let zs: Vec<Vec<f64>> = chunk.iter().map(|&i| dataset.rows[i].z.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.rows[i].label).collect();
            let chart_points = match cfg.chart_space {
                ChartSpace::Input => zs.clone(),
                ChartSpace::Embedding => zs.iter().map(|z| state.net.forward(z)).collect::<Result<_>>()?,
            };
            let batch_seed = derive_seed(epoch_seed, b as u64);
            let similarity = pool.install(|| {
                let charts = build_charts_with(&chart_points, &cfg.similarity, batch_seed, parallel)?;
                pairwise_similarity_with(&chart_points, &charts, &cfg.similarity, parallel)
            })?;
            let lb = total_loss(&state.net, &state.bank, &zs, &labels, &similarity, &loss_cfg)?;
            if !lb.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {b}"
                )));
            }
            opt_net
                .step(
                    &mut [state.net.weight.as_mut_slice(), &mut state.net.bias],
                    &[lb.grads.weight.as_slice(), &lb.grads.bias],
                )
                .map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {b}: {e}")))?;
            opt_proxy
                .step(&mut [&mut state.bank.theta_q], &[&lb.grads.theta_q])
                .map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {b}: {e}")))?;
            sums.0 += lb.pa_loss;
            sums.1 += lb.manifold_loss;
            sums.2 += lb.total;
        }
        momentum_update(&mut state.bank);
        let k = batches as f64;
        state.loss_history.push(EpochSummary {
            pa_loss: sums.0 / k,
            manifold_loss: sums.1 / k,
            total: sums.2 / k,
        });
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeEntry {
    pub class: usize,
    pub slot: usize,
    pub dataset_index: usize,
    pub z: Vec<f64>,
    /// Empty until embedded with a mapping net.
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// Selector that produced the set (`ours`, `kmeans`, `classmean`, `canonical`).
    pub method: String,
    pub entries: Vec<PrototypeEntry>,
}

const PROTO_KIND: &str = "protoscope-prototypes";

impl PrototypeSet {
    pub fn is_embedded(&self) -> bool {
        self.entries.iter().all(|e| !e.embedding.is_empty())
    }

    /// Fill every entry's embedding with `net(z)`.
    pub fn embed(&mut self, net: &MappingNet) -> Result<()> {
        for e in &mut self.entries {
            e.embedding = net.forward(&e.z)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let d_z = self.entries.first().map_or(0, |e| e.z.len());
        let p = if self.is_embedded() {
            self.entries.first().map_or(0, |e| e.embedding.len())
        } else {
            0
        };
        let mut h = Header::new(PROTO_KIND);
        h.push("version", 1)
            .push("method", &self.method)
            .push("entries", self.entries.len())
            .push("d_z", d_z)
            .push("p", p);
        let mut out = h.render();
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!("proto {} {} {} {}", e.class, e.slot, e.dataset_index, join_floats(&e.z)));
            if p > 0 {
                out.push(' ');
                out.push_str(&join_floats(&e.embedding));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let h = Header::parse_line(lines.next().unwrap_or_default(), PROTO_KIND)?;
        h.expect_version(1)?;
        let count: usize = h.parse("entries")?;
        let d_z: usize = h.parse("d_z")?;
        let p: usize = h.parse("p")?;
        let method = h.get("method")?.to_string();
        let mut entries = Vec::with_capacity(count);
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let mut t = line.split(' ');
            if t.next() != Some("proto") {
                return Err(Error::format(lineno, "expected `proto` record"));
            }
            let class = parse_token(t.next(), lineno, "class")?;
            let slot = parse_token(t.next(), lineno, "slot")?;
            let dataset_index = parse_token(t.next(), lineno, "dataset index")?;
            let values = parse_floats(t, lineno)?;
            if values.len() != d_z + p {
                return Err(Error::format(lineno, format!("expected {} values, found {}", d_z + p, values.len())));
            }
            entries.push(PrototypeEntry {
                class,
                slot,
                dataset_index,
                z: values[..d_z].to_vec(),
                embedding: values[d_z..].to_vec(),
            });
        }
        if entries.len() != count {
            return Err(Error::format(entries.len() + 2, format!("expected {count} entries")));
        }
        Ok(Self { method, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        check_name(&self.method)?;
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Every entry must be a verbatim dataset row.
    pub fn check_against(&self, dataset: &EncodedDataset) -> Result<()> {
        for e in &self.entries {
            let row = dataset
                .rows
                .get(e.dataset_index)
                .ok_or_else(|| Error::Contract(format!("prototype index {} out of range", e.dataset_index)))?;
            if row.z != e.z {
                return Err(Error::Contract(format!(
                    "prototype z differs from dataset row {}",
                    e.dataset_index
                )));
            }
        }
        Ok(())
    }
}

/// Rows of `candidates` ordered by distance to `target` (index breaks ties),
/// skipping any already in `taken`. Returns the first.
pub(crate) fn nearest_untaken(
    points: &[&[f64]],
    candidates: &[usize],
    target: &[f64],
    taken: &[usize],
) -> Option<usize> {
    candidates
        .iter()
        .zip(points)
        .filter(|(i, _)| !taken.contains(i))
        .map(|(&i, p)| (sq_dist(p, target), i))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, i)| i)
}

/// For every (class, slot): the class row whose embedding is nearest `theta_m`.
/// Slots of one class never share a row; later slots fall back to the next-nearest.
pub fn extract_prototypes(state: &TrainedState, dataset: &EncodedDataset) -> Result<PrototypeSet> {
    ensure_len("dataset latent dim", dataset.meta.d_z, state.net.input_dim())?;
    if dataset.classes() != state.bank.classes {
        return Err(Error::Shape(format!(
            "dataset has {} classes, proxy bank {}",
            dataset.classes(),
            state.bank.classes
        )));
    }
    let embeddings: Vec<Vec<f64>> = dataset
        .rows
        .iter()
        .map(|r| state.net.forward(&r.z))
        .collect::<Result<_>>()?;
    let mut entries = Vec::new();
    for class in 0..state.bank.classes {
        let members = dataset.indices_of_class(class);
        if members.len() < state.bank.per_class {
            return Err(Error::Config(format!(
                "class {class} has {} rows, need {}",
                members.len(),
                state.bank.per_class
            )));
        }
        let pts: Vec<&[f64]> = members.iter().map(|&i| embeddings[i].as_slice()).collect();
        let mut taken = Vec::new();
        for slot in 0..state.bank.per_class {
            let idx = nearest_untaken(&pts, &members, state.bank.m(class, slot), &taken)
                .expect("class has enough rows");
            taken.push(idx);
            entries.push(PrototypeEntry {
                class,
                slot,
                dataset_index: idx,
                z: dataset.rows[idx].z.clone(),
                embedding: embeddings[idx].clone(),
            });
        }
    }
    Ok(PrototypeSet {
        method: "ours".into(),
        entries,
    })
}

const CKPT_KIND: &str = "protoscope-checkpoint";

impl TrainedState {
    pub fn to_text(&self) -> String {
        let mut h = Header::new(CKPT_KIND);
        h.push("version", 1)
            .push("d_z", self.net.input_dim())
            .push("p", self.net.output_dim())
            .push("classes", self.bank.classes)
            .push("per_class", self.bank.per_class)
            .push("norm_eps", self.net.norm_epsilon)
            .push("epochs_completed", self.loss_history.len());
        for (k, v) in self.config.pairs() {
            h.push(k, v);
        }
        let mut out = h.render();
        out.push('\n');
        for row in self.net.weight.row_iter() {
            out.push_str(&format!("weight {}\n", join_floats(row)));
        }
        out.push_str(&format!("bias {}\n", join_floats(&self.net.bias)));
        for c in 0..self.bank.classes {
            for s in 0..self.bank.per_class {
                out.push_str(&format!("theta_q {c} {s} {}\n", join_floats(self.bank.q(c, s))));
                out.push_str(&format!("theta_m {c} {s} {}\n", join_floats(self.bank.m(c, s))));
            }
        }
        for (e, l) in self.loss_history.iter().enumerate() {
            out.push_str(&format!(
                "loss {e} {}\n",
                join_floats(&[l.pa_loss, l.manifold_loss, l.total])
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let h = Header::parse_line(lines.next().unwrap_or_default(), CKPT_KIND)?;
        h.expect_version(1)?;
        let d_z: usize = h.parse("d_z")?;
        let p: usize = h.parse("p")?;
        let classes: usize = h.parse("classes")?;
        let per_class: usize = h.parse("per_class")?;
        let epochs_completed: usize = h.parse("epochs_completed")?;
        let mut config = Stage1Config::default();
        for key in Stage1Config::KEYS {
            config
                .set(key, h.get(key)?)
                .map_err(|e| Error::format(1, e.to_string()))?;
        }
        let mut weight = Vec::with_capacity(p * d_z);
        let mut bias = None;
        let mut theta_q = vec![f64::NAN; classes * per_class * p];
        let mut theta_m = theta_q.clone();
        let mut history = Vec::new();
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let mut t = line.split(' ');
            let tag = t.next().unwrap_or_default();
            match tag {
                "weight" => {
                    let row = parse_floats(t, lineno)?;
                    if row.len() != d_z {
                        return Err(Error::format(lineno, "weight row has wrong length"));
                    }
                    weight.extend(row);
                }
                "bias" => {
                    let b = parse_floats(t, lineno)?;
                    if b.len() != p {
                        return Err(Error::format(lineno, "bias has wrong length"));
                    }
                    bias = Some(b);
                }
                "theta_q" | "theta_m" => {
                    let c: usize = parse_token(t.next(), lineno, "class")?;
                    let s: usize = parse_token(t.next(), lineno, "slot")?;
                    let v = parse_floats(t, lineno)?;
                    if c >= classes || s >= per_class || v.len() != p {
                        return Err(Error::format(lineno, "proxy record out of range"));
                    }
                    let base = (c * per_class + s) * p;
                    let dst = if tag == "theta_q" { &mut theta_q } else { &mut theta_m };
                    dst[base..base + p].copy_from_slice(&v);
                }
                "loss" => {
                    let _epoch: usize = parse_token(t.next(), lineno, "epoch")?;
                    let v = parse_floats(t, lineno)?;
                    if v.len() != 3 {
                        return Err(Error::format(lineno, "loss record needs 3 values"));
                    }
                    history.push(EpochSummary {
                        pa_loss: v[0],
                        manifold_loss: v[1],
                        total: v[2],
                    });
                }
                other => return Err(Error::format(lineno, format!("unknown record `{other}`"))),
            }
        }
        let weight = Matrix::from_vec(p, d_z, weight).map_err(|_| Error::format(0, "missing weight rows"))?;
        let bias = bias.ok_or_else(|| Error::format(0, "missing bias record"))?;
        if theta_q.iter().chain(&theta_m).any(|v| v.is_nan()) {
            return Err(Error::format(0, "missing proxy records"));
        }
        if history.len() != epochs_completed {
            return Err(Error::format(0, "loss history length mismatch"));
        }
        Ok(Self {
            net: MappingNet {
                weight,
                bias,
                norm_epsilon: h.parse("norm_eps")?,
            },
            bank: ProxyBank {
                classes,
                per_class,
                dim: p,
                theta_q,
                theta_m,
                gamma: config.gamma,
            },
            config,
            loss_history: history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
