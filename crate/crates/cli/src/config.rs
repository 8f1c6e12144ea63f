//! Flat `key=value` run configuration.
//!
//! Layering, lowest to highest precedence: built-in defaults, `PROTOSCOPE_SEED`,
//! the config file, `--set key=value` overrides, then dedicated flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use protoscope_core::{BlackBoxConfig, Error, Result, Stage1Config, Stage2Config};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "PROTOSCOPE_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub blackbox: BlackBoxConfig,
    /// `cartpole`, `pointmass`, or `planes` (synthetic fixture).
    pub env: String,
    pub steps: usize,
    pub episodes: usize,
    /// Every `holdout_every`-th row is held out of training and used for agreement.
    pub holdout_every: usize,
    pub fixture_classes: usize,
    pub fixture_n: usize,
    pub fixture_d: usize,
    pub fixture_sigma: f64,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub deterministic: bool,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            blackbox: BlackBoxConfig::default(),
            env: "cartpole".into(),
            steps: 20_000,
            episodes: 30,
            holdout_every: 5,
            fixture_classes: 3,
            fixture_n: 500,
            fixture_d: 10,
            fixture_sigma: 0.01,
            data: None,
            out_dir: None,
            deterministic: false,
            workers: 1,
        }
    }
}

// Keys that change outputs go into the config hash; the rest only say where
// things live or how fast they run.
const RUN_KEYS: &[(&str, &str)] = &[
    ("env", "environment: cartpole, pointmass, or planes"),
    ("steps", "rollout steps collected from the black box"),
    ("episodes", "evaluation episodes per method"),
    ("holdout_every", "every k-th row is held out for agreement"),
    ("blackbox_population", "CEM population"),
    ("blackbox_elite", "CEM elite count"),
    ("blackbox_iters", "CEM iteration cap"),
    ("blackbox_d_z", "black-box latent width"),
    ("logit_span", "calibrated logit range width"),
    ("fixture_classes", "planes fixture: classes"),
    ("fixture_n", "planes fixture: points per class"),
    ("fixture_d", "planes fixture: ambient dimension"),
    ("fixture_sigma", "planes fixture: noise scale"),
];

const LOCATION_KEYS: &[(&str, &str)] = &[
    ("data", "dataset path (empty: none)"),
    ("out_dir", "output directory (empty: none)"),
    ("deterministic", "single worker, reproducible outputs"),
    ("workers", "worker threads for stage 1"),
];

fn stage1_doc(key: &str) -> &'static str {
    match key {
        "epochs" => "stage-1 epochs",
        "batch_size" => "stage-1 batch size",
        "lr_net" => "mapping net learning rate",
        "lr_proxy" => "proxy learning rate",
        "lr_decay" => "per-epoch learning-rate decay",
        "gamma" => "proxy momentum",
        "alpha" => "proxy-anchor sharpness",
        "eps_margin" => "proxy-anchor margin",
        "delta" => "manifold dissimilarity scale",
        "m" => "chart dimension",
        "threshold" => "chart admission threshold T",
        "n_alpha" => "off-manifold decay exponent",
        "n_beta" => "on-manifold decay exponent",
        "n_anchors" => "anchors per batch (auto: max(8, N/8))",
        "k_max_neighbors" => "neighbors scanned per chart (auto: min(32, N-1))",
        "prototypes_per_class" => "prototypes per action class",
        "prototype_dim" => "embedding width p",
        "sign_mode" => "semantic or as_printed",
        "chart_space" => "input or embedding",
        "seed" => "master seed",
        _ => "",
    }
}

fn stage2_doc(key: &str) -> &'static str {
    match key {
        "stage2_epochs" => "stage-2 epochs",
        "stage2_batch_size" => "stage-2 batch size",
        "stage2_lr" => "stage-2 learning rate",
        "stage2_lr_decay" => "stage-2 per-epoch decay",
        "eps_sim" => "similarity epsilon",
        "stage2_init_noise" => "projection init noise",
        _ => "",
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.stage1.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.stage1.seed = seed;
        self.stage2.seed = seed;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" {
            self.set_seed(parse(key, value)?);
            return Ok(());
        }
        if self.stage1.set(key, value)? || self.stage2.set(key, value)? {
            return Ok(());
        }
        match key {
            "env" => self.env = value.to_string(),
            "steps" => self.steps = parse(key, value)?,
            "episodes" => self.episodes = parse(key, value)?,
            "holdout_every" => self.holdout_every = parse(key, value)?,
            "blackbox_population" => self.blackbox.population = parse(key, value)?,
            "blackbox_elite" => self.blackbox.elite = parse(key, value)?,
            "blackbox_iters" => self.blackbox.max_iters = parse(key, value)?,
            "blackbox_d_z" => self.blackbox.d_z = parse(key, value)?,
            "logit_span" => self.blackbox.logit_span = parse(key, value)?,
            "fixture_classes" => self.fixture_classes = parse(key, value)?,
            "fixture_n" => self.fixture_n = parse(key, value)?,
            "fixture_d" => self.fixture_d = parse(key, value)?,
            "fixture_sigma" => self.fixture_sigma = parse(key, value)?,
            "data" => self.data = opt_path(value),
            "out_dir" => self.out_dir = opt_path(value),
            "deterministic" => self.deterministic = parse(key, value)?,
            "workers" => {
                self.workers = parse(key, value)?;
                self.stage1.workers = self.workers;
            }
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    fn run_pairs(&self) -> Vec<(&'static str, String)> {
        let v = [
            self.env.clone(),
            self.steps.to_string(),
            self.episodes.to_string(),
            self.holdout_every.to_string(),
            self.blackbox.population.to_string(),
            self.blackbox.elite.to_string(),
            self.blackbox.max_iters.to_string(),
            self.blackbox.d_z.to_string(),
            self.blackbox.logit_span.to_string(),
            self.fixture_classes.to_string(),
            self.fixture_n.to_string(),
            self.fixture_d.to_string(),
            self.fixture_sigma.to_string(),
        ];
        RUN_KEYS.iter().map(|(k, _)| *k).zip(v).collect()
    }

    /// Every key that affects results, in canonical order.
    pub fn hashed_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = self.stage1.pairs();
        out.extend(self.stage2.pairs());
        out.extend(self.run_pairs());
        out
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = self.hashed_pairs();
        let v = [
            show_path(&self.data),
            show_path(&self.out_dir),
            self.deterministic.to_string(),
            self.workers.to_string(),
        ];
        out.extend(LOCATION_KEYS.iter().map(|(k, _)| *k).zip(v));
        out
    }

    /// First 16 hex digits of SHA-256 over the hashed pairs as `key=value\n` lines.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.hashed_pairs() {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize().iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Apply a config file body. Blank lines and `#` comments are skipped;
    /// repeated keys are rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            seen.push(k);
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Parse a single `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.set_seed(parse(SEED_ENV, seed.trim())?);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for kv in overrides {
            cfg.apply_override(kv)?;
        }
        Ok(cfg)
    }

    /// Deterministic mode pins stage 1 to one worker.
    pub fn finish(&mut self) -> Result<Vec<String>> {
        if self.deterministic {
            self.workers = 1;
        }
        self.stage1.workers = self.workers;
        self.stage2.seed = self.stage1.seed;
        if self.holdout_every < 2 {
            return Err(Error::Config("holdout_every must be >= 2".into()));
        }
        if self.episodes == 0 || self.steps == 0 {
            return Err(Error::Config("episodes and steps must be >= 1".into()));
        }
        self.stage2.validate()?;
        self.stage1.validate()
    }

    /// Defaults table for `--help`.
    pub fn help_text() -> String {
        let d = Self::default();
        let mut s = String::from("Config keys (file lines or --set key=value), with defaults:\n");
        let docs = Stage1Config::KEYS
            .iter()
            .map(|k| stage1_doc(k))
            .chain(Stage2Config::KEYS.iter().map(|k| stage2_doc(k)))
            .chain(RUN_KEYS.iter().map(|(_, doc)| *doc))
            .chain(LOCATION_KEYS.iter().map(|(_, doc)| *doc));
        for ((k, v), doc) in d.pairs().into_iter().zip(docs) {
            let shown = if v.is_empty() { "\"\"".to_string() } else { v };
            let _ = writeln!(s, "  {k:<22} {shown:<10} {doc}");
        }
        let _ = write!(s, "\n{SEED_ENV} sets the seed when no file, --set or --seed value does.");
        s
    }
}
