use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use protoscope_core::envlab::{canonical_prototypes, class_mean_prototypes, kmeans_prototypes};
use protoscope_core::gradcheck::{self, Component, GradcheckConfig};
use protoscope_core::pwnet::agreement;
use protoscope_core::{
    extract_prototypes, make_planes_fixture, train_stage1, BlackBoxPolicy, EncodedDataset, PWNetHead, PrototypeSet,
    TrainedState,
};

use crate::config::RunConfig;
use crate::pipeline::{self, ABLATION_PARAMS, METHODS};
use crate::report;

#[derive(Parser, Debug)]
#[command(name = "protoscope", version, about = "Prototype discovery and prototype-wrapped policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command that reads a run configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed (falls back to PROTOSCOPE_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single worker; outputs are bitwise reproducible.
    #[arg(long)]
    pub deterministic: bool,
}

impl ConfigArgs {
    fn resolve(&self, tweak: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<RunConfig> {
        let mut cfg = RunConfig::resolve(self.config.as_deref(), &self.set).map_err(usage)?;
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        tweak(&mut cfg).map_err(usage)?;
        for w in cfg.finish().map_err(usage)? {
            eprintln!("warning: {w}");
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train (or load) a black-box policy and record an encoded rollout dataset.
    Collect {
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Use this policy instead of training one.
        #[arg(long, value_name = "PATH")]
        policy: Option<PathBuf>,
        /// Where a freshly trained policy is written (default: <out> with extension `policy`).
        #[arg(long, value_name = "PATH", conflicts_with = "policy")]
        save_policy: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 1: learn the embedding and extract prototypes.
    Discover {
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Checkpoint output.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Prototype output (default: <out> with extension `protos`).
        #[arg(long, value_name = "PATH")]
        protos_out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 2: fit a prototype-wrapper head against the dataset's actions.
    Wrap {
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Prototype file to wrap (default: extracted from the checkpoint).
        #[arg(long, value_name = "PATH")]
        protos: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a wrapped head (or the bare black box) and print a CSV report row.
    Eval {
        /// Head to evaluate; omit to evaluate the black box itself.
        #[arg(long, value_name = "PATH")]
        head: Option<PathBuf>,
        /// Black-box policy that supplies the encoder.
        #[arg(long, value_name = "PATH")]
        policy: PathBuf,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Method label for the row (default: ours with --head, blackbox without).
        #[arg(long)]
        method: Option<String>,
        /// Also append the row to this CSV file.
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Select prototypes with a baseline method.
    Baseline {
        #[arg(long, value_enum)]
        method: BaselineMethod,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sweep one parameter through the full pipeline.
    Ablate {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(ABLATION_PARAMS))]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Corrupt one analytic gradient (negative control).
        #[arg(long, value_enum, hide = true)]
        corrupt: Option<CorruptTarget>,
    },
    /// Write a synthetic fixture dataset.
    Fixture {
        #[arg(long, value_enum)]
        name: FixtureName,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Collect, discover, wrap every method, and evaluate, into one directory.
    Pipeline {
        #[arg(long)]
        env: Option<String>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BaselineMethod {
    Kmeans,
    Classmean,
    Canonical,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FixtureName {
    Planes,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CorruptTarget {
    PaSemantic,
    PaAsPrinted,
    Manifold,
    Forward,
    TotalChain,
}

impl From<CorruptTarget> for Component {
    fn from(c: CorruptTarget) -> Self {
        match c {
            CorruptTarget::PaSemantic => Component::PaSemantic,
            CorruptTarget::PaAsPrinted => Component::PaAsPrinted,
            CorruptTarget::Manifold => Component::Manifold,
            CorruptTarget::Forward => Component::Forward,
            CorruptTarget::TotalChain => Component::TotalChain,
        }
    }
}

/// Marks an error as a usage problem (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn data_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    match flag.clone().or_else(|| cfg.data.clone()) {
        Some(p) => Ok(p),
        None => Err(usage("no dataset: pass --data or set data= in the config")),
    }
}

fn load_dataset(path: &Path) -> Result<EncodedDataset> {
    EncodedDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn out_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    match flag.clone().or_else(|| cfg.out_dir.clone()) {
        Some(p) => Ok(p),
        None => Err(usage("no output directory: pass --out or set out_dir= in the config")),
    }
}

pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Collect {
            env,
            steps,
            out: path,
            policy,
            save_policy,
            cfg,
        } => {
            let cfg = cfg.resolve(|c| {
                if let Some(e) = env {
                    c.env = e;
                }
                if let Some(s) = steps {
                    c.steps = s;
                }
                Ok(())
            })?;
            let bb = match policy {
                Some(p) => BlackBoxPolicy::load(&p).with_context(|| format!("loading policy {}", p.display()))?,
                None => {
                    let bb = pipeline::blackbox(&cfg)?;
                    let dest = save_policy.unwrap_or_else(|| path.with_extension("policy"));
                    ensure_parent(&dest)?;
                    bb.save(&dest)?;
                    writeln!(out, "policy {}", dest.display())?;
                    bb
                }
            };
            let ds = pipeline::collect(&bb, &cfg)?;
            ensure_parent(&path)?;
            ds.save(&path)?;
            writeln!(out, "dataset {} rows={}", path.display(), ds.len())?;
        }
        Command::Discover {
            data,
            out: path,
            protos_out,
            cfg,
        } => {
            let cfg = cfg.resolve(|_| Ok(()))?;
            let ds = load_dataset(&data_path(&data, &cfg)?)?;
            let state = train_stage1(&ds, &cfg.stage1)?;
            ensure_parent(&path)?;
            state.save(&path)?;
            let mut protos = extract_prototypes(&state, &ds)?;
            protos.embed(&state.net)?;
            let ppath = protos_out.unwrap_or_else(|| path.with_extension("protos"));
            ensure_parent(&ppath)?;
            protos.save(&ppath)?;
            let (first, last) = (&state.loss_history[0], state.loss_history.last().unwrap());
            writeln!(out, "checkpoint {} epochs={}", path.display(), state.loss_history.len())?;
            writeln!(out, "loss first={} last={}", first.total, last.total)?;
            writeln!(out, "prototypes {} count={}", ppath.display(), protos.entries.len())?;
        }
        Command::Wrap {
            ckpt,
            data,
            out: path,
            protos,
            cfg,
        } => {
            let cfg = cfg.resolve(|_| Ok(()))?;
            let ds = load_dataset(&data_path(&data, &cfg)?)?;
            let state = TrainedState::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let mut set = match protos {
                Some(p) => PrototypeSet::load(&p).with_context(|| format!("loading prototypes {}", p.display()))?,
                None => extract_prototypes(&state, &ds)?,
            };
            set.check_against(&ds)?;
            set.embed(&state.net)?;
            let head = pipeline::fit_head(&set, &ds, &cfg)?;
            ensure_parent(&path)?;
            head.save(&path)?;
            writeln!(out, "head {} slots={}", path.display(), head.slots.len())?;
            writeln!(out, "train_agreement {}", agreement(&head, &ds)?)?;
        }
        Command::Eval {
            head,
            policy,
            env,
            episodes,
            method,
            report: report_path,
            cfg,
        } => {
            let bb = BlackBoxPolicy::load(&policy).with_context(|| format!("loading policy {}", policy.display()))?;
            let cfg = cfg.resolve(|c| {
                c.env = env.unwrap_or_else(|| bb.env_name.clone());
                if let Some(n) = episodes {
                    c.episodes = n;
                }
                Ok(())
            })?;
            let (label, stats) = match head {
                Some(h) => {
                    let head = PWNetHead::load(&h).with_context(|| format!("loading head {}", h.display()))?;
                    (method.unwrap_or_else(|| "ours".into()), pipeline::eval_head(&bb, &head, &cfg)?)
                }
                None => (method.unwrap_or_else(|| "blackbox".into()), pipeline::eval_blackbox(&bb, &cfg)?),
            };
            if label.contains(',') {
                return Err(usage("method label must not contain commas"));
            }
            let row = pipeline::reward_row(&label, &stats, &cfg);
            write!(out, "{}", report::report_csv(std::slice::from_ref(&row)))?;
            if let Some(p) = report_path {
                ensure_parent(&p)?;
                report::append_report(&p, &[row])?;
            }
        }
        Command::Baseline {
            method,
            data,
            out: path,
            cfg,
        } => {
            let cfg = cfg.resolve(|_| Ok(()))?;
            let ds = load_dataset(&data_path(&data, &cfg)?)?;
            let set = match method {
                BaselineMethod::Kmeans => kmeans_prototypes(&ds, cfg.stage1.prototypes_per_class, cfg.seed())?,
                BaselineMethod::Classmean => class_mean_prototypes(&ds)?,
                BaselineMethod::Canonical => canonical_prototypes(&ds)?,
            };
            ensure_parent(&path)?;
            set.save(&path)?;
            writeln!(out, "prototypes {} method={} count={}", path.display(), set.method, set.entries.len())?;
        }
        Command::Ablate {
            param,
            values,
            out: dir,
            cfg,
        } => {
            let cfg = cfg.resolve(|_| Ok(()))?;
            let dir = out_dir(&dir, &cfg)?;
            let points = pipeline::run_ablation(&cfg, &param, &values, &dir)?;
            write!(out, "{}", report::ablation_csv(&points))?;
        }
        Command::Gradcheck { seed, seeds, corrupt } => {
            let gc = GradcheckConfig {
                corrupt: corrupt.map(Component::from),
                ..Default::default()
            };
            let mut failed: Vec<String> = Vec::new();
            writeln!(out, "seed,component,max_rel_err,status")?;
            for s in seed..seed + seeds.max(1) {
                for r in gradcheck::run(s, &gc)? {
                    let status = if r.passed() { "pass" } else { "FAIL" };
                    writeln!(out, "{s},{},{:e},{status}", r.component, r.max_rel_err)?;
                    if !r.passed() && !failed.contains(&r.component.to_string()) {
                        failed.push(r.component.to_string());
                    }
                }
            }
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(" "));
            }
        }
        Command::Fixture { name, out: path, cfg } => {
            let cfg = cfg.resolve(|_| Ok(()))?;
            match name {
                FixtureName::Planes => {
                    let fx = make_planes_fixture(
                        cfg.fixture_classes,
                        cfg.fixture_n,
                        cfg.fixture_d,
                        cfg.fixture_sigma,
                        cfg.seed(),
                    )?;
                    ensure_parent(&path)?;
                    fx.dataset.save(&path)?;
                    writeln!(out, "fixture {} rows={} own_plane_rate={}", path.display(), fx.dataset.len(), fx.own_plane_rate)?;
                }
            }
        }
        Command::Pipeline { env, out: dir, cfg } => {
            let cfg = cfg.resolve(|c| {
                if let Some(e) = env {
                    c.env = e;
                }
                Ok(())
            })?;
            let dir = out_dir(&dir, &cfg)?;
            let res = pipeline::run_pipeline(&cfg, &dir, METHODS)?;
            write!(out, "{}", report::report_csv(&res.report))?;
        }
    }
    Ok(())
}

/// Single-line error text: `error[<kind>]: <message>`.
pub fn error_line(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<protoscope_core::Error>().map(|ce| ce.kind()))
        .or_else(|| e.downcast_ref::<UsageError>().map(|_| "usage"))
        .unwrap_or("runtime");
    // sources already spelled out by their parent are skipped
    let mut msg = String::new();
    for part in e.chain().map(|c| c.to_string()) {
        if !msg.contains(&part) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&part);
        }
    }
    format!("error[{kind}]: {}", msg.replace(['\n', '\r'], " "))
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.chain().any(|c| c.is::<UsageError>()) {
        2
    } else {
        1
    }
}
