//! Artifact-producing building blocks shared by the subcommands, plus the
//! end-to-end pipeline and ablation sweeps built from them.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use protoscope_core::envlab::{canonical_prototypes, class_mean_prototypes, kmeans_prototypes, train_blackbox};
use protoscope_core::numkit::derive_seed;
use protoscope_core::pwnet::{agreement, evaluate, train_stage2};
use protoscope_core::{
    collect_rollout, extract_prototypes, make_env, make_planes_fixture, train_stage1, BlackBoxPolicy, EncodedDataset,
    PWNetHead, PrototypeSet, RewardStats, TrainedState, WrappedPolicy,
};

use crate::config::RunConfig;
use crate::report::{self, AblationPoint, ReportRow};

pub const METHODS: &[&str] = &["ours", "kmeans", "classmean", "canonical"];
pub const BASELINES: &[&str] = &["kmeans", "classmean", "canonical"];
pub const ABLATION_PARAMS: &[&str] = &[
    "m",
    "gamma",
    "n_beta",
    "n_alpha",
    "threshold",
    "delta",
    "alpha",
    "eps_margin",
    "prototypes_per_class",
];

const EVAL_STREAM: u64 = 3;
const HEAD_INIT_STREAM: u64 = 10;
const KMEANS_STREAM: u64 = 12;

/// Evaluation episodes never reuse the rollout's episode seeds.
pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, EVAL_STREAM)
}

#[derive(Default)]
pub struct Timings {
    entries: Vec<(String, f64)>,
}

impl Timings {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.entries.push((stage.to_string(), t.elapsed().as_secs_f64()));
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,seconds\n");
        for (k, v) in &self.entries {
            s.push_str(&format!("{k},{v:.3}\n"));
        }
        s
    }
}

pub fn blackbox(cfg: &RunConfig) -> Result<BlackBoxPolicy> {
    train_blackbox(&cfg.env, &cfg.blackbox, cfg.seed()).with_context(|| format!("training black box on {}", cfg.env))
}

pub fn collect(policy: &BlackBoxPolicy, cfg: &RunConfig) -> Result<EncodedDataset> {
    let mut env = make_env(&cfg.env)?;
    if policy.env_name != cfg.env {
        bail!("policy was trained on `{}`, not `{}`", policy.env_name, cfg.env);
    }
    Ok(collect_rollout(policy, env.as_mut(), cfg.steps, cfg.seed())?)
}

/// Every `every`-th row (1-based) goes to the held-out split.
pub fn split_holdout(ds: &EncodedDataset, every: usize) -> (EncodedDataset, EncodedDataset) {
    let (train, held): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|i| (i + 1) % every != 0);
    (ds.select(&train), ds.select(&held))
}

/// Prototypes for `method`, embedded with the stage-1 mapping net.
pub fn prototypes(method: &str, state: &TrainedState, train: &EncodedDataset, cfg: &RunConfig) -> Result<PrototypeSet> {
    let mut set = match method {
        "ours" => extract_prototypes(state, train)?,
        "kmeans" => kmeans_prototypes(train, cfg.stage1.prototypes_per_class, derive_seed(cfg.seed(), KMEANS_STREAM))?,
        "classmean" => class_mean_prototypes(train)?,
        "canonical" => canonical_prototypes(train)?,
        other => bail!("unknown prototype method `{other}`"),
    };
    set.embed(&state.net)?;
    Ok(set)
}

pub fn fit_head(protos: &PrototypeSet, train: &EncodedDataset, cfg: &RunConfig) -> Result<PWNetHead> {
    let s2 = &cfg.stage2;
    let mut head = PWNetHead::from_prototypes(
        protos,
        train.meta.action_dim(),
        s2.eps_sim,
        s2.init_noise,
        derive_seed(cfg.seed(), HEAD_INIT_STREAM),
    )?;
    train_stage2(&mut head, train, s2)?;
    Ok(head)
}

pub fn eval_blackbox(policy: &BlackBoxPolicy, cfg: &RunConfig) -> Result<RewardStats> {
    let mut env = make_env(&cfg.env)?;
    Ok(evaluate(policy, env.as_mut(), cfg.episodes, eval_seed(cfg.seed()))?)
}

pub fn eval_head(policy: &BlackBoxPolicy, head: &PWNetHead, cfg: &RunConfig) -> Result<RewardStats> {
    let mut env = make_env(&cfg.env)?;
    let wrapped = WrappedPolicy {
        encoder: policy,
        head,
        space: env.action_space(),
    };
    Ok(evaluate(&wrapped, env.as_mut(), cfg.episodes, eval_seed(cfg.seed()))?)
}

pub fn reward_row(method: &str, stats: &RewardStats, cfg: &RunConfig) -> ReportRow {
    ReportRow {
        method: method.into(),
        env: cfg.env.clone(),
        metric: "reward".into(),
        mean: stats.mean,
        stderr: stats.stderr,
        n: stats.episodes,
        seed: cfg.seed(),
        config_hash: cfg.hash(),
    }
}

pub fn agreement_row(method: &str, head: &PWNetHead, held: &EncodedDataset, cfg: &RunConfig) -> Result<ReportRow> {
    let p = agreement(head, held)?;
    let n = held.len();
    Ok(ReportRow {
        method: method.into(),
        env: cfg.env.clone(),
        metric: "agreement".into(),
        mean: p,
        stderr: (p * (1.0 - p) / n as f64).sqrt(),
        n,
        seed: cfg.seed(),
        config_hash: cfg.hash(),
    })
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Outputs of one pipeline run; `report` rows also land in `<out>/report.csv`.
pub struct PipelineOutput {
    pub report: Vec<ReportRow>,
    pub agreement: Vec<ReportRow>,
}

/// Full run into `out`: data, stage-1 checkpoint, prototypes and a head per
/// method, then `report.csv`, `report.svg`, `agreement.csv` and `timings.csv`.
/// On `planes` the fixture replaces the black box and the report metric is
/// held-out agreement.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, methods: &[&str]) -> Result<PipelineOutput> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut t = Timings::default();
    let planes = cfg.env == "planes";
    if !planes && cfg.env != "cartpole" {
        bail!("pipeline supports env=cartpole or env=planes, got `{}`", cfg.env);
    }
    write(out.join("config.txt"), &cfg.to_text())?;

    let (policy, full) = if planes {
        let fx = t.time("fixture", || {
            Ok(make_planes_fixture(cfg.fixture_classes, cfg.fixture_n, cfg.fixture_d, cfg.fixture_sigma, cfg.seed())?)
        })?;
        (None, fx.dataset)
    } else {
        let bb = t.time("blackbox", || blackbox(cfg))?;
        bb.save(&out.join("policy.txt"))?;
        let ds = t.time("collect", || collect(&bb, cfg))?;
        (Some(bb), ds)
    };
    let (train, held) = split_holdout(&full, cfg.holdout_every);
    train.save(&out.join("data.txt"))?;
    held.save(&out.join("holdout.txt"))?;

    let state = t.time("discover", || Ok(train_stage1(&train, &cfg.stage1)?))?;
    state.save(&out.join("stage1.ckpt"))?;

    let mut report = Vec::new();
    let mut agree = Vec::new();
    if let Some(bb) = &policy {
        let stats = t.time("eval_blackbox", || eval_blackbox(bb, cfg))?;
        report.push(reward_row("blackbox", &stats, cfg));
    }
    for &method in methods {
        let protos = prototypes(method, &state, &train, cfg)?;
        protos.save(&out.join(format!("protos_{method}.txt")))?;
        let head = t.time(&format!("wrap_{method}"), || fit_head(&protos, &train, cfg))?;
        head.save(&out.join(format!("head_{method}.txt")))?;
        let row = agreement_row(method, &head, &held, cfg)?;
        agree.push(row.clone());
        match &policy {
            Some(bb) => {
                let stats = t.time(&format!("eval_{method}"), || eval_head(bb, &head, cfg))?;
                report.push(reward_row(method, &stats, cfg));
            }
            None => report.push(row),
        }
    }

    write(out.join("report.csv"), &report::report_csv(&report))?;
    write(out.join("agreement.csv"), &report::report_csv(&agree))?;
    write(out.join("report.svg"), &report::report_svg(&format!("{} (seed {})", cfg.env, cfg.seed()), &report))?;
    write(out.join("timings.csv"), &t.to_csv())?;
    Ok(PipelineOutput { report, agreement: agree })
}

/// One pipeline per value with the shared seed; each point owns `<out>/<param>=<value>/`.
/// Writes `ablation.csv`, `ablation.svg` and `trend.txt` to `out`.
pub fn run_ablation(base: &RunConfig, parameter: &str, values: &[String], out: &Path) -> Result<Vec<AblationPoint>> {
    if !ABLATION_PARAMS.contains(&parameter) {
        bail!("`{parameter}` is not an ablation parameter");
    }
    if values.is_empty() {
        bail!("no values given");
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut points = Vec::new();
    for v in values {
        let mut cfg = base.clone();
        cfg.set(parameter, v)?;
        cfg.finish()?;
        let res = run_pipeline(&cfg, &out.join(format!("{parameter}={v}")), &["ours"])?;
        let row = res
            .report
            .into_iter()
            .find(|r| r.method == "ours")
            .context("pipeline produced no row for `ours`")?;
        points.push(AblationPoint {
            parameter: parameter.into(),
            value: v.clone(),
            row,
        });
    }
    write(out.join("ablation.csv"), &report::ablation_csv(&points))?;
    write(out.join("ablation.svg"), &report::ablation_svg(parameter, &points)?)?;
    let xs: Vec<f64> = values.iter().map(|v| v.parse().unwrap_or(f64::NAN)).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.row.mean).collect();
    write(
        out.join("trend.txt"),
        &format!(
            "parameter={parameter}\nmetric={}\nobserved={}\npublished={}\n",
            points[0].row.metric,
            report::trend(&xs, &ys),
            report::published_trend(parameter)
        ),
    )?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_split_partitions_rows() {
        let fx = make_planes_fixture(2, 10, 4, 0.0, 1).unwrap();
        let (a, b) = split_holdout(&fx.dataset, 5);
        assert_eq!(a.len() + b.len(), 20);
        assert_eq!(b.len(), 4);
        assert_eq!(b.rows[0], fx.dataset.rows[4]);
    }

    #[test]
    fn unknown_ablation_parameter_is_rejected() {
        let dir = std::env::temp_dir();
        assert!(run_ablation(&RunConfig::default(), "lr_net", &["1".into()], &dir).is_err());
    }
}
