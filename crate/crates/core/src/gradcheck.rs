//! Central finite-difference checks of every analytic gradient in [`crate::embednet`].
//!
//! Error is reported as `max_k |analytic_k − numeric_k| / max(‖analytic‖∞, ‖numeric‖∞)`.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::embednet::{manifold_loss, pa_loss, total_loss, LossConfig, MappingNet, ProxyBank, SignMode};
use crate::error::Result;
use crate::manifold::{build_charts, pairwise_similarity, SimilarityParams};
use crate::numkit::{seeded_rng, Matrix, Rng as SeededRng};

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;
// Pre-rectifier activations closer to zero than this get their sample resampled.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    PaSemantic,
    PaAsPrinted,
    Manifold,
    Forward,
    TotalChain,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::PaSemantic,
        Component::PaAsPrinted,
        Component::Manifold,
        Component::Forward,
        Component::TotalChain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::PaSemantic => "pa_loss[semantic]",
            Component::PaAsPrinted => "pa_loss[as_printed]",
            Component::Manifold => "manifold_loss",
            Component::Forward => "forward",
            Component::TotalChain => "total_loss[chain]",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub batch: usize,
    pub d_z: usize,
    pub p: usize,
    pub classes: usize,
    pub per_class: usize,
    /// Test hook: perturb the analytic gradient of this component.
    pub corrupt: Option<Component>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            d_z: 8,
            p: 50,
            classes: 3,
            per_class: 1,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub component: Component,
    pub max_rel_err: f64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Central differences of `f` w.r.t. every entry of `x`.
pub fn numeric_gradient(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let orig = x[k];
            x[k] = orig + STEP;
            let up = f(x);
            x[k] = orig - STEP;
            let down = f(x);
            x[k] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

struct Fixture {
    net: MappingNet,
    bank: ProxyBank,
    zs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    similarity: Matrix,
}

fn gaussian(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn fixture(cfg: &GradcheckConfig, seed: u64) -> Result<Fixture> {
    let mut rng = seeded_rng(seed);
    let mut net = MappingNet::init(cfg.d_z, cfg.p, &mut rng);
    net.bias = gaussian(&mut rng, cfg.p).iter().map(|v| 0.1 * v).collect();
    let mut bank = ProxyBank::init(cfg.classes, cfg.per_class, cfg.p, 0.9, &mut rng);
    // Proxies near the embedding cloud so both exponent regimes are exercised.
    bank.theta_q.iter_mut().for_each(|v| *v = v.abs() * 5.0);
    let mut zs = Vec::with_capacity(cfg.batch);
    while zs.len() < cfg.batch {
        let z = gaussian(&mut rng, cfg.d_z);
        let c = net.forward_cached(&z)?;
        if c.normalized.iter().all(|v| v.abs() > KINK_MARGIN) {
            zs.push(z);
        }
    }
    let labels = (0..cfg.batch).map(|i| i % cfg.classes).collect();
    let params = SimilarityParams::default();
    let charts = build_charts(&zs, &params, seed)?;
    let similarity = pairwise_similarity(&zs, &charts, &params)?;
    Ok(Fixture {
        net,
        bank,
        zs,
        labels,
        similarity,
    })
}

fn corrupt_if(target: Option<Component>, me: Component, grad: &mut [f64]) {
    if target == Some(me) {
        if let Some(g) = grad.first_mut() {
            *g += 1.0 + g.abs();
        }
    }
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn unflatten(flat: &[f64], width: usize) -> Vec<Vec<f64>> {
    flat.chunks(width).map(<[f64]>::to_vec).collect()
}

/// Run every gradient check for one seed.
pub fn run(seed: u64, cfg: &GradcheckConfig) -> Result<Vec<ComponentReport>> {
    let fx = fixture(cfg, seed)?;
    let embeddings: Vec<Vec<f64>> = fx
        .zs
        .iter()
        .map(|z| fx.net.forward(z))
        .collect::<Result<_>>()?;
    let (alpha, eps) = (32.0, 0.1);
    let mut reports = Vec::new();

    for (component, mode) in [
        (Component::PaSemantic, SignMode::Semantic),
        (Component::PaAsPrinted, SignMode::AsPrinted),
    ] {
        let out = pa_loss(&embeddings, &fx.labels, &fx.bank, alpha, eps, mode)?;
        let mut analytic = flatten(&out.grad_embeddings);
        analytic.extend_from_slice(&out.grad_theta_q);
        corrupt_if(cfg.corrupt, component, &mut analytic);

        let mut x = flatten(&embeddings);
        let n_e = x.len();
        x.extend_from_slice(&fx.bank.theta_q);
        let mut bank = fx.bank.clone();
        let numeric = numeric_gradient(&mut x, |x| {
            bank.theta_q.copy_from_slice(&x[n_e..]);
            let e = unflatten(&x[..n_e], cfg.p);
            pa_loss(&e, &fx.labels, &bank, alpha, eps, mode).map_or(f64::NAN, |o| o.loss)
        });
        reports.push(ComponentReport {
            component,
            max_rel_err: relative_error(&analytic, &numeric),
        });
    }

    {
        let delta = 2.0;
        let out = manifold_loss(&embeddings, &fx.similarity, delta)?;
        let mut analytic = flatten(&out.grad_embeddings);
        corrupt_if(cfg.corrupt, Component::Manifold, &mut analytic);
        let mut x = flatten(&embeddings);
        let numeric = numeric_gradient(&mut x, |x| {
            manifold_loss(&unflatten(x, cfg.p), &fx.similarity, delta).map_or(f64::NAN, |o| o.loss)
        });
        reports.push(ComponentReport {
            component: Component::Manifold,
            max_rel_err: relative_error(&analytic, &numeric),
        });
    }

    {
        // Random linear functional of every output, differentiated through W and b.
        let mut rng = seeded_rng(seed ^ 0x5eed);
        let coeffs: Vec<Vec<f64>> = (0..cfg.batch).map(|_| gaussian(&mut rng, cfg.p)).collect();
        let caches = fx.net.forward_batch(&fx.zs)?;
        let (gw, gb) = fx.net.backprop(&fx.zs, &caches, &coeffs);
        let mut analytic = gw.as_slice().to_vec();
        analytic.extend_from_slice(&gb);
        corrupt_if(cfg.corrupt, Component::Forward, &mut analytic);
        let numeric = numeric_net_gradient(&fx.net, |net| {
            fx.zs
                .iter()
                .zip(&coeffs)
                .map(|(z, c)| {
                    net.forward(z)
                        .map_or(f64::NAN, |o| o.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
                })
                .sum()
        });
        reports.push(ComponentReport {
            component: Component::Forward,
            max_rel_err: relative_error(&analytic, &numeric),
        });
    }

    {
        let loss_cfg = LossConfig {
            alpha,
            eps_margin: eps,
            delta: 2.0,
            sign_mode: SignMode::Semantic,
        };
        let lb = total_loss(&fx.net, &fx.bank, &fx.zs, &fx.labels, &fx.similarity, &loss_cfg)?;
        let mut analytic = lb.grads.weight.as_slice().to_vec();
        analytic.extend_from_slice(&lb.grads.bias);
        analytic.extend_from_slice(&lb.grads.theta_q);
        corrupt_if(cfg.corrupt, Component::TotalChain, &mut analytic);

        let mut numeric = numeric_net_gradient(&fx.net, |net| {
            total_loss(net, &fx.bank, &fx.zs, &fx.labels, &fx.similarity, &loss_cfg).map_or(f64::NAN, |l| l.total)
        });
        let mut bank = fx.bank.clone();
        let mut q = fx.bank.theta_q.clone();
        numeric.extend(numeric_gradient(&mut q, |q| {
            bank.theta_q.copy_from_slice(q);
            total_loss(&fx.net, &bank, &fx.zs, &fx.labels, &fx.similarity, &loss_cfg).map_or(f64::NAN, |l| l.total)
        }));
        reports.push(ComponentReport {
            component: Component::TotalChain,
            max_rel_err: relative_error(&analytic, &numeric),
        });
    }
    Ok(reports)
}

/// Finite differences over the net's weight then bias entries.
fn numeric_net_gradient(net: &MappingNet, f: impl Fn(&MappingNet) -> f64) -> Vec<f64> {
    let mut work = net.clone();
    let n_w = net.weight.as_slice().len();
    let mut x: Vec<f64> = net.weight.as_slice().to_vec();
    x.extend_from_slice(&net.bias);
    numeric_gradient(&mut x, |x| {
        work.weight.as_mut_slice().copy_from_slice(&x[..n_w]);
        work.bias.copy_from_slice(&x[n_w..]);
        f(&work)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_scale_normalized() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
    }

    #[test]
    fn corrupted_component_is_flagged() {
        let cfg = GradcheckConfig {
            batch: 6,
            d_z: 5,
            p: 8,
            classes: 2,
            per_class: 1,
            corrupt: Some(Component::Manifold),
        };
        let reports = run(3, &cfg).unwrap();
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.component).collect();
        assert_eq!(failed, vec![Component::Manifold]);
    }
}
