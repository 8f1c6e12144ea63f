//! The mapping network `h` (linear → per-sample normalization → ReLU), the
//! proxy bank, and the two stage-1 losses with hand-derived gradients.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_len, Error, Result};
use crate::numkit::{dist, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct MappingNet {
    /// p × d_z
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub norm_epsilon: f64,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub normalized: Vec<f64>,
    pub inv_std: f64,
    pub output: Vec<f64>,
}

impl MappingNet {
    pub const NORM_EPSILON: f64 = 1e-5;

    /// Weights uniform in ±1/√d_z, zero bias.
    pub fn init(d_z: usize, p: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_z as f64).sqrt();
        let data = (0..p * d_z).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Matrix::from_vec(p, d_z, data).expect("sized above"),
            bias: vec![0.0; p],
            norm_epsilon: Self::NORM_EPSILON,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(z)?.output)
    }

    pub fn forward_cached(&self, z: &[f64]) -> Result<ForwardCache> {
        let mut y = self.weight.matvec(z)?;
        y.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        let p = y.len() as f64;
        let mean = y.iter().sum::<f64>() / p;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p;
        let inv_std = 1.0 / (var + self.norm_epsilon).sqrt();
        let normalized: Vec<f64> = y.iter().map(|v| (v - mean) * inv_std).collect();
        let output = normalized.iter().map(|v| v.max(0.0)).collect();
        Ok(ForwardCache {
            normalized,
            inv_std,
            output,
        })
    }

    pub fn forward_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<ForwardCache>> {
        zs.iter().map(|z| self.forward_cached(z)).collect()
    }

    /// Accumulate parameter gradients for one sample given `∂L/∂output`.
    pub fn backward(
        &self,
        z: &[f64],
        cache: &ForwardCache,
        grad_output: &[f64],
        grad_weight: &mut Matrix,
        grad_bias: &mut [f64],
    ) {
        let p = cache.normalized.len() as f64;
        let g: Vec<f64> = grad_output
            .iter()
            .zip(&cache.normalized)
            .map(|(go, &x)| if x > 0.0 { *go } else { 0.0 })
            .collect();
        let g_mean = g.iter().sum::<f64>() / p;
        let gx_mean = g.iter().zip(&cache.normalized).map(|(a, b)| a * b).sum::<f64>() / p;
        for (k, (gk, xk)) in g.iter().zip(&cache.normalized).enumerate() {
            let dy = (gk - g_mean - xk * gx_mean) * cache.inv_std;
            grad_bias[k] += dy;
            for (w, zj) in grad_weight.row_mut(k).iter_mut().zip(z) {
                *w += dy * zj;
            }
        }
    }

    /// Parameter gradients for a batch given per-sample output gradients.
    pub fn backprop(
        &self,
        zs: &[Vec<f64>],
        caches: &[ForwardCache],
        grad_outputs: &[Vec<f64>],
    ) -> (Matrix, Vec<f64>) {
        let mut gw = Matrix::zeros(self.output_dim(), self.input_dim());
        let mut gb = vec![0.0; self.output_dim()];
        for ((z, c), g) in zs.iter().zip(caches).zip(grad_outputs) {
            self.backward(z, c, g, &mut gw, &mut gb);
        }
        (gw, gb)
    }
}

/// Per-class, per-slot proxies: `theta_q` is trained, `theta_m` follows it by momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyBank {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Flattened `classes × per_class × dim`.
    pub theta_q: Vec<f64>,
    pub theta_m: Vec<f64>,
    pub gamma: f64,
}

impl ProxyBank {
    /// Standard normal entries scaled by 0.1; `theta_m` starts equal to `theta_q`.
    pub fn init(classes: usize, per_class: usize, dim: usize, gamma: f64, rng: &mut impl Rng) -> Self {
        let theta_q: Vec<f64> = (0..classes * per_class * dim)
            .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            classes,
            per_class,
            dim,
            theta_m: theta_q.clone(),
            theta_q,
            gamma,
        }
    }

    pub fn len(&self) -> usize {
        self.classes * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self, class: usize, slot: usize) -> std::ops::Range<usize> {
        let k = class * self.per_class + slot;
        k * self.dim..(k + 1) * self.dim
    }

    pub fn q(&self, class: usize, slot: usize) -> &[f64] {
        &self.theta_q[self.range(class, slot)]
    }

    pub fn m(&self, class: usize, slot: usize) -> &[f64] {
        &self.theta_m[self.range(class, slot)]
    }

    /// `θ_m ← γ·θ_m + (1 − γ)·θ_q`, elementwise over every slot.
    pub fn momentum_update(&mut self) {
        let g = self.gamma;
        for (m, q) in self.theta_m.iter_mut().zip(&self.theta_q) {
            *m = g * *m + (1.0 - g) * q;
        }
    }
}

/// Sign convention for the proxy-anchor exponents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SignMode {
    /// Positives pay `exp(+α(d − ε))`, negatives `exp(−α(d − ε))`: pulls positives in.
    #[default]
    Semantic,
    /// Positives pay `exp(−α(d − ε))`, negatives `exp(+α(d − ε))`: the similarity-form signs applied to a distance.
    AsPrinted,
}

impl fmt::Display for SignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignMode::Semantic => "semantic",
            SignMode::AsPrinted => "as_printed",
        })
    }
}

impl FromStr for SignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(SignMode::Semantic),
            "as_printed" => Ok(SignMode::AsPrinted),
            other => Err(Error::Config(format!("unknown sign mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PaOutput {
    pub loss: f64,
    pub grad_embeddings: Vec<Vec<f64>>,
    pub grad_theta_q: Vec<f64>,
}

/// `log(1 + Σ exp(a_k))` and its gradient w.r.t. each `a_k`, overflow-safe.
fn log1p_sum_exp(a: &[f64]) -> (f64, Vec<f64>) {
    if a.is_empty() {
        return (0.0, Vec::new());
    }
    let top = a.iter().copied().fold(0.0f64, f64::max);
    let terms: Vec<f64> = a.iter().map(|v| (v - top).exp()).collect();
    let denom = (-top).exp() + terms.iter().sum::<f64>();
    let value = top + denom.ln();
    (value, terms.into_iter().map(|t| t / denom).collect())
}

/// Euclidean proxy-anchor loss over `theta_q`.
///
/// Every slot of a class treats all embeddings of that class as positives.
/// The positive part averages over proxies with at least one positive in the
/// batch; the negative part averages over all proxies.
pub fn pa_loss(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    bank: &ProxyBank,
    alpha: f64,
    eps_margin: f64,
    mode: SignMode,
) -> Result<PaOutput> {
    if bank.is_empty() {
        return Err(Error::Config("proxy bank has no proxies".into()));
    }
    if embeddings.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    ensure_len("labels", labels.len(), embeddings.len())?;
    for e in embeddings {
        ensure_len("embedding", e.len(), bank.dim)?;
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= bank.classes) {
        return Err(Error::Shape(format!("label {bad} >= {} classes", bank.classes)));
    }
    let (pos_sign, neg_sign) = match mode {
        SignMode::Semantic => (1.0, -1.0),
        SignMode::AsPrinted => (-1.0, 1.0),
    };
    let mut present = vec![false; bank.classes];
    labels.iter().for_each(|&l| present[l] = true);
    let n_pos_proxies = present.iter().filter(|&&p| p).count() * bank.per_class;
    let n_proxies = bank.len();

    let mut loss = 0.0;
    let mut grad_e = vec![vec![0.0; bank.dim]; embeddings.len()];
    let mut grad_q = vec![0.0; bank.theta_q.len()];

    for class in 0..bank.classes {
        for slot in 0..bank.per_class {
            let proxy = bank.q(class, slot);
            let base = (class * bank.per_class + slot) * bank.dim;
            for positive in [true, false] {
                let (sign, weight) = if positive {
                    if !present[class] {
                        continue;
                    }
                    (pos_sign, 1.0 / n_pos_proxies as f64)
                } else {
                    (neg_sign, 1.0 / n_proxies as f64)
                };
                let members: Vec<usize> = (0..embeddings.len())
                    .filter(|&i| (labels[i] == class) == positive)
                    .collect();
                let dists: Vec<f64> = members.iter().map(|&i| dist(&embeddings[i], proxy)).collect();
                let exps: Vec<f64> = dists.iter().map(|d| sign * alpha * (d - eps_margin)).collect();
                let (value, dvalue) = log1p_sum_exp(&exps);
                loss += weight * value;
                for ((&i, &d), dv) in members.iter().zip(&dists).zip(dvalue) {
                    if d == 0.0 {
                        continue;
                    }
                    let coef = weight * dv * sign * alpha / d;
                    for k in 0..bank.dim {
                        let diff = embeddings[i][k] - proxy[k];
                        grad_e[i][k] += coef * diff;
                        grad_q[base + k] -= coef * diff;
                    }
                }
            }
        }
    }
    Ok(PaOutput {
        loss,
        grad_embeddings: grad_e,
        grad_theta_q: grad_q,
    })
}

#[derive(Clone, Debug)]
pub struct ManifoldOutput {
    pub loss: f64,
    pub grad_embeddings: Vec<Vec<f64>>,
}

// Symmetry tolerance for caller-supplied similarity matrices.
const SYMMETRY_TOL: f64 = 1e-12;

/// `Σ_{i≠j} (δ(1 − S_ij) − ‖e_i − e_j‖)²` over ordered pairs; `S` is a constant target.
pub fn manifold_loss(embeddings: &[Vec<f64>], s: &Matrix, delta: f64) -> Result<ManifoldOutput> {
    let n = embeddings.len();
    if s.rows() != n || s.cols() != n {
        return Err(Error::Shape(format!(
            "similarity matrix is {}×{}, batch has {n} points",
            s.rows(),
            s.cols()
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::Config(format!("delta must be positive, got {delta}")));
    }
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (s.get(i, j), s.get(j, i));
            if (a - b).abs() > SYMMETRY_TOL {
                return Err(Error::Contract(format!("similarity not symmetric at ({i}, {j}): {a} vs {b}")));
            }
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Contract(format!("similarity {a} at ({i}, {j}) outside [0, 1]")));
            }
        }
    }
    let p = embeddings.first().map_or(0, Vec::len);
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(&embeddings[i], &embeddings[j]);
            let r = delta * (1.0 - s.get(i, j)) - d;
            loss += 2.0 * r * r;
            if d == 0.0 {
                continue;
            }
            let coef = -4.0 * r / d;
            for k in 0..p {
                let diff = embeddings[i][k] - embeddings[j][k];
                grad[i][k] += coef * diff;
                grad[j][k] -= coef * diff;
            }
        }
    }
    Ok(ManifoldOutput {
        loss,
        grad_embeddings: grad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub eps_margin: f64,
    pub delta: f64,
    pub sign_mode: SignMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub theta_q: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub pa_loss: f64,
    pub manifold_loss: f64,
    pub total: f64,
    pub grads: Gradients,
}

/// Forward the batch, evaluate both losses, and backprop their sum into the net and `theta_q`.
pub fn total_loss(
    net: &MappingNet,
    bank: &ProxyBank,
    zs: &[Vec<f64>],
    labels: &[usize],
    similarity: &Matrix,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let caches = net.forward_batch(zs)?;
    let embeddings: Vec<Vec<f64>> = caches.iter().map(|c| c.output.clone()).collect();
    let pa = pa_loss(&embeddings, labels, bank, cfg.alpha, cfg.eps_margin, cfg.sign_mode)?;
    let man = manifold_loss(&embeddings, similarity, cfg.delta)?;
    let grad_out: Vec<Vec<f64>> = pa
        .grad_embeddings
        .iter()
        .zip(&man.grad_embeddings)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    let (weight, bias) = net.backprop(zs, &caches, &grad_out);
    Ok(LossBreakdown {
        pa_loss: pa.loss,
        manifold_loss: man.loss,
        total: pa.loss + man.loss,
        grads: Gradients {
            weight,
            bias,
            theta_q: pa.grad_theta_q,
        },
    })
}
