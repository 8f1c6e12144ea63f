//! Synthetic datasets with known geometry.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{label_for, ActionLayout, DatasetMeta, EncodedDataset, Row};
use crate::error::{Error, Result};
use crate::numkit::{derive_seed, dot, project_onto, seeded_rng, Matrix, OrthonormalBasis, Rng as SeededRng};

/// Points are drawn uniformly from `[-PATCH, PATCH]²` in plane coordinates.
pub const PATCH: f64 = 1.0;
pub const MIN_ANGLE_DEG: f64 = 10.0;
pub const MIN_OWN_PLANE_RATE: f64 = 0.99;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct PlanesFixture {
    pub dataset: EncodedDataset,
    /// One per class; `centroid` holds the plane's offset.
    pub planes: Vec<OrthonormalBasis>,
    pub sigma: f64,
    /// Fraction of points strictly closer to their own plane than to any other.
    pub own_plane_rate: f64,
    /// Generation attempts consumed by the acceptance checks.
    pub attempts: usize,
}

impl PlanesFixture {
    pub fn residual(&self, class: usize, x: &[f64]) -> Result<f64> {
        let p = &self.planes[class];
        Ok(project_onto(x, &p.centroid, p)?.orthogonal_dist)
    }
}

/// `E[χ_k]`, the mean norm of a k-dimensional standard Gaussian.
pub fn chi_mean(k: usize) -> f64 {
    // r(k) = Γ((k+1)/2) / Γ(k/2), r(1) = 1/√π, r(k+1) = (k/2) / r(k)
    let mut r = 1.0 / std::f64::consts::PI.sqrt();
    for j in 1..k {
        r = (j as f64 / 2.0) / r;
    }
    std::f64::consts::SQRT_2 * r
}

fn gaussian(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_plane(rng: &mut SeededRng, d: usize) -> OrthonormalBasis {
    loop {
        let u = gaussian(rng, d);
        let mut v = gaussian(rng, d);
        let nu = dot(&u, &u).sqrt();
        let u: Vec<f64> = u.iter().map(|x| x / nu).collect();
        let c = dot(&u, &v);
        v.iter_mut().zip(&u).for_each(|(a, b)| *a -= c * b);
        let nv = dot(&v, &v).sqrt();
        if nu < 1e-6 || nv < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let mut rows = u;
        rows.extend(v);
        return OrthonormalBasis {
            vectors: Matrix::from_vec(2, d, rows).expect("2 x d"),
            centroid: gaussian(rng, d),
        };
    }
}

/// Smallest principal angle between the direction spaces of two planes, degrees.
pub fn min_principal_angle_deg(a: &OrthonormalBasis, b: &OrthonormalBasis) -> f64 {
    // largest singular value of the 2×2 matrix M = A·Bᵀ is cos of the smallest angle
    let m = [
        dot(a.vectors.row(0), b.vectors.row(0)),
        dot(a.vectors.row(0), b.vectors.row(1)),
        dot(a.vectors.row(1), b.vectors.row(0)),
        dot(a.vectors.row(1), b.vectors.row(1)),
    ];
    let (p, q, r) = (
        m[0] * m[0] + m[2] * m[2],
        m[0] * m[1] + m[2] * m[3],
        m[1] * m[1] + m[3] * m[3],
    );
    let top = 0.5 * (p + r) + (0.25 * (p - r) * (p - r) + q * q).sqrt();
    top.sqrt().min(1.0).acos().to_degrees()
}

/// `classes` random 2-planes in `R^d`, `n_per_class` noisy points on each, raw
/// actions one-hot in the class. Regenerated until the planes are pairwise at
/// least 10° apart and at least 99% of points sit closest to their own plane.
pub fn make_planes_fixture(
    classes: usize,
    n_per_class: usize,
    d: usize,
    sigma: f64,
    seed: u64,
) -> Result<PlanesFixture> {
    if classes < 2 || d <= 2 {
        return Err(Error::Config("planes fixture needs classes >= 2 and d > 2".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma {sigma} must be finite and >= 0")));
    }
    let names: Vec<String> = (0..classes).map(|c| format!("class{c}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let layout = ActionLayout::identity(&names, &vec![false; classes])?;

    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = seeded_rng(derive_seed(seed, attempt as u64));
        let planes: Vec<OrthonormalBasis> = (0..classes).map(|_| random_plane(&mut rng, d)).collect();
        let separated = (0..classes).all(|i| {
            (i + 1..classes).all(|j| min_principal_angle_deg(&planes[i], &planes[j]) > MIN_ANGLE_DEG)
        });
        if !separated {
            continue;
        }
        let mut rows = Vec::with_capacity(classes * n_per_class);
        let mut own = 0usize;
        for (c, plane) in planes.iter().enumerate() {
            let mut raw_action = vec![0.0; classes];
            raw_action[c] = 1.0;
            let label = label_for(&raw_action, &layout, false)?;
            for _ in 0..n_per_class {
                let a = rng.random_range(-PATCH..PATCH);
                let b = rng.random_range(-PATCH..PATCH);
                let z: Vec<f64> = (0..d)
                    .map(|k| {
                        let noise: f64 = rng.sample(StandardNormal);
                        plane.centroid[k] + a * plane.vectors.get(0, k) + b * plane.vectors.get(1, k) + sigma * noise
                    })
                    .collect();
                let mine = project_onto(&z, &plane.centroid, plane)?.orthogonal_dist;
                let closest_other = planes
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != c)
                    .map(|(_, p)| project_onto(&z, &p.centroid, p).map(|r| r.orthogonal_dist))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .fold(f64::INFINITY, f64::min);
                if mine <= closest_other {
                    own += 1;
                }
                rows.push(Row {
                    z,
                    raw_action: raw_action.clone(),
                    label,
                });
            }
        }
        let total = rows.len().max(1);
        let own_plane_rate = own as f64 / total as f64;
        if own_plane_rate < MIN_OWN_PLANE_RATE {
            continue;
        }
        let dataset = EncodedDataset::new(
            DatasetMeta {
                d_z: d,
                layout: layout.clone(),
                discrete: false,
                env_name: "planes".into(),
                seed,
            },
            rows,
        )?;
        return Ok(PlanesFixture {
            dataset,
            planes,
            sigma,
            own_plane_rate,
            attempts: attempt + 1,
        });
    }
    Err(Error::Config("could not generate a separated planes fixture".into()))
}
