//! Deterministic numerical primitives shared by the rest of the crate.
//!
//! Everything here is a pure function of its inputs except [`MomentOptimizer`],
//! which owns its moment buffers.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_len, Error, Result};

pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent child seed for `stream` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Index of the largest value, lowest index on ties. `None` for an empty slice.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure_len("matrix data", data.len(), rows * cols)?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            ensure_len("matrix row", r.len(), cols)?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_len("matvec input", x.len(), self.cols)?;
        Ok(self.row_iter().map(|r| dot(r, x)).collect())
    }

    /// `selfᵀ · x`.
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_len("matvec_t input", x.len(), self.rows)?;
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in self.row_iter().zip(x) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += xr * v;
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// An orthonormal m-frame together with the centroid of the points it was fitted to.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthonormalBasis {
    /// m × d, one unit basis vector per row.
    pub vectors: Matrix,
    pub centroid: Vec<f64>,
}

impl OrthonormalBasis {
    pub fn dim(&self) -> usize {
        self.vectors.rows()
    }

    pub fn ambient_dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Largest entry of |B·Bᵀ − I|.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.dim();
        let mut worst = 0.0f64;
        for i in 0..m {
            for j in 0..m {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = dot(self.vectors.row(i), self.vectors.row(j));
                worst = worst.max((got - want).abs());
            }
        }
        worst
    }

    /// Coefficients of `v` along each basis vector.
    pub fn coefficients(&self, v: &[f64]) -> Vec<f64> {
        self.vectors.row_iter().map(|b| dot(b, v)).collect()
    }
}

// Singular values below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-9;

/// Centroid and the `m` leading principal directions of `points`.
///
/// Each returned direction is sign-normalized so its first non-negligible
/// coordinate is positive. Fails with `DegenerateNeighborhood` when the
/// centered points have rank below `m`.
pub fn principal_basis<P: AsRef<[f64]>>(points: &[P], m: usize) -> Result<OrthonormalBasis> {
    if m == 0 {
        return Err(Error::Config("basis dimension m must be >= 1".into()));
    }
    let n = points.len();
    if n < m {
        return Err(Error::DegenerateNeighborhood(format!(
            "{n} points cannot span {m} dimensions"
        )));
    }
    let d = points[0].as_ref().len();
    if d < m {
        return Err(Error::Shape(format!("ambient dimension {d} < m = {m}")));
    }
    let mut centroid = vec![0.0; d];
    for p in points {
        let p = p.as_ref();
        ensure_len("point", p.len(), d)?;
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += v;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);

    let centered = DMatrix::from_fn(n, d, |i, j| points[i].as_ref()[j] - centroid[j]);
    if !centered.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite coordinate in PCA input".into()));
    }
    let svd = centered.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD did not return right singular vectors".into()))?;
    let sv = svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let top = sv[order[0]];
    if order.len() < m || top <= 0.0 || sv[order[m - 1]] <= top * RANK_TOL {
        return Err(Error::DegenerateNeighborhood(format!(
            "centered points have rank < {m}"
        )));
    }

    let mut vectors = Matrix::zeros(m, d);
    for (k, &idx) in order.iter().take(m).enumerate() {
        let row = vectors.row_mut(k);
        for j in 0..d {
            row[j] = v_t[(idx, j)];
        }
    }
    orthonormalize(&mut vectors)?;
    for k in 0..m {
        let row = vectors.row_mut(k);
        let scale = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if let Some(first) = row.iter().find(|v| v.abs() > 1e-12 * scale) {
            if *first < 0.0 {
                row.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
    Ok(OrthonormalBasis { vectors, centroid })
}

/// Modified Gram-Schmidt over the rows, in place.
fn orthonormalize(vectors: &mut Matrix) -> Result<()> {
    for i in 0..vectors.rows() {
        for j in 0..i {
            let prev = vectors.row(j).to_vec();
            let row = vectors.row_mut(i);
            let c = dot(row, &prev);
            row.iter_mut().zip(&prev).for_each(|(r, p)| *r -= c * p);
        }
        let row = vectors.row_mut(i);
        let n = norm(row);
        if n < 1e-12 {
            return Err(Error::Numerical("basis vector collapsed during orthonormalization".into()));
        }
        row.iter_mut().for_each(|r| *r /= n);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionResult {
    pub projected_point: Vec<f64>,
    /// Distance from `x` to its projection.
    pub orthogonal_dist: f64,
    /// Distance from the projection to the base point.
    pub projected_dist: f64,
}

/// Project `x` onto the affine subspace `base_point + span(basis)`.
pub fn project_onto(x: &[f64], base_point: &[f64], basis: &OrthonormalBasis) -> Result<ProjectionResult> {
    let d = basis.ambient_dim();
    ensure_len("projected point", x.len(), d)?;
    ensure_len("base point", base_point.len(), d)?;
    let offset: Vec<f64> = x.iter().zip(base_point).map(|(a, b)| a - b).collect();
    let mut in_span = vec![0.0; d];
    for v in basis.vectors.row_iter() {
        let c = dot(&offset, v);
        in_span.iter_mut().zip(v).for_each(|(s, vk)| *s += c * vk);
    }
    let orthogonal_dist = offset
        .iter()
        .zip(&in_span)
        .map(|(o, s)| (o - s) * (o - s))
        .sum::<f64>()
        .sqrt();
    let projected_dist = norm(&in_span);
    let projected_point = base_point.iter().zip(&in_span).map(|(b, s)| b + s).collect();
    Ok(ProjectionResult {
        projected_point,
        orthogonal_dist,
        projected_dist,
    })
}

/// Bias-corrected adaptive-moment optimizer over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct MomentOptimizer {
    pub step_size: f64,
    pub decay1: f64,
    pub decay2: f64,
    pub floor: f64,
    pub step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl MomentOptimizer {
    /// One moment buffer pair per tensor; `sizes` are the flattened tensor lengths.
    pub fn new(step_size: f64, sizes: &[usize]) -> Self {
        Self {
            step_size,
            decay1: 0.9,
            decay2: 0.999,
            floor: 1e-8,
            step_count: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        ensure_len("optimizer tensor count", params.len(), self.first.len())?;
        ensure_len("optimizer gradient count", grads.len(), self.first.len())?;
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            ensure_len("parameter tensor", p.len(), self.first[i].len())?;
            ensure_len("gradient tensor", g.len(), self.first[i].len())?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient in tensor {i}")));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.decay1.powi(t);
        let c2 = 1.0 - self.decay2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for k in 0..p.len() {
                m[k] = self.decay1 * m[k] + (1.0 - self.decay1) * g[k];
                v[k] = self.decay2 * v[k] + (1.0 - self.decay2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= self.step_size * m_hat / (v_hat.sqrt() + self.floor);
            }
        }
        Ok(())
    }
}
