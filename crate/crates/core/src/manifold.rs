//! Piecewise-linear charts over a batch and the manifold similarity built on them.
//!
//! A chart is grown around an anchor by scanning neighbors in ascending
//! distance order. Each candidate is kept only if, after refitting the
//! m-dimensional PCA basis, every member (including the candidate) is still
//! reconstructed with quality ≥ `threshold`. Batch points are assigned to the
//! chart of their nearest anchor.

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::error::{ensure_len, Error, Result};
use crate::numkit::{dot, norm, principal_basis, project_onto, seeded_rng, sq_dist, Matrix, OrthonormalBasis};
use crate::textfmt::{join_floats, join_list, Header};

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityParams {
    /// Decay exponent for the orthogonal distance.
    pub n_alpha: f64,
    /// Decay exponent for the projected distance.
    pub n_beta: f64,
    /// Reconstruction-quality admission threshold, in (0, 1].
    pub threshold: f64,
    /// Chart dimension.
    pub m: usize,
    /// `None` means `max(8, ⌈N/8⌉)`, capped at N.
    pub n_anchors: Option<usize>,
    /// `None` means `min(32, N − 1)`.
    pub k_max_neighbors: Option<usize>,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        Self {
            n_alpha: 4.0,
            n_beta: 0.5,
            threshold: 0.9,
            m: 3,
            n_anchors: None,
            k_max_neighbors: None,
        }
    }
}

impl SimilarityParams {
    /// Hard errors for invalid values; returns soft warnings otherwise.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.n_alpha > 0.0 && self.n_beta > 0.0) {
            return Err(Error::Config("n_alpha and n_beta must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1]", self.threshold)));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be >= 1".into()));
        }
        let mut warnings = Vec::new();
        if self.n_alpha <= self.n_beta {
            warnings.push(format!(
                "n_alpha ({}) <= n_beta ({}): off-manifold offsets no longer decay faster",
                self.n_alpha, self.n_beta
            ));
        }
        Ok(warnings)
    }

    pub fn anchors_for(&self, n: usize) -> usize {
        self.n_anchors.unwrap_or_else(|| 8.max(n.div_ceil(8))).min(n)
    }

    pub fn k_max_for(&self, n: usize) -> usize {
        self.k_max_neighbors
            .unwrap_or_else(|| 32.min(n.saturating_sub(1)))
            .min(n.saturating_sub(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub anchor_index: usize,
    /// Anchor first, then accepted neighbors in scan order.
    pub member_indices: Vec<usize>,
    pub basis: OrthonormalBasis,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChartSet {
    pub charts: Vec<Chart>,
    /// Chart index for every batch point.
    pub assignment: Vec<usize>,
}

impl ChartSet {
    pub fn chart_of(&self, point: usize) -> &Chart {
        &self.charts[self.assignment[point]]
    }

    /// Debug dump in the shared text container format.
    pub fn to_text(&self) -> String {
        let mut h = Header::new("protoscope-charts");
        let d = self.charts.first().map_or(0, |c| c.basis.ambient_dim());
        let m = self.charts.first().map_or(0, |c| c.basis.dim());
        h.push("version", 1)
            .push("charts", self.charts.len())
            .push("points", self.assignment.len())
            .push("d", d)
            .push("m", m);
        let mut out = h.render();
        out.push('\n');
        for (k, c) in self.charts.iter().enumerate() {
            out.push_str(&format!("chart {k} {} {}\n", c.anchor_index, join_list(&c.member_indices)));
            out.push_str(&format!("centroid {k} {}\n", join_floats(&c.basis.centroid)));
            for row in c.basis.vectors.row_iter() {
                out.push_str(&format!("basis {k} {}\n", join_floats(row)));
            }
        }
        for (i, a) in self.assignment.iter().enumerate() {
            out.push_str(&format!("assign {i} {a}\n"));
        }
        out
    }
}

/// Cosine of the angle between `x − centroid` and the chart's span; 1 at the centroid.
pub fn reconstruction_quality(x: &[f64], basis: &OrthonormalBasis) -> f64 {
    let offset: Vec<f64> = x.iter().zip(&basis.centroid).map(|(a, c)| a - c).collect();
    let total = norm(&offset);
    if total == 0.0 {
        return 1.0;
    }
    let in_span = basis
        .vectors
        .row_iter()
        .map(|v| dot(&offset, v).powi(2))
        .sum::<f64>()
        .sqrt();
    (in_span / total).min(1.0)
}

/// Other batch indices ordered by distance to `anchor`, index breaking ties.
fn scan_order<P: AsRef<[f64]>>(points: &[P], anchor: usize) -> Vec<usize> {
    let a = points[anchor].as_ref();
    let mut keyed: Vec<(f64, usize)> = (0..points.len())
        .filter(|&i| i != anchor)
        .map(|i| (sq_dist(a, points[i].as_ref()), i))
        .collect();
    keyed.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Grow one chart around `anchor`. `Ok(None)` when no rank-m neighborhood could be formed.
pub fn grow_chart<P: AsRef<[f64]>>(
    points: &[P],
    anchor: usize,
    params: &SimilarityParams,
) -> Result<Option<Chart>> {
    let m = params.m;
    let order = scan_order(points, anchor);
    let k_max = params.k_max_for(points.len());
    if order.len() < m || k_max < m {
        return Ok(None);
    }
    let mut members: Vec<usize> = std::iter::once(anchor).chain(order[..m - 1].iter().copied()).collect();
    let mut basis: Option<OrthonormalBasis> = None;
    for &cand in &order[m - 1..k_max] {
        let trial: Vec<&[f64]> = members
            .iter()
            .chain(std::iter::once(&cand))
            .map(|&i| points[i].as_ref())
            .collect();
        let fitted = match principal_basis(&trial, m) {
            Ok(b) => b,
            // Rank-deficient tentative set: reject the candidate, keep scanning.
            Err(Error::DegenerateNeighborhood(_)) => continue,
            Err(e) => return Err(e),
        };
        if trial
            .iter()
            .all(|x| reconstruction_quality(x, &fitted) >= params.threshold)
        {
            members.push(cand);
            basis = Some(fitted);
        }
    }
    Ok(basis.map(|basis| Chart {
        anchor_index: anchor,
        member_indices: members,
        basis,
    }))
}

pub fn build_charts<P: AsRef<[f64]> + Sync>(points: &[P], params: &SimilarityParams, seed: u64) -> Result<ChartSet> {
    build_charts_with(points, params, seed, false)
}

/// As [`build_charts`]; `parallel` grows charts on the rayon pool. Output is identical either way.
pub fn build_charts_with<P: AsRef<[f64]> + Sync>(
    points: &[P],
    params: &SimilarityParams,
    seed: u64,
    parallel: bool,
) -> Result<ChartSet> {
    params.validate()?;
    let n = points.len();
    if n < params.m + 1 {
        return Err(Error::DegenerateBatch(format!(
            "{n} points cannot support {}-dimensional charts",
            params.m
        )));
    }
    let d = points[0].as_ref().len();
    for p in points {
        ensure_len("batch point", p.as_ref().len(), d)?;
    }
    let mut rng = seeded_rng(seed);
    let mut anchors: Vec<usize> = sample(&mut rng, n, params.anchors_for(n)).into_vec();
    anchors.sort_unstable();

    let grown: Vec<Result<Option<Chart>>> = if parallel {
        anchors.par_iter().map(|&a| grow_chart(points, a, params)).collect()
    } else {
        anchors.iter().map(|&a| grow_chart(points, a, params)).collect()
    };
    let mut charts = Vec::new();
    for g in grown {
        if let Some(c) = g? {
            charts.push(c);
        }
    }
    if charts.is_empty() {
        return Err(Error::DegenerateBatch(format!(
            "all {} anchors produced rank-deficient neighborhoods",
            anchors.len()
        )));
    }

    let assignment = (0..n)
        .map(|i| {
            let x = points[i].as_ref();
            let mut best = (f64::INFINITY, 0);
            for (k, c) in charts.iter().enumerate() {
                let dd = sq_dist(x, points[c.anchor_index].as_ref());
                if dd < best.0 {
                    best = (dd, k);
                }
            }
            best.1
        })
        .collect();
    Ok(ChartSet { charts, assignment })
}

/// One-directional term `s′(z_i, z_j)` measured on the chart owning `j`.
fn directed_similarity<P: AsRef<[f64]>>(
    i: usize,
    j: usize,
    points: &[P],
    charts: &ChartSet,
    params: &SimilarityParams,
) -> Result<f64> {
    let proj = project_onto(points[i].as_ref(), points[j].as_ref(), &charts.chart_of(j).basis)?;
    Ok(decay(proj.orthogonal_dist, proj.projected_dist, params))
}

/// `(1 + o²)^−N_α · (1 + p)^−N_β` for orthogonal distance `o` and in-chart distance `p`.
pub fn decay(o: f64, p: f64, params: &SimilarityParams) -> f64 {
    (1.0 + o * o).powf(-params.n_alpha) * (1.0 + p).powf(-params.n_beta)
}

/// Symmetrized manifold similarity `(s′(i, j) + s′(j, i)) / 2`.
pub fn similarity<P: AsRef<[f64]>>(
    i: usize,
    j: usize,
    points: &[P],
    charts: &ChartSet,
    params: &SimilarityParams,
) -> Result<f64> {
    if i == j {
        return Ok(1.0);
    }
    let a = directed_similarity(i, j, points, charts, params)?;
    let b = directed_similarity(j, i, points, charts, params)?;
    Ok((a + b) / 2.0)
}

pub fn pairwise_similarity<P: AsRef<[f64]> + Sync>(
    points: &[P],
    charts: &ChartSet,
    params: &SimilarityParams,
) -> Result<Matrix> {
    pairwise_similarity_with(points, charts, params, false)
}

/// Full N×N similarity matrix. Entries are independent, so the parallel path is bitwise identical.
pub fn pairwise_similarity_with<P: AsRef<[f64]> + Sync>(
    points: &[P],
    charts: &ChartSet,
    params: &SimilarityParams,
    parallel: bool,
) -> Result<Matrix> {
    let n = points.len();
    ensure_len("chart assignment", charts.assignment.len(), n)?;
    let directed_row = |i: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|j| {
                if i == j {
                    Ok(1.0)
                } else {
                    directed_similarity(i, j, points, charts, params)
                }
            })
            .collect()
    };
    let rows: Vec<Vec<f64>> = if parallel {
        (0..n).into_par_iter().map(directed_row).collect::<Result<_>>()?
    } else {
        (0..n).map(directed_row).collect::<Result<_>>()?
    };
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        s.set(i, i, 1.0);
        for j in i + 1..n {
            let v = (rows[i][j] + rows[j][i]) / 2.0;
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::seeded_rng;
    use rand::Rng;

    fn line_basis(d: usize, axis: usize) -> OrthonormalBasis {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        OrthonormalBasis {
            vectors: Matrix::from_rows(&[v]).unwrap(),
            centroid: vec![0.0; d],
        }
    }

    #[test]
    fn quality_examples() {
        let b = line_basis(2, 0);
        assert_eq!(reconstruction_quality(&[3.0, 0.0], &b), 1.0);
        assert_eq!(reconstruction_quality(&[0.0, 2.0], &b), 0.0);
        assert_eq!(reconstruction_quality(&[0.0, 0.0], &b), 1.0);
        let q = reconstruction_quality(&[1.0, 1.0], &b);
        assert!((q - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn quality_is_scale_invariant() {
        let mut rng = seeded_rng(2);
        let pts: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b = principal_basis(&pts, 2).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: f64 = rng.random_range(0.01..100.0);
            let scaled: Vec<f64> = x.iter().zip(&b.centroid).map(|(xi, ci)| c * (xi - ci) + ci).collect();
            assert!((reconstruction_quality(&x, &b) - reconstruction_quality(&scaled, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_points_is_degenerate_batch() {
        let pts = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let p = SimilarityParams {
            m: 2,
            ..Default::default()
        };
        assert!(matches!(build_charts(&pts, &p, 0), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn identical_points_are_degenerate_batch() {
        let pts = vec![vec![1.0, 1.0, 1.0]; 10];
        let p = SimilarityParams {
            m: 1,
            ..Default::default()
        };
        assert!(matches!(build_charts(&pts, &p, 0), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn defaults_for_anchor_counts() {
        let p = SimilarityParams::default();
        assert_eq!(p.anchors_for(128), 16);
        assert_eq!(p.anchors_for(20), 8);
        assert_eq!(p.anchors_for(5), 5);
        assert_eq!(p.k_max_for(128), 32);
        assert_eq!(p.k_max_for(10), 9);
    }

    #[test]
    fn warns_when_n_alpha_not_above_n_beta() {
        let p = SimilarityParams {
            n_alpha: 0.5,
            n_beta: 2.0,
            ..Default::default()
        };
        assert_eq!(p.validate().unwrap().len(), 1);
        assert!(SimilarityParams::default().validate().unwrap().is_empty());
    }

    #[test]
    fn single_point_matrix() {
        let pts = vec![vec![0.0, 0.0]];
        let cs = ChartSet {
            charts: vec![Chart {
                anchor_index: 0,
                member_indices: vec![0],
                basis: line_basis(2, 0),
            }],
            assignment: vec![0],
        };
        let s = pairwise_similarity(&pts, &cs, &SimilarityParams::default()).unwrap();
        assert_eq!(s.as_slice(), &[1.0]);
    }

    #[test]
    fn in_span_unit_offset_gives_inverse_sqrt_two() {
        // Both points share a chart spanning axis 0; offset 1 along it.
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        let chart = Chart {
            anchor_index: 0,
            member_indices: vec![0, 1],
            basis: line_basis(2, 0),
        };
        let cs = ChartSet {
            charts: vec![chart],
            assignment: vec![0, 0],
        };
        let p = SimilarityParams::default();
        let s = similarity(0, 1, &pts, &cs, &p).unwrap();
        assert!((s - 2f64.powf(-0.5)).abs() < 1e-15);
        assert_eq!(s, similarity(1, 0, &pts, &cs, &p).unwrap());
        assert_eq!(similarity(1, 1, &pts, &cs, &p).unwrap(), 1.0);
    }

    #[test]
    fn chart_dump_has_header() {
        let pts: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, (i * i) as f64 * 0.01, 0.0]).collect();
        let p = SimilarityParams {
            m: 1,
            threshold: 0.5,
            ..Default::default()
        };
        let cs = build_charts(&pts, &p, 1).unwrap();
        let text = cs.to_text();
        assert!(text.starts_with("protoscope-charts version=1"));
        assert_eq!(text.lines().filter(|l| l.starts_with("assign ")).count(), 12);
    }
}
