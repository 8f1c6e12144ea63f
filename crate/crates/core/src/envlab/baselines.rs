//! Comparison prototype selectors. Every selector returns verbatim dataset rows.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::dataset::EncodedDataset;
use crate::discover::{nearest_untaken, PrototypeEntry, PrototypeSet};
use crate::error::{Error, Result};
use crate::numkit::{derive_seed, seeded_rng, sq_dist, Rng as SeededRng};

pub const KMEANS_MAX_ITERS: usize = 100;

fn entry(dataset: &EncodedDataset, class: usize, slot: usize, idx: usize) -> PrototypeEntry {
    PrototypeEntry {
        class,
        slot,
        dataset_index: idx,
        z: dataset.rows[idx].z.clone(),
        embedding: Vec::new(),
    }
}

fn class_members(dataset: &EncodedDataset, class: usize, need: usize) -> Result<Vec<usize>> {
    let members = dataset.indices_of_class(class);
    if members.is_empty() || members.len() < need {
        return Err(Error::Config(format!(
            "class {class} has {} rows, need at least {}",
            members.len(),
            need.max(1)
        )));
    }
    Ok(members)
}

fn nearest_center(p: &[f64], centers: &[Vec<f64>]) -> usize {
    centers
        .iter()
        .enumerate()
        .map(|(k, c)| (sq_dist(p, c), k))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map_or(0, |(_, k)| k)
}

/// k-means++ seeding then Lloyd iterations until assignments stop changing or
/// the iteration cap is hit.
pub fn kmeans(points: &[&[f64]], k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // every point already coincides with a center
            Err(_) => rng.random_range(0..n),
        };
        centers.push(points[next].to_vec());
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let next: Vec<usize> = points.iter().map(|p| nearest_center(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64]> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| *p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    centers
}

/// Per class, `per_class` k-means centers on the encoded states, each snapped to
/// the nearest unused row of that class.
pub fn kmeans_prototypes(dataset: &EncodedDataset, per_class: usize, seed: u64) -> Result<PrototypeSet> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be >= 1".into()));
    }
    let mut entries = Vec::new();
    for class in 0..dataset.classes() {
        let members = class_members(dataset, class, per_class)?;
        let pts: Vec<&[f64]> = members.iter().map(|&i| dataset.rows[i].z.as_slice()).collect();
        let mut rng = seeded_rng(derive_seed(seed, class as u64));
        let centers = kmeans(&pts, per_class, &mut rng);
        let mut taken = Vec::new();
        for (slot, c) in centers.iter().enumerate() {
            let idx = nearest_untaken(&pts, &members, c, &taken).expect("enough rows");
            taken.push(idx);
            entries.push(entry(dataset, class, slot, idx));
        }
    }
    Ok(PrototypeSet {
        method: "kmeans".into(),
        entries,
    })
}

/// Per class, the row nearest the class-mean encoded state.
pub fn class_mean_prototypes(dataset: &EncodedDataset) -> Result<PrototypeSet> {
    let mut entries = Vec::new();
    for class in 0..dataset.classes() {
        let members = class_members(dataset, class, 1)?;
        let pts: Vec<&[f64]> = members.iter().map(|&i| dataset.rows[i].z.as_slice()).collect();
        let mut mean = vec![0.0; dataset.meta.d_z];
        for p in &pts {
            mean.iter_mut().zip(p.iter()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= pts.len() as f64);
        let idx = nearest_untaken(&pts, &members, &mean, &[]).expect("non-empty class");
        entries.push(entry(dataset, class, 0, idx));
    }
    Ok(PrototypeSet {
        method: "classmean".into(),
        entries,
    })
}

/// Per class `c`, the row (searched over the whole dataset) whose flattened raw
/// action is nearest `+e_c`, or `−e_c` when position `c` is signed.
pub fn canonical_prototypes(dataset: &EncodedDataset) -> Result<PrototypeSet> {
    if dataset.is_empty() {
        return Err(Error::Config("canonical selector needs a non-empty dataset".into()));
    }
    let layout = &dataset.meta.layout;
    let flat: Vec<Vec<f64>> = dataset
        .rows
        .iter()
        .map(|r| layout.flatten(&r.raw_action))
        .collect::<Result<_>>()?;
    let a = layout.len();
    let mut entries = Vec::new();
    for class in 0..a {
        let mut variants = vec![1.0];
        if layout.signed()[class] {
            variants.push(-1.0);
        }
        let mut best = (f64::INFINITY, 0usize);
        for (i, f) in flat.iter().enumerate() {
            for &s in &variants {
                let mut canon = vec![0.0; a];
                canon[class] = s;
                let d = sq_dist(f, &canon);
                if d < best.0 {
                    best = (d, i);
                }
            }
        }
        entries.push(entry(dataset, class, 0, best.1));
    }
    Ok(PrototypeSet {
        method: "canonical".into(),
        entries,
    })
}
