use proptest::prelude::*;
use protoscope_core::dataset::{collect_rollout, discretize_action, ActionLayout, DatasetMeta, EncodedDataset, Row};
use protoscope_core::envlab::{canonical_prototypes, class_mean_prototypes, kmeans_prototypes, CartPole, PointMass};
use protoscope_core::numkit::{seeded_rng, sq_dist, Matrix};
use protoscope_core::{BlackBoxPolicy, PolicyDecomposition, Result};
use rand::Rng;
use rand_distr::StandardNormal;

fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

#[test]
fn discretization_is_argmax_of_magnitude() {
    let mut rng = seeded_rng(2024);
    let layout = ActionLayout::identity(&["a", "b", "c", "d", "e"], &[true; 5]).unwrap();
    for k in 0..10_000 {
        let mut v: Vec<f64> = (0..5).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
        if k % 10 == 0 {
            // exact ties in magnitude, including sign flips
            v[3] = -v[1];
        }
        assert_eq!(discretize_action(&v, &layout).unwrap(), argmax_abs(&v), "{v:?}");
    }
}

struct Linear {
    enc: Matrix,
    w: Matrix,
    b: Vec<f64>,
}

impl PolicyDecomposition for Linear {
    fn encode(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.enc.matvec(state)
    }
    fn final_weight(&self) -> &Matrix {
        &self.w
    }
    fn final_bias(&self) -> &[f64] {
        &self.b
    }
}

fn linear_policy() -> Linear {
    Linear {
        enc: Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.5], vec![0.0, 1.0, 0.0, 1.0]]).unwrap(),
        w: Matrix::from_rows(&[vec![-1.0, -2.0, -0.5], vec![1.0, 2.0, 0.5]]).unwrap(),
        b: vec![0.0, 0.0],
    }
}

#[test]
fn rollouts_are_deterministic_and_round_trip() {
    let p = linear_policy();
    let a = collect_rollout(&p, &mut CartPole::new(), 500, 11).unwrap();
    let b = collect_rollout(&p, &mut CartPole::new(), 500, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(EncodedDataset::from_text(&a.to_text()).unwrap(), a);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.txt");
    a.save(&path).unwrap();
    assert_eq!(EncodedDataset::load(&path).unwrap(), a);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), a.to_text());
}

#[test]
fn continuous_rollout_labels_by_dominant_force() {
    let p = linear_policy();
    let ds = collect_rollout(&p, &mut PointMass::new(), 200, 5).unwrap();
    for r in &ds.rows {
        assert_eq!(r.label, argmax_abs(&r.raw_action));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dataset_text_round_trip(seed in any::<u64>(), n in 1usize..20, d_z in 1usize..6, scale in -300i32..300) {
        let mut rng = seeded_rng(seed);
        let layout = ActionLayout::new(vec![2, 0, 1], vec!["x".into(), "y".into(), "w".into()], vec![true, false, true]).unwrap();
        let rows = (0..n).map(|_| {
            let raw: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal) * 10f64.powi(scale / 10)).collect();
            Row {
                z: (0..d_z).map(|_| rng.sample::<f64, _>(StandardNormal) * 10f64.powi(scale)).collect(),
                label: discretize_action(&raw, &layout).unwrap(),
                raw_action: raw,
            }
        }).collect();
        let ds = EncodedDataset::new(DatasetMeta { d_z, layout, discrete: false, env_name: "prop".into(), seed }, rows).unwrap();
        prop_assert_eq!(EncodedDataset::from_text(&ds.to_text()).unwrap(), ds);
    }
}

fn blob_dataset() -> EncodedDataset {
    let mut rng = seeded_rng(77);
    let mut rows = Vec::new();
    for i in 0..120 {
        let label = i % 2;
        let blob = (i / 2) % 2;
        let center = [label as f64 * 40.0 + blob as f64 * 10.0, -(blob as f64) * 10.0, 0.0];
        rows.push(Row {
            z: center.iter().map(|c| c + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect(),
            raw_action: if label == 0 { vec![0.9, -0.1] } else { vec![0.2, -0.7] },
            label,
        });
    }
    EncodedDataset::new(
        DatasetMeta {
            d_z: 3,
            layout: ActionLayout::identity(&["p", "q"], &[true, true]).unwrap(),
            discrete: false,
            env_name: "blobs".into(),
            seed: 0,
        },
        rows,
    )
    .unwrap()
}

#[test]
fn kmeans_puts_one_prototype_in_each_blob() {
    let ds = blob_dataset();
    let protos = kmeans_prototypes(&ds, 2, 3).unwrap();
    for class in 0..2 {
        let blobs: Vec<usize> = protos
            .entries
            .iter()
            .filter(|e| e.class == class)
            .map(|e| (e.dataset_index / 2) % 2)
            .collect();
        let mut sorted = blobs.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1], "class {class}: blobs {blobs:?}");
    }
}

#[test]
fn kmeans_with_one_center_takes_row_nearest_the_mean() {
    let ds = blob_dataset();
    let k = kmeans_prototypes(&ds, 1, 9).unwrap();
    let m = class_mean_prototypes(&ds).unwrap();
    let ki: Vec<usize> = k.entries.iter().map(|e| e.dataset_index).collect();
    let mi: Vec<usize> = m.entries.iter().map(|e| e.dataset_index).collect();
    assert_eq!(ki, mi);
}

#[test]
fn class_mean_matches_exhaustive_scan() {
    let mut rng = seeded_rng(31);
    for trial in 0..20 {
        let rows: Vec<Row> = (0..40)
            .map(|i| Row {
                z: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                raw_action: vec![1.0, 0.0, 0.0],
                label: (i * 7 + trial) % 3,
            })
            .collect();
        let ds = EncodedDataset::new(
            DatasetMeta {
                d_z: 4,
                layout: ActionLayout::identity(&["a", "b", "c"], &[false; 3]).unwrap(),
                discrete: false,
                env_name: "r".into(),
                seed: 0,
            },
            rows,
        )
        .unwrap();
        let got = class_mean_prototypes(&ds).unwrap();
        for c in 0..3 {
            let members: Vec<usize> = (0..40).filter(|&i| ds.rows[i].label == c).collect();
            let mut mean = [0.0; 4];
            for &i in &members {
                for k in 0..4 {
                    mean[k] += ds.rows[i].z[k] / members.len() as f64;
                }
            }
            let mut best = members[0];
            for &i in &members {
                if sq_dist(&ds.rows[i].z, &mean) < sq_dist(&ds.rows[best].z, &mean) {
                    best = i;
                }
            }
            assert_eq!(got.entries[c].dataset_index, best);
        }
    }
}

#[test]
fn selectors_return_verbatim_rows() {
    let ds = blob_dataset();
    for set in [
        kmeans_prototypes(&ds, 2, 1).unwrap(),
        class_mean_prototypes(&ds).unwrap(),
        canonical_prototypes(&ds).unwrap(),
    ] {
        set.check_against(&ds).unwrap();
        if set.method != "canonical" {
            for e in &set.entries {
                assert_eq!(ds.rows[e.dataset_index].label, e.class);
            }
        }
    }
}

#[test]
fn blackbox_training_is_deterministic_and_solves_cartpole() {
    let cfg = protoscope_core::BlackBoxConfig::default();
    let a = protoscope_core::envlab::train_blackbox("cartpole", &cfg, 5).unwrap();
    let b = protoscope_core::envlab::train_blackbox("cartpole", &cfg, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(BlackBoxPolicy::from_text(&a.to_text()).unwrap(), a);
    let stats = protoscope_core::evaluate(&a, &mut CartPole::new(), 30, 5).unwrap();
    assert!(stats.mean >= 195.0, "mean {}", stats.mean);
}
