//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use protoscope_cli::report::{parse_ablation, parse_report};
use protoscope_core::gradcheck::{self, GradcheckConfig, TOLERANCE};
use protoscope_core::manifold::decay;
use protoscope_core::numkit::{argmax, principal_basis, project_onto, seeded_rng, sq_dist, Matrix};
use protoscope_core::pwnet::{class_identity_weights, sim_sq, train_stage2, PWNetHead, Slot, Stage2Config};
use protoscope_core::{
    build_charts, discretize_action, extract_prototypes, make_planes_fixture, pairwise_similarity, train_stage1,
    ActionLayout, SignMode, SimilarityParams, Stage1Config,
};
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_protoscope"));
    c.env_remove("PROTOSCOPE_SEED");
    c
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`protoscope {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn gaussian(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn ac1() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 1..=5 {
        for r in gradcheck::run(seed, &GradcheckConfig::default()).map_err(|e| e.to_string())? {
            check(r.max_rel_err < TOLERANCE, || format!("seed {seed}: {} rel err {:e}", r.component, r.max_rel_err))?;
            worst = worst.max(r.max_rel_err);
        }
    }
    Ok(format!("5 seeds, worst rel err {worst:.2e}"))
}

fn naive_similarity(points: &[Vec<f64>], charts: &protoscope_core::ChartSet, p: &SimilarityParams) -> Vec<Vec<f64>> {
    let n = points.len();
    let directed = |i: usize, j: usize| {
        let b = &charts.chart_of(j).basis;
        let diff: Vec<f64> = points[i].iter().zip(&points[j]).map(|(a, c)| a - c).collect();
        let mut along = vec![0.0; diff.len()];
        for v in b.vectors.row_iter() {
            let c: f64 = v.iter().zip(&diff).map(|(x, y)| x * y).sum();
            along.iter_mut().zip(v).for_each(|(s, x)| *s += c * x);
        }
        let o2: f64 = diff.iter().zip(&along).map(|(a, s)| (a - s) * (a - s)).sum();
        let pp: f64 = along.iter().map(|s| s * s).sum::<f64>().sqrt();
        (1.0 + o2).powf(-p.n_alpha) * (1.0 + pp).powf(-p.n_beta)
    };
    let mut s = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s[i][j] = (directed(i, j) + directed(j, i)) / 2.0;
            }
        }
    }
    s
}

fn ac2() -> Outcome {
    let mut rng = seeded_rng(2024);
    let mut worst_pyth: f64 = 0.0;
    for k in 0..1000 {
        let d = 3 + k % 7;
        let m = 1 + k % (d - 1).min(3);
        let cloud = gaussian(&mut rng, m + 5, d);
        let basis = principal_basis(&cloud, m).map_err(|e| e.to_string())?;
        let pts = gaussian(&mut rng, 2, d);
        let r = project_onto(&pts[0], &pts[1], &basis).map_err(|e| e.to_string())?;
        let rhs = sq_dist(&pts[0], &pts[1]);
        let rel = (r.orthogonal_dist.powi(2) + r.projected_dist.powi(2) - rhs).abs() / rhs;
        worst_pyth = worst_pyth.max(rel);
    }
    check(worst_pyth < 1e-9, || format!("Pythagoras rel err {worst_pyth:e}"))?;

    let params = SimilarityParams { m: 2, ..Default::default() };
    let mut worst_ortho: f64 = 0.0;
    let mut worst_pair: f64 = 0.0;
    for seed in 0..50 {
        let pts = gaussian(&mut seeded_rng(seed), 8, 5);
        let charts = build_charts(&pts, &params, seed).map_err(|e| e.to_string())?;
        for j in 0..8 {
            worst_ortho = worst_ortho.max(charts.chart_of(j).basis.orthonormality_error());
        }
        let got = pairwise_similarity(&pts, &charts, &params).map_err(|e| e.to_string())?;
        let want = naive_similarity(&pts, &charts, &params);
        for i in 0..8 {
            for j in 0..8 {
                worst_pair = worst_pair.max((got.get(i, j) - want[i][j]).abs());
            }
        }
    }
    check(worst_ortho < 1e-8, || format!("orthonormality error {worst_ortho:e}"))?;
    check(worst_pair < 1e-12, || format!("pairwise vs naive {worst_pair:e}"))?;
    Ok(format!("pythagoras {worst_pyth:.1e}, |BBᵀ-I| {worst_ortho:.1e}, pairwise {worst_pair:.1e}"))
}

fn ac3() -> Outcome {
    let fx = make_planes_fixture(3, 30, 10, 0.01, 3).map_err(|e| e.to_string())?;
    let pts: Vec<Vec<f64>> = fx.dataset.rows.iter().map(|r| r.z.clone()).collect();
    let grid_o = [0.0, 0.1, 0.5, 1.0, 2.0, 5.0];
    let mut cells = 0;
    for na in 1..=6 {
        for nb2 in 1..=6 {
            let (na, nb) = (na as f64, nb2 as f64 * 0.5);
            let params = SimilarityParams { m: 2, n_alpha: na, n_beta: nb, ..Default::default() };
            let charts = build_charts(&pts, &params, 1).map_err(|e| e.to_string())?;
            let s = pairwise_similarity(&pts, &charts, &params).map_err(|e| e.to_string())?;
            for i in 0..pts.len() {
                check(s.get(i, i) == 1.0, || format!("diagonal {i} = {}", s.get(i, i)))?;
                for j in 0..pts.len() {
                    let v = s.get(i, j);
                    check(v == s.get(j, i), || format!("asymmetric at ({i},{j})"))?;
                    check(v > 0.0 && v <= 1.0, || format!("s[{i},{j}] = {v} outside (0,1]"))?;
                }
            }
            for &o in &grid_o {
                for &p in &grid_o {
                    let base = decay(o, p, &params);
                    check(decay(o + 0.25, p, &params) < base, || format!("not decreasing in o at ({o},{p}), Nα={na} Nβ={nb}"))?;
                    check(decay(o, p + 0.25, &params) < base, || format!("not decreasing in p at ({o},{p}), Nα={na} Nβ={nb}"))?;
                }
            }
            let (off, on) = (decay(1.0, 0.0, &params), decay(0.0, 1.0, &params));
            if na > nb {
                check(off < on, || format!("off-manifold {off} not below in-plane {on} at Nα={na} Nβ={nb}"))?;
            }
            cells += 1;
        }
    }
    Ok(format!("{cells} parameter cells, 90-point batches"))
}

fn ac4() -> Outcome {
    let sigma = 0.01;
    let fx = make_planes_fixture(3, 500, 10, sigma, 7).map_err(|e| e.to_string())?;
    let cfg = Stage1Config {
        epochs: 50,
        sign_mode: SignMode::Semantic,
        seed: 7,
        ..Default::default()
    };
    let st = train_stage1(&fx.dataset, &cfg).map_err(|e| e.to_string())?;
    let protos = extract_prototypes(&st, &fx.dataset).map_err(|e| e.to_string())?;
    check(protos.entries.len() == 3, || format!("{} prototypes", protos.entries.len()))?;
    let emb: Vec<Vec<f64>> = fx.dataset.rows.iter().map(|r| st.net.forward(&r.z).unwrap()).collect();
    let mut labels_ok = 0;
    let mut residuals = Vec::new();
    for e in &protos.entries {
        let row = &fx.dataset.rows[e.dataset_index];
        // brute-force oracle: the in-class row whose embedding is nearest the momentum proxy
        let target = st.bank.m(e.class, 0);
        let oracle = (0..fx.dataset.len())
            .filter(|&i| fx.dataset.rows[i].label == e.class)
            .min_by(|&a, &b| sq_dist(&emb[a], target).total_cmp(&sq_dist(&emb[b], target)))
            .unwrap();
        check(oracle == e.dataset_index, || format!("class {}: picked row {}, oracle {oracle}", e.class, e.dataset_index))?;
        check(row.z == e.z, || "prototype z is not a verbatim row".into())?;
        if row.label == e.class {
            labels_ok += 1;
        }
        residuals.push(fx.residual(e.class, &e.z).map_err(|e| e.to_string())? / sigma);
    }
    let first = st.loss_history.first().unwrap().total;
    let last = st.loss_history.last().unwrap().total;
    let detail = format!(
        "labels {labels_ok}/3, residuals [{}]σ, loss {first:.4} -> {last:.4}",
        residuals.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(", ")
    );
    check(labels_ok == 3, || format!("(a) {detail}"))?;
    check(residuals.iter().all(|&r| r < 3.0), || format!("(b) {detail}"))?;
    check(last < first, || format!("(c) {detail}"))?;
    Ok(detail)
}

fn ac5() -> Outcome {
    let mut rng = seeded_rng(5);
    let layout = ActionLayout::identity(&["a", "b", "c", "d", "e", "f"], &[true; 6]).map_err(|e| e.to_string())?;
    for k in 0..10_000 {
        let mut v: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal) * 4.0).collect();
        if k % 7 == 0 {
            v[4] = -v[2];
        }
        if k % 11 == 0 {
            v[5] = v[0];
        }
        let mut want = 0;
        for i in 1..6 {
            if v[i].abs() > v[want].abs() {
                want = i;
            }
        }
        let got = discretize_action(&v, &layout).map_err(|e| e.to_string())?;
        check(got == want, || format!("{v:?}: got {got}, want {want}"))?;
    }
    Ok("10000 vectors, ties included".into())
}

fn ac6(dir: &Path) -> Outcome {
    let out = dir.join("cartpole");
    run_cli(&["pipeline", "--env", "cartpole", "--seed", "7", "--out", out.to_str().unwrap()])?;
    let rows = parse_report(&std::fs::read_to_string(out.join("report.csv")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let get = |m: &str| rows.iter().find(|r| r.method == m).cloned().ok_or_else(|| format!("no `{m}` row"));
    let (bb, ours, cm) = (get("blackbox")?, get("ours")?, get("classmean")?);
    for m in ["kmeans", "canonical"] {
        get(m)?;
    }
    let detail = format!(
        "blackbox {:.1}±{:.1}, ours {:.1}±{:.1} ({:.1}%), classmean {:.1}±{:.1}, over {} episodes",
        bb.mean,
        bb.stderr,
        ours.mean,
        ours.stderr,
        100.0 * ours.mean / bb.mean,
        cm.mean,
        cm.stderr,
        bb.n
    );
    check(bb.n == 30 && ours.n == 30, || format!("episode counts: {detail}"))?;
    check(bb.mean >= 195.0, || format!("black box below 195: {detail}"))?;
    check(ours.mean >= 0.95 * bb.mean, || format!("wrapped below 95%: {detail}"))?;
    Ok(detail)
}

fn ac7() -> Outcome {
    let mut rng = seeded_rng(77);
    for _ in 0..1000 {
        let d2 = rng.random_range(0.0..1e6f64) * rng.random_range(0.0..1.0f64).powi(4);
        let eps = 10f64.powf(rng.random_range(-9.0..-1.0));
        let s = sim_sq(d2, eps);
        check(s > 0.0 && s <= (1.0 / eps).ln() + 1e-12, || format!("sim({d2}, {eps}) = {s} out of bounds"))?;
        check(sim_sq(d2 * 1.5 + 1e-6, eps) < s, || format!("sim not decreasing at d²={d2}"))?;
    }

    let fx = make_planes_fixture(3, 60, 10, 0.01, 8).map_err(|e| e.to_string())?;
    let mut slots = Vec::new();
    for c in 0..3 {
        let i = fx.dataset.indices_of_class(c)[0];
        slots.push(Slot {
            projection: Matrix::from_vec(6, 10, (0..60).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.3).collect()).unwrap(),
            prototype_embedding: fx.dataset.rows[i].z[..6].to_vec(),
        });
    }
    let mut head = PWNetHead::new(slots, class_identity_weights(3, &[0, 1, 2]), 1e-5).map_err(|e| e.to_string())?;
    let frozen: Vec<Vec<u64>> = head.slots.iter().map(|s| s.prototype_embedding.iter().map(|v| v.to_bits()).collect()).collect();
    let w_bits: Vec<u64> = head.w_prime.as_slice().iter().map(|v| v.to_bits()).collect();
    train_stage2(&mut head, &fx.dataset, &Stage2Config { epochs: 5, ..Default::default() }).map_err(|e| e.to_string())?;
    let after: Vec<Vec<u64>> = head.slots.iter().map(|s| s.prototype_embedding.iter().map(|v| v.to_bits()).collect()).collect();
    check(after == frozen, || "prototype embeddings changed".into())?;
    check(head.w_prime.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>() == w_bits, || "W′ changed".into())?;

    let perm = [2, 0, 1];
    let mut w = Matrix::zeros(3, 3);
    for (new, &old) in perm.iter().enumerate() {
        for a in 0..3 {
            w.set(a, new, head.w_prime.get(a, old));
        }
    }
    let permuted = PWNetHead::new(perm.iter().map(|&j| head.slots[j].clone()).collect(), w, head.eps_sim).map_err(|e| e.to_string())?;
    for r in &fx.dataset.rows {
        let a = head.wrap_forward(&r.z).map_err(|e| e.to_string())?;
        let b = permuted.wrap_forward(&r.z).map_err(|e| e.to_string())?;
        check(a == b, || format!("permuted head differs: {a:?} vs {b:?}"))?;
        check(argmax(&a) == argmax(&b), || "argmax differs".into())?;
    }
    Ok("1000 sim fuzz points, frozen parameters bitwise equal, permutation exact".into())
}

fn chain(dir: &Path) -> Result<(Vec<(String, Vec<u8>)>, String), String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let p = |f: &str| dir.join(f).to_str().unwrap().to_string();
    let common = ["--deterministic", "--seed", "7", "--set", "epochs=5", "--set", "stage2_epochs=3"];
    let with = |args: &[&str]| -> Vec<String> { args.iter().chain(common.iter()).map(|s| s.to_string()).collect() };
    let run = |args: Vec<String>| run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
    run(with(&["collect", "--env", "cartpole", "--steps", "3000", "--out", &p("data.txt"), "--save-policy", &p("policy.txt")]))?;
    run(with(&["discover", "--data", &p("data.txt"), "--out", &p("stage1.ckpt")]))?;
    run(with(&["baseline", "--method", "kmeans", "--data", &p("data.txt"), "--out", &p("kmeans.protos")]))?;
    run(with(&["wrap", "--ckpt", &p("stage1.ckpt"), "--data", &p("data.txt"), "--out", &p("head.txt")]))?;
    run(with(&["wrap", "--ckpt", &p("stage1.ckpt"), "--data", &p("data.txt"), "--protos", &p("kmeans.protos"), "--out", &p("head_kmeans.txt")]))?;
    let mut rows = run(with(&["eval", "--head", &p("head.txt"), "--policy", &p("policy.txt"), "--episodes", "30"]))?;
    rows += &run(with(&["eval", "--head", &p("head_kmeans.txt"), "--policy", &p("policy.txt"), "--method", "kmeans"]))?;
    rows += &run(with(&["eval", "--policy", &p("policy.txt")]))?;
    let mut files = Vec::new();
    for f in ["policy.txt", "data.txt", "stage1.ckpt", "stage1.protos", "kmeans.protos", "head.txt", "head_kmeans.txt"] {
        files.push((f.to_string(), std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"))?));
    }
    Ok((files, rows))
}

fn ac8(dir: &Path) -> Outcome {
    let (fa, ra) = chain(&dir.join("run_a"))?;
    let (fb, rb) = chain(&dir.join("run_b"))?;
    for ((name, a), (_, b)) in fa.iter().zip(&fb) {
        check(a == b, || format!("{name} differs between runs"))?;
    }
    check(ra == rb, || format!("report rows differ:\n{ra}\n{rb}"))?;
    let rows: Vec<&str> = ra.lines().filter(|l| !l.starts_with("method,")).collect();
    check(rows.len() == 3, || format!("expected 3 rows, got {}", rows.len()))?;
    Ok(format!("{} artifacts bitwise identical, rows: {}", fa.len(), rows.join(" | ")))
}

fn ac9(dir: &Path) -> Outcome {
    let mut summary = Vec::new();
    for (param, values) in [("m", "2,3,4"), ("gamma", "0.3,0.999")] {
        let out = dir.join(format!("ablate_{param}"));
        run_cli(&["ablate", "--param", param, "--values", values, "--set", "env=planes", "--seed", "7", "--out", out.to_str().unwrap()])?;
        let csv = std::fs::read_to_string(out.join("ablation.csv")).map_err(|e| e.to_string())?;
        let pts = parse_ablation(&csv).map_err(|e| e.to_string())?;
        let n = values.split(',').count();
        check(pts.len() == n, || format!("{param}: {} rows, want {n}", pts.len()))?;
        check(csv.ends_with('\n') && !csv.contains('\r'), || "CSV line endings".into())?;
        for (p, v) in pts.iter().zip(values.split(',')) {
            check(p.value == v && p.parameter == param, || format!("row for {}={}", p.parameter, p.value))?;
            check(p.row.mean.is_finite() && (0.0..=1.0).contains(&p.row.mean), || format!("metric {}", p.row.mean))?;
        }
        let svg = std::fs::read_to_string(out.join("ablation.svg")).map_err(|e| e.to_string())?;
        check(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), || "SVG not closed".into())?;
        check(svg.matches("<circle").count() == n, || "SVG point count".into())?;
        let trend = std::fs::read_to_string(out.join("trend.txt")).map_err(|e| e.to_string())?;
        let observed = trend.lines().find_map(|l| l.strip_prefix("observed=")).unwrap_or("?").to_string();
        let vals: Vec<String> = pts.iter().map(|p| format!("{}={:.4}", p.value, p.row.mean)).collect();
        summary.push(format!("{param}: {} ({observed})", vals.join(" ")));
    }
    Ok(summary.join("; "))
}

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Outcome>)> = vec![
        ("AC1 gradient fidelity", Duration::from_secs(30), Box::new(ac1)),
        ("AC2 geometry oracles", Duration::from_secs(10), Box::new(ac2)),
        ("AC3 similarity structure", Duration::from_secs(10), Box::new(ac3)),
        ("AC4 prototype recovery", Duration::from_secs(180), Box::new(ac4)),
        ("AC5 discretization", Duration::from_secs(1), Box::new(ac5)),
        ("AC6 end-to-end parity", Duration::from_secs(600), Box::new(|| ac6(dir.path()))),
        ("AC7 head properties", Duration::from_secs(60), Box::new(ac7)),
        ("AC8 determinism", Duration::from_secs(600), Box::new(|| ac8(dir.path()))),
        ("AC9 ablation harness", Duration::from_secs(900), Box::new(|| ac9(dir.path()))),
    ];
    let mut failed = 0;
    for (name, budget, f) in &criteria {
        let t = Instant::now();
        let res = f();
        let took = t.elapsed();
        let res = match res {
            Ok(d) if took > *budget => Err(format!("{d}; took {:.1}s, budget {}s", took.as_secs_f64(), budget.as_secs())),
            other => other,
        };
        match res {
            Ok(d) => println!("PASS {name} ({:.1}s): {d}", took.as_secs_f64()),
            Err(d) => {
                failed += 1;
                println!("FAIL {name} ({:.1}s): {d}", took.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
