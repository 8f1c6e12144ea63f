use std::path::Path;
use std::process::{Command, Output};

use protoscope_cli::report::{parse_ablation, parse_report};

fn protoscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoscope"))
        .env_remove("PROTOSCOPE_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = protoscope(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = protoscope(&["discover"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage:") && err.contains("--out"), "{err}");
}

#[test]
fn unknown_config_key_exits_2_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# comment\nm=3\nbogus=1\n").unwrap();
    let out = protoscope(&["fixture", "--name", "planes", "--out", s(&dir.path().join("f.txt")), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[usage]:") && err.contains("bogus") && err.contains("line 3"), "{err}");
}

#[test]
fn unknown_ablation_parameter_is_a_usage_error() {
    let out = protoscope(&["ablate", "--param", "lr_net", "--values", "1", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1() {
    let out = protoscope(&["discover", "--data", "/definitely/not/here.txt", "--out", "/tmp/never.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[io]:"), "{err}");
}

#[test]
fn help_lists_defaults() {
    let help = ok(&["pipeline", "--help"]);
    for line in ["gamma                  0.999", "threshold              0.9", "epochs                 200", "PROTOSCOPE_SEED"] {
        assert!(help.contains(line), "missing `{line}`");
    }
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.txt"), dir.path().join("b.txt"), dir.path().join("c.txt"));
    let small = ["--set", "fixture_n=20"];
    let run_env = |out: &Path| {
        let o = Command::new(env!("CARGO_BIN_EXE_protoscope"))
            .env("PROTOSCOPE_SEED", "11")
            .args(["fixture", "--name", "planes", "--out", s(out)])
            .args(small)
            .output()
            .unwrap();
        assert!(o.status.success());
    };
    run_env(&a);
    ok(&["fixture", "--name", "planes", "--out", s(&b), "--seed", "11", small[0], small[1]]);
    ok(&["fixture", "--name", "planes", "--out", s(&c), "--seed", "12", small[0], small[1]]);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn gradcheck_names_the_corrupted_component() {
    let out = protoscope(&["gradcheck", "--corrupt", "pa-semantic"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("pa_loss[semantic]") && !err.contains("manifold"), "{err}");
    let table = ok(&["gradcheck", "--seeds", "2"]);
    assert_eq!(table.lines().filter(|l| l.ends_with(",pass")).count(), 10);
}

#[test]
fn chained_commands_produce_an_eval_row() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| dir.path().join(f);
    let fast = ["--seed", "3", "--set", "epochs=2", "--set", "stage2_epochs=2"];
    let with = |args: &[&str]| -> Vec<String> { args.iter().chain(&fast).map(|a| a.to_string()).collect() };
    let run = |v: Vec<String>| ok(&v.iter().map(String::as_str).collect::<Vec<_>>());

    let collected = run(with(&["collect", "--env", "cartpole", "--steps", "1200", "--out", s(&p("d/data.txt"))]));
    assert!(collected.contains("rows=1200"));
    assert!(p("d/data.policy").exists());
    run(with(&["discover", "--data", s(&p("d/data.txt")), "--out", s(&p("s1.ckpt"))]));
    assert!(p("s1.protos").exists());
    for m in ["kmeans", "classmean", "canonical"] {
        run(with(&["baseline", "--method", m, "--data", s(&p("d/data.txt")), "--out", s(&p(&format!("{m}.protos")))]));
    }
    run(with(&["wrap", "--ckpt", s(&p("s1.ckpt")), "--data", s(&p("d/data.txt")), "--out", s(&p("head.txt"))]));
    run(with(&[
        "wrap", "--ckpt", s(&p("s1.ckpt")), "--data", s(&p("d/data.txt")), "--protos", s(&p("classmean.protos")),
        "--out", s(&p("head_cm.txt")),
    ]));
    let out = run(with(&[
        "eval", "--head", s(&p("head.txt")), "--policy", s(&p("d/data.policy")), "--env", "cartpole", "--episodes", "30",
        "--report", s(&p("r.csv")),
    ]));
    let rows = parse_report(&out).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].method.as_str(), rows[0].n, rows[0].seed), ("ours", 30, 3));
    run(with(&["eval", "--head", s(&p("head_cm.txt")), "--policy", s(&p("d/data.policy")), "--method", "classmean", "--report", s(&p("r.csv"))]));
    let all = parse_report(&std::fs::read_to_string(p("r.csv")).unwrap()).unwrap();
    assert_eq!(all.iter().map(|r| r.method.as_str()).collect::<Vec<_>>(), ["ours", "classmean"]);
    assert_eq!(all[0].config_hash, all[1].config_hash);
}

#[test]
fn cartpole_pipeline_reports_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "pipeline", "--env", "cartpole", "--seed", "2", "--out", s(dir.path()), "--set", "steps=1500", "--set", "epochs=2",
        "--set", "stage2_epochs=2",
    ]);
    let rows = parse_report(&out).unwrap();
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["blackbox", "ours", "kmeans", "classmean", "canonical"]);
    assert_eq!(std::fs::read_to_string(dir.path().join("report.csv")).unwrap(), out);
    let svg = std::fs::read_to_string(dir.path().join("report.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    let timings = std::fs::read_to_string(dir.path().join("timings.csv")).unwrap();
    assert!(timings.starts_with("stage,seconds\ndiscover") || timings.contains("\ndiscover,"));
}

#[test]
fn single_value_ablation_is_a_single_point_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "ablate", "--param", "delta", "--values", "2", "--out", s(dir.path()), "--set", "env=planes", "--set", "fixture_n=60",
        "--set", "epochs=3",
    ]);
    let pts = parse_ablation(&out).unwrap();
    assert_eq!(pts.len(), 1);
    assert_eq!((pts[0].parameter.as_str(), pts[0].value.as_str(), pts[0].row.metric.as_str()), ("delta", "2", "agreement"));
    let trend = std::fs::read_to_string(dir.path().join("trend.txt")).unwrap();
    assert!(trend.contains("observed=single_point") && trend.contains("published=flat"));
    assert!(dir.path().join("delta=2").join("stage1.ckpt").exists());
}

#[test]
fn config_file_then_set_then_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "seed=5\nfixture_n=15\nfixture_classes=4\n").unwrap();
    let out = ok(&["fixture", "--name", "planes", "--out", s(&dir.path().join("f.txt")), "--config", s(&cfg), "--set", "fixture_n=10"]);
    assert!(out.contains("rows=40"), "{out}");
    let ds = protoscope_core::EncodedDataset::load(&dir.path().join("f.txt")).unwrap();
    assert_eq!(ds.meta.seed, 5);
    ok(&["fixture", "--name", "planes", "--out", s(&dir.path().join("g.txt")), "--config", s(&cfg), "--seed", "6"]);
    assert_eq!(protoscope_core::EncodedDataset::load(&dir.path().join("g.txt")).unwrap().meta.seed, 6);
}
