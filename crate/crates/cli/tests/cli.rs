use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kdebench_core::{DensityEstimator, Model, PointSet};

fn kdebench(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdebench"))
        .args(args)
        .current_dir(cwd)
        .env_remove("KDEBENCH_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn generate_writes_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = kdebench(
        &[
            "generate",
            "--dataset",
            "arc",
            "--n",
            "1000",
            "--seed",
            "7",
            "--out",
            "arc.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pts = PointSet::load_csv(dir.path().join("arc.csv")).unwrap();
    assert_eq!((pts.len(), pts.dim()), (1000, 2));
}

#[test]
fn generate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.csv", "b.csv"] {
        let out = kdebench(
            &[
                "generate",
                "--dataset",
                "mixture10d",
                "--n",
                "300",
                "--seed",
                "3",
                "--out",
                name,
            ],
            dir.path(),
        );
        assert_eq!(code(&out), 0);
    }
    assert_eq!(
        fs::read(dir.path().join("a.csv")).unwrap(),
        fs::read(dir.path().join("b.csv")).unwrap()
    );
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&kdebench(
            &["generate", "--dataset", "nope", "--n", "10"],
            dir.path()
        )),
        2
    );
    assert_eq!(code(&kdebench(&["frobnicate"], dir.path())), 2);
    assert_eq!(code(&kdebench(&["generate", "--n", "10"], dir.path())), 2);
    assert_eq!(
        code(&kdebench(&["benchmark", "--preset", "huge"], dir.path())),
        2
    );
}

#[test]
fn fit_validation() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("pts.csv"), "x1,x2\n0,0\n1,1\n").unwrap();
    fs::write(dir.path().join("empty.csv"), "x1,x2\n").unwrap();
    fs::write(dir.path().join("bad.csv"), "x1,x2\n0,zero\n").unwrap();
    let fit = |data: &str, extra: &[&str]| {
        let mut args = vec!["fit", "--data", data, "--out", "m.json"];
        args.extend_from_slice(extra);
        code(&kdebench(&args, dir.path()))
    };
    assert_eq!(fit("pts.csv", &["--gamma", "0"]), 2);
    assert_eq!(fit("pts.csv", &["--gamma", "-1"]), 2);
    assert_eq!(fit("pts.csv", &["--sigma", "-1"]), 2);
    assert_eq!(fit("empty.csv", &["--gamma", "1"]), 2);
    assert_eq!(fit("bad.csv", &["--gamma", "1"]), 2);
    assert_eq!(fit("missing.csv", &["--gamma", "1"]), 3);
    assert_eq!(fit("pts.csv", &["--gamma", "1", "--estimator", "magic"]), 2);
    assert_eq!(fit("pts.csv", &["--gamma", "1"]), 0);
}

#[test]
fn exact_model_single_point() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("one.csv"), "x1,x2\n0,0\n").unwrap();
    let out = kdebench(
        &[
            "fit",
            "--data",
            "one.csv",
            "--estimator",
            "raw",
            "--gamma",
            "0.5",
            "--out",
            "m.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let model: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("m.json")).unwrap()).unwrap();
    assert!(
        model.to_string().contains("train"),
        "exact model embeds its training points"
    );
    let out = kdebench(
        &["estimate", "--model", "m.json", "--queries", "one.csv"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("density"));
    let v: f64 = lines.next().unwrap().parse().unwrap();
    assert!((v - 0.159155).abs() < 1e-6);
}

#[test]
fn estimate_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("one.csv"), "0,0\n").unwrap();
    fs::write(dir.path().join("empty.csv"), "").unwrap();
    fs::write(dir.path().join("q3.csv"), "0,0,0\n").unwrap();
    assert_eq!(
        code(&kdebench(
            &["fit", "--data", "one.csv", "--gamma", "0.5", "--out", "m.json"],
            dir.path()
        )),
        0
    );
    let out = kdebench(
        &[
            "estimate",
            "--model",
            "m.json",
            "--queries",
            "empty.csv",
            "--out",
            "p.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read_to_string(dir.path().join("p.csv")).unwrap(),
        "density\n"
    );
    assert_eq!(
        code(&kdebench(
            &["estimate", "--model", "m.json", "--queries", "q3.csv"],
            dir.path()
        )),
        2
    );
    assert_eq!(
        code(&kdebench(
            &["estimate", "--model", "nope.json", "--queries", "one.csv"],
            dir.path()
        )),
        3
    );
    fs::write(dir.path().join("junk.json"), "{not json").unwrap();
    assert_eq!(
        code(&kdebench(
            &["estimate", "--model", "junk.json", "--queries", "one.csv"],
            dir.path()
        )),
        2
    );
}

#[test]
fn dmkde_model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(
        code(&kdebench(
            &[
                "generate",
                "--dataset",
                "mixture2d",
                "--n",
                "100",
                "--seed",
                "1",
                "--out",
                "train.csv"
            ],
            p
        )),
        0
    );
    assert_eq!(
        code(&kdebench(
            &[
                "generate",
                "--dataset",
                "mixture2d",
                "--n",
                "50",
                "--seed",
                "2",
                "--out",
                "q.csv"
            ],
            p
        )),
        0
    );
    for est in ["dmkde", "dmkde-lr", "tree-kd", "tree-ball", "naive"] {
        let out = kdebench(
            &[
                "fit",
                "--data",
                "train.csv",
                "--estimator",
                est,
                "--gamma",
                "1",
                "--rff-d",
                "100",
                "--out",
                "m.json",
            ],
            p,
        );
        assert_eq!(
            code(&out),
            0,
            "{est}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(
            code(&kdebench(
                &[
                    "estimate",
                    "--model",
                    "m.json",
                    "--queries",
                    "q.csv",
                    "--out",
                    "p.csv"
                ],
                p
            )),
            0
        );
        let model = Model::load(p.join("m.json")).unwrap();
        let queries = PointSet::load_csv(p.join("q.csv")).unwrap();
        let expected = model.estimate_batch(&queries).unwrap();
        let written: Vec<f64> = fs::read_to_string(p.join("p.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.parse().unwrap())
            .collect();
        assert_eq!(written.len(), expected.len());
        for (w, e) in written.iter().zip(&expected) {
            assert!(
                (w - e).abs() <= 1e-15 * e.abs().max(1e-300),
                "{est}: {w} vs {e}"
            );
        }
    }
}

#[test]
fn fit_cross_validates_without_bandwidth() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(
        code(&kdebench(
            &[
                "generate",
                "--dataset",
                "arc",
                "--n",
                "200",
                "--out",
                "train.csv"
            ],
            p
        )),
        0
    );
    let out = kdebench(
        &[
            "fit",
            "--data",
            "train.csv",
            "--estimator",
            "dmkde",
            "--out",
            "m.json",
        ],
        p,
    );
    assert_eq!(code(&out), 0);
    let model = Model::load(p.join("m.json")).unwrap();
    assert!([50, 100, 500, 1000].contains(&model.features().unwrap()));
}

#[test]
fn benchmark_single_cell() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = kdebench(
        &[
            "benchmark",
            "--dataset",
            "mixture2d",
            "--estimator",
            "raw",
            "--n",
            "100",
            "--test-n",
            "50",
            "--seed",
            "4",
            "--out",
            "rep",
            "--threads",
            "1",
        ],
        p,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(p.join("rep/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(
        fs::read_to_string(p.join("rep/report.jsonl"))
            .unwrap()
            .lines()
            .count(),
        1
    );
    let agg = fs::read_to_string(p.join("rep/aggregate.csv")).unwrap();
    assert!(agg.starts_with("dataset,estimator,n,mae_median,time_median\n"));
}

#[test]
fn benchmark_config_file_and_total_failure() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("cfg.json"),
        r#"{"datasets":["arc"],"estimators":[{"kind":"dmkde-lr","leaf_size":40,"atol":0,"rtol":0,"rank":{"fixed":5000}}],
            "sizes":[20],"test_size":10,"fixed_gamma":1.0,"fixed_features":16}"#,
    )
    .unwrap();
    let out = kdebench(&["benchmark", "--config", "cfg.json", "--out", "rep"], p);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    // Flags take precedence over the file.
    let out = kdebench(
        &[
            "benchmark",
            "--config",
            "cfg.json",
            "--rank",
            "auto",
            "--out",
            "rep",
        ],
        p,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn thread_env_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_kdebench"))
        .args(["generate", "--dataset", "arc", "--n", "5"])
        .env("KDEBENCH_THREADS", "lots")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_kdebench"))
        .args(["generate", "--dataset", "arc", "--n", "5"])
        .env("KDEBENCH_THREADS", "2")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
}
