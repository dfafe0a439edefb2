use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gee_core::linalg::Matrix;
use gee_core::model::{conditional_moments, Cluster, Dataset, Link};
use gee::io::{write_dataset, write_file, DatasetMeta};

fn gee(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gee"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read_dir_sorted(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (PathBuf::from(p.file_name().unwrap()), bytes)
        })
        .collect();
    v.sort();
    v
}

fn small_scenario(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        "estimators = [\"independence\", \"pseudo\"]\n\
         [scenario]\nn = 120\nlink = \"log\"\nbeta0 = [0.3, -0.2]\n\
         [study]\nn_grid = [40, 120]\nreps = 6\n\
         [diagnostics]\nr_grid = [0.2]\n",
    )
    .unwrap();
    path
}

#[test]
fn print_defaults_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let o = gee(&["--print-defaults"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let back = gee::run::RunFile::from_toml(&text, Path::new("stdout")).unwrap();
    assert_eq!(back, gee::run::RunFile::default());
}

#[test]
fn every_command_is_deterministic_and_jobs_independent() {
    let dir = tempfile::tempdir().unwrap();
    let scen = small_scenario(dir.path());
    let scen = scen.to_str().unwrap();
    for cmd in ["simulate", "fit", "diagnose", "study-consistency", "study-optimality"] {
        let mut outs = Vec::new();
        for (k, jobs) in ["1", "1", "3"].iter().enumerate() {
            let out = format!("{cmd}-{k}");
            let o = gee(&[cmd, "--scenario", scen, "--seed", "11", "--out", &out, "--jobs", jobs], dir.path());
            assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
            outs.push(read_dir_sorted(&dir.path().join(&out)));
        }
        assert!(!outs[0].is_empty());
        assert_eq!(outs[0], outs[1], "{cmd} repeated");
        assert_eq!(outs[0], outs[2], "{cmd} with other --jobs");
    }
}

#[test]
fn outputs_embed_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let scen = small_scenario(dir.path());
    let o = gee(&["study-optimality", "--scenario", scen.to_str().unwrap(), "--seed", "77", "--out", "o"], dir.path());
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(dir.path().join("o/optimality.csv")).unwrap();
    assert!(csv.contains("# seed = 77"));
    assert!(csv.contains("# rng = chacha20-stream-v1"));
    // the commented config block is itself a valid scenario file
    let block: String = csv
        .lines()
        .skip_while(|l| !l.contains("resolved config"))
        .skip(1)
        .take_while(|l| l.starts_with('#'))
        .map(|l| format!("{}\n", l.trim_start_matches('#').trim_start()))
        .collect();
    let run = gee::run::RunFile::from_toml(&block, Path::new("embedded")).unwrap();
    assert_eq!(run.scenario.seed, 77);
    assert_eq!(run.scenario.n, 120);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/optimality.json")).unwrap()).unwrap();
    assert_eq!(json["provenance"]["seed"], 77);
    assert_eq!(json["provenance"]["config"]["scenario"]["n"], 120);
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["fit", "--scenario", "missing.toml"],
        vec!["fit", "--n-grid", "10,5"],
        vec!["fit", "--estimator", "nonsense"],
        vec!["fit", "--reps", "0"],
        vec!["diagnose", "--delta", "0.9"],
        vec!["study-consistency", "--jobs", "0", "--reps", "1", "--n-grid", "10"],
        vec!["fit", "--data", "absent.csv"],
        vec!["no-such-command"],
        vec![],
    ];
    for args in cases {
        let o = gee(&args, dir.path());
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    fs::write(dir.path().join("bad.toml"), "[scenario]\nn = 10\nrho = 3\n").unwrap();
    let o = gee(&["simulate", "--scenario", "bad.toml"], dir.path());
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml:3"), "{err}");
    fs::write(dir.path().join("neg.toml"), "[scenario.truth]\nkind = \"ar1\"\nrho = 1.5\n").unwrap();
    let o = gee(&["simulate", "--scenario", "neg.toml"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("truth.rho"));
}

#[test]
fn non_convergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("hard.toml"),
        "estimators = [\"exchangeable:0.3\"]\n\
         [scenario]\nn = 60\nlink = \"log\"\nbeta0 = [2.0, 1.0]\nfamily = \"poisson_log\"\n\
         [solver]\nmax_iter = 1\njacobian_method = \"finite_difference\"\n",
    )
    .unwrap();
    let o = gee(&["fit", "--scenario", "hard.toml", "--out", "o"], dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("o/fit.json").exists());
    let o = gee(&["study-consistency", "--scenario", "hard.toml", "--reps", "3", "--n-grid", "30,60", "--out", "s"], dir.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn partial_failures_are_reported_with_exit_0() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("mixed.toml"),
        "estimators = [\"independence\", \"pseudo\"]\n\
         [scenario]\nn = 60\n\
         [solver]\nmax_iter = 1\n",
    )
    .unwrap();
    let o = gee(&["study-consistency", "--scenario", "mixed.toml", "--reps", "3", "--n-grid", "30,60", "--out", "s"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s/consistency.json")).unwrap()).unwrap();
    let failures = json["failures"].as_array().unwrap();
    assert!(!failures.is_empty());
    assert!(failures.iter().all(|f| f["estimator"] == "pseudo"));
}

#[test]
fn fit_recovers_exact_root() {
    let dir = tempfile::tempdir().unwrap();
    let beta = [0.4, -0.7, 0.25];
    let clusters: Vec<Cluster> = (1..=30)
        .map(|i| {
            let m = 1 + i % 3;
            let x = Matrix::from_fn(m, 3, |j, k| match k {
                0 => 1.0,
                1 => ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5,
                _ => ((i * 5 + j) % 13) as f64 / 13.0,
            });
            let c = Cluster::new(i, vec![0.0; m], x).unwrap();
            let mu = conditional_moments(&c, &beta, Link::Log).unwrap().mean;
            Cluster::new(i, mu, c.regressors).unwrap()
        })
        .collect();
    let data = Dataset::new(clusters, 3, 3).unwrap();
    let csv = dir.path().join("exact.csv");
    write_dataset(&csv, &data, &["exact-root fixture".into()]).unwrap();
    let meta = DatasetMeta { n: 30, p: 3, m_max: 3, link: Link::Log, beta0: Some(beta.to_vec()) };
    write_file(&dir.path().join("exact.json"), serde_json::to_string(&meta).unwrap().as_bytes()).unwrap();
    let o = gee(
        &["fit", "--data", "exact.csv", "--estimator", "independence", "--estimator", "ar1:0.3", "--estimator", "pseudo", "--out", "o"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/fit.json")).unwrap()).unwrap();
    for f in json["fits"].as_array().unwrap() {
        assert_eq!(f["converged"], true, "{f}");
        for (got, want) in f["beta_hat"].as_array().unwrap().iter().zip(beta) {
            assert!((got.as_f64().unwrap() - want).abs() < 1e-8, "{f}");
        }
    }
    // truth-based estimators need a simulated scenario
    let o = gee(&["fit", "--data", "exact.csv", "--estimator", "truth"], dir.path());
    assert_eq!(code(&o), 2);
    let o = gee(&["diagnose", "--data", "exact.csv", "--n-grid", "10,30", "--out", "d"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn truth_spec_ratios_are_one() {
    let dir = tempfile::tempdir().unwrap();
    let scen = small_scenario(dir.path());
    let o = gee(
        &["study-optimality", "--scenario", scen.to_str().unwrap(), "--estimator", "truth", "--out", "o"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(dir.path().join("o/optimality.csv")).unwrap();
    let mut rows = 0;
    for line in csv.lines().filter(|l| !l.starts_with('#')).skip(1) {
        for v in line.split(',').skip(2) {
            assert!((v.parse::<f64>().unwrap() - 1.0).abs() < 1e-10, "{line}");
        }
        rows += 1;
    }
    assert_eq!(rows, 2);
}

#[test]
fn simulated_dataset_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let scen = small_scenario(dir.path());
    let o = gee(&["simulate", "--scenario", scen.to_str().unwrap(), "--out", "o"], dir.path());
    assert_eq!(code(&o), 0);
    let meta = gee::io::read_meta(&dir.path().join("o/dataset.json")).unwrap();
    let data = gee::io::read_dataset(&dir.path().join("o/dataset.csv"), &meta).unwrap();
    let run = gee::run::RunFile::load(&scen).unwrap();
    assert_eq!(data, gee_core::simulation::simulate_scenario(&run.scenario).unwrap());
}
