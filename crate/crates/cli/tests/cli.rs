use std::path::Path;
use std::process::{Command, Output};

use nalgebra::DMatrix;
use num_complex::Complex64;

use pgnn_core::grid::{assemble_admittance, import_matpower};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgnn"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(
        o.status.success(),
        "pgnn {args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().unwrap()
}

/// Workspace with the 14-bus grid imported and a small c3 dataset.
fn workspace(n: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("case14.m"), pgnn_core::CASE14).unwrap();
    ok(dir.path(), &["import", "case14.m"]);
    ok(
        dir.path(),
        &["--seed", "1", "generate", "--grid", GRID, "--case", "c3", "--n", n],
    );
    dir
}

const GRID: &str = "out/grid/case14.json";
const DATA: &str = "out/data/c3-seed1.csv";

#[test]
fn import_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("case14.m"), pgnn_core::CASE14).unwrap();
    let s = ok(dir.path(), &["import", "case14.m"]);
    assert!(s.starts_with("imported 14 buses, 20 lines, 5 generators"), "{s}");
    assert!(dir.path().join(GRID).exists());
}

#[test]
fn missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(dir.path(), &["import", "nope.m"]), 2);
    assert_eq!(code(dir.path(), &["generate", "--case", "c1"]), 2);
}

#[test]
fn malformed_case_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.m"), "function mpc = bad\nmpc.bus = [1 2;\n").unwrap();
    assert_eq!(code(dir.path(), &["import", "bad.m"]), 3);
    std::fs::write(dir.path().join("cfg.json"), "{\"lr\": ").unwrap();
    assert_eq!(
        code(dir.path(), &["--config", "cfg.json", "kron", "--grid", "x.json"]),
        3
    );
}

#[test]
fn generate_is_reproducible_and_sized() {
    let a = workspace("2000");
    let b = workspace("2000");
    let (da, db) = (
        std::fs::read(a.path().join(DATA)).unwrap(),
        std::fs::read(b.path().join(DATA)).unwrap(),
    );
    assert_eq!(da, db);
    let rows = String::from_utf8(da).unwrap().lines().count();
    assert_eq!(rows, 2001);
    assert!(a.path().join("out/data/c3-seed1.meta.json").exists());

    let s = ok(
        a.path(),
        &[
            "--seed",
            "1",
            "generate",
            "--grid",
            GRID,
            "--case",
            "c6",
            "--n",
            "20",
            "--phase-shift",
            "20",
        ],
    );
    assert!(s.starts_with("generated 20 samples"), "{s}");
    ok(
        a.path(),
        &["--seed", "1", "generate", "--grid", GRID, "--case", "c1", "--n", "20"],
    );
    // c6 is c1 with every angle moved by the same amount.
    let read = |f: &str| std::fs::read_to_string(a.path().join("out/data").join(f)).unwrap();
    let (c1, c6) = (read("c1-seed1.csv"), read("c6-seed1.csv"));
    let header: Vec<&str> = c1.lines().next().unwrap().split(',').collect();
    let theta: Vec<usize> = (0..header.len()).filter(|&k| header[k].starts_with("theta")).collect();
    assert!(!theta.is_empty());
    for (r1, r6) in c1.lines().skip(1).zip(c6.lines().skip(1)) {
        let (f1, f6): (Vec<&str>, Vec<&str>) = (r1.split(',').collect(), r6.split(',').collect());
        for &k in &theta {
            let d = f6[k].parse::<f64>().unwrap() - f1[k].parse::<f64>().unwrap();
            assert!((d - 20f64.to_radians()).abs() < 1e-9, "{d}");
        }
    }
}

/// Dense Schur complement, counted with the same relative cut.
fn oracle_edges(observed: &[usize], threshold: f64) -> usize {
    let grid = import_matpower(pgnn_core::CASE14).unwrap();
    let y = assemble_admittance(&grid).unwrap();
    let m = y.matrix();
    let u: Vec<usize> = (0..14).filter(|k| !observed.contains(k)).collect();
    let blk = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |a, b| m[(r[a], c[b])]);
    let yr: DMatrix<Complex64> =
        blk(observed, observed) - blk(observed, &u) * blk(&u, &u).try_inverse().unwrap() * blk(&u, observed);
    let n = observed.len();
    let off: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| yr[(i, j)].norm())
        .collect();
    let largest = off.iter().cloned().fold(0.0, f64::max);
    off.iter().filter(|&&x| x > 0.0 && x >= threshold * largest).count()
}

#[test]
fn kron_edge_count_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("case14.m"), pgnn_core::CASE14).unwrap();
    ok(dir.path(), &["import", "case14.m"]);
    for thr in ["0.02", "0.2"] {
        let s = ok(
            dir.path(),
            &["kron", "--grid", GRID, "--obs", "generators", "--threshold", thr],
        );
        let expected = oracle_edges(&[0, 1, 2, 5, 7], thr.parse().unwrap());
        assert!(
            s.starts_with(&format!("reduced to 5 nodes, {expected} effective lines")),
            "{s}"
        );
    }
    // Bus 3 touches only buses 2 and 4, so the pair (1, 3) stays uncoupled.
    let s = ok(
        dir.path(),
        &["kron", "--grid", GRID, "--obs", "1,2,3,4", "--threshold", "0"],
    );
    assert_eq!(oracle_edges(&[0, 1, 2, 3], 0.0), 5);
    assert!(s.starts_with("reduced to 4 nodes, 5 effective lines"), "{s}");
}

#[test]
fn train_and_evaluate() {
    let dir = workspace("200");
    let s = ok(
        dir.path(),
        &[
            "train", "--model", "pgnn", "--grid", GRID, "--data", DATA, "--epochs", "3000", "--no-net",
        ],
    );
    let val: f64 = s
        .split("validation_mismatch=")
        .nth(1)
        .unwrap()
        .split(' ')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(val < 1e-2, "{s}");
    let run_dir = s.split("dir=").nth(1).unwrap().trim();
    for f in [
        "config.json",
        "checkpoint.json",
        "report.json",
        "trace.csv",
        "metrics.json",
    ] {
        assert!(dir.path().join(run_dir).join(f).exists(), "{f}");
    }
    let ckpt = format!("{run_dir}/checkpoint.json");
    let e = ok(
        dir.path(),
        &["evaluate", "--model", &ckpt, "--data", DATA, "--split", "validation"],
    );
    assert!(e.starts_with("mismatch=") && e.contains("samples=160 nodes=14"), "{e}");
}

#[test]
fn vanilla_fails_under_phase_shift() {
    let dir = workspace("10");
    for case in ["c1", "c6"] {
        ok(
            dir.path(),
            &["--seed", "2", "generate", "--grid", GRID, "--case", case, "--n", "400"],
        );
    }
    let s = ok(
        dir.path(),
        &[
            "train",
            "--model",
            "vanilla",
            "--grid",
            GRID,
            "--data",
            "out/data/c1-seed2.csv",
            "--epochs",
            "4000",
        ],
    );
    let ckpt = format!("{}/checkpoint.json", s.split("dir=").nth(1).unwrap().trim());
    let m = |data: &str| -> f64 {
        let e = ok(dir.path(), &["evaluate", "--model", &ckpt, "--data", data]);
        e.split("mismatch=")
            .nth(1)
            .unwrap()
            .split(' ')
            .next()
            .unwrap()
            .parse()
            .unwrap()
    };
    let (c1, c6) = (m("out/data/c1-seed2.csv"), m("out/data/c6-seed2.csv"));
    assert!(c6 > 100.0 * c1, "c1 {c1:e} c6 {c6:e}");
}

#[test]
fn divergence_exits_5() {
    let dir = workspace("50");
    let args = [
        "train", "--model", "pgnn", "--grid", GRID, "--data", DATA, "--epochs", "200", "--lr", "1e4",
    ];
    assert_eq!(code(dir.path(), &args), 5);
}

#[test]
fn flags_override_config_file() {
    let dir = workspace("50");
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"grid": "out/grid/case14.json", "obs": "generators", "threshold": 0.9}"#,
    )
    .unwrap();
    let from_file = ok(dir.path(), &["--config", "cfg.json", "kron"]);
    let overridden = ok(dir.path(), &["--config", "cfg.json", "kron", "--threshold", "0.02"]);
    assert!(from_file.contains("reduced-generators-0.9.json"), "{from_file}");
    assert!(overridden.contains("reduced-generators-0.02.json"), "{overridden}");
    std::fs::write(dir.path().join("bad.json"), r#"{"bogus": 1}"#).unwrap();
    assert_eq!(code(dir.path(), &["--config", "bad.json", "kron"]), 3);
}
