//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pgnn_core::datagen::{generate, split_set, CaseId, SampleSet, ScenarioConfig};
use pgnn_core::diffkit::{central_difference, relative_error};
use pgnn_core::estimators::{
    pgnn_loss, train_pgnn, train_vanilla, InjectionModel, ModelKind, NetConfig, Observations, PgnnData, PowerGnn,
    Topology, TrainConfig, VanillaNet,
};
use pgnn_core::grid::{assemble_admittance, import_matpower, AdmittanceMatrix, BusKind, GridCase};
use pgnn_core::kron::{
    effective_injections, extract_reduced_graph, kron_reduce, solve_voltages, KronBlocks, ObservabilityMask,
    DEFAULT_THRESHOLD,
};
use pgnn_core::metrics::{line_param_compare, mismatch, recon_error_curve, reg_sweep, ReconCurveConfig, Table1};
use pgnn_core::powerflow::{inverse_pf, solve_pf, PfProblem, PfSolveOptions, PowerState, VoltageState};

const DATA_SEED: u64 = 7;

fn report(id: u32, pass: bool, detail: String) {
    // Written to the stream directly so the line shows up without `--nocapture`.
    let line = format!("criterion {id}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().write_all(line.as_bytes());
}

fn case14() -> GridCase {
    import_matpower(pgnn_core::CASE14).unwrap()
}

fn dataset(case: CaseId, noise: Option<f64>, seed: u64) -> SampleSet {
    let mut sc = ScenarioConfig::new(case, seed);
    if let Some(f) = noise {
        sc.noise_frac = f;
    }
    generate(&case14(), &sc).unwrap()
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

#[test]
fn criterion_1_power_flow_round_trip() {
    let t = Instant::now();
    let grid = case14();
    let y = assemble_admittance(&grid).unwrap();
    let kinds: Vec<BusKind> = grid.buses.iter().map(|b| b.kind).collect();
    let slack = grid.slack_index().unwrap();
    let set = generate(
        &grid,
        &ScenarioConfig {
            n_samples: 100,
            ..ScenarioConfig::new(CaseId::C3, 11)
        },
    )
    .unwrap();
    let (mut worst, mut iters) = (0.0f64, 0usize);
    for s in &set.samples {
        let problem = PfProblem {
            kinds: kinds.clone(),
            p: s.power.p.clone(),
            q: s.power.q.clone(),
            v: s.state.v.clone(),
            slack_angle: s.state.theta[slack],
        };
        let sol = solve_pf(&y, &problem, &PfSolveOptions::default(), None).unwrap();
        iters = iters.max(sol.iterations);
        let back = inverse_pf(&y, &sol.state).unwrap();
        for i in 0..kinds.len() {
            if kinds[i] != BusKind::Slack {
                worst = worst.max((back.p[i] - problem.p[i]).abs());
            }
            if kinds[i] == BusKind::Pq {
                worst = worst.max((back.q[i] - problem.q[i]).abs());
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst < 1e-7 && iters <= 15 && secs < 5.0;
    report(
        1,
        pass,
        format!("max |dS| {worst:.2e} p.u., max Newton iterations {iters}, {secs:.2} s"),
    );
    assert!(pass);
}

/// Random connected network: spanning tree plus extra lines, shunts at every node.
fn random_network(rng: &mut ChaCha8Rng) -> AdmittanceMatrix {
    let n = rng.gen_range(4..=12);
    let mut y = AdmittanceMatrix::zeros(n);
    let series = |y: &mut AdmittanceMatrix, i: usize, j: usize, rng: &mut ChaCha8Rng| {
        let z = c(rng.gen_range(0.005..0.2), rng.gen_range(0.02..0.6));
        y.stamp_series(i, j, z.inv());
    };
    for k in 1..n {
        let parent = rng.gen_range(0..k);
        series(&mut y, parent, k, rng);
    }
    for _ in 0..rng.gen_range(0..n) {
        let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if i != j {
            series(&mut y, i, j, rng);
        }
    }
    for i in 0..n {
        y.stamp_shunt(i, c(rng.gen_range(0.0..0.05), rng.gen_range(-0.05..0.2)));
    }
    y
}

fn random_mask(n: usize, rng: &mut ChaCha8Rng) -> ObservabilityMask {
    let k = rng.gen_range(1..n);
    let mut obs: Vec<usize> = rand::seq::index::sample(rng, n, k).into_vec();
    obs.sort_unstable();
    ObservabilityMask::new(obs, n).unwrap()
}

/// Independent oracle: dense complex inverse of the interior block.
fn schur_oracle(y: &AdmittanceMatrix, mask: &ObservabilityMask) -> DMatrix<Complex64> {
    let (o, u) = (mask.observed(), mask.unobserved());
    let m = y.matrix();
    let blk = |r: &[usize], cc: &[usize]| DMatrix::from_fn(r.len(), cc.len(), |a, b| m[(r[a], cc[b])]);
    let yuu_inv = blk(&u, &u).try_inverse().unwrap();
    blk(o, o) - blk(o, &u) * yuu_inv * blk(&u, o)
}

fn max_abs(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[test]
fn criterion_2_kron_identities() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut e_ohm, mut e_split, mut e_seq, mut e_oracle) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let y = random_network(&mut rng);
        let n = y.dim();
        let mask = random_mask(n, &mut rng);
        let (o, u) = (mask.observed().to_vec(), mask.unobserved());
        let currents: Vec<Complex64> = (0..n)
            .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let v = solve_voltages(&y, &currents).unwrap();

        // I_r = Y_r V_o with I_r = I_o − Y_ou Y_uu⁻¹ I_u.
        let blocks = KronBlocks::new(&y, &mask).unwrap();
        let y_r = blocks.reduced();
        let i_u: Vec<Complex64> = u.iter().map(|&k| currents[k]).collect();
        let carried = blocks.transferred_current(&i_u);
        let v_o: Vec<Complex64> = o.iter().map(|&k| v[k]).collect();
        let lhs = y_r.apply(&v_o);
        for (k, &i) in o.iter().enumerate() {
            e_ohm = e_ohm.max((currents[i] - carried[k] - lhs[k]).norm());
        }
        e_oracle = e_oracle.max(max_abs(&(y_r.matrix() - schur_oracle(&y, &mask))));

        // Observed powers split into reduced and carried terms.
        let state = VoltageState {
            v: v.iter().map(|z| z.norm()).collect(),
            theta: v.iter().map(|z| z.arg()).collect(),
        };
        let split = effective_injections(&y, &state, &currents, &mask).unwrap();
        for (t, m) in split.total().iter().zip(&split.measured) {
            e_split = e_split.max((t - m).norm());
        }

        // Eliminate one interior node first, then the rest.
        if u.len() >= 2 {
            let first = u[rng.gen_range(0..u.len())];
            let keep: Vec<usize> = (0..n).filter(|&k| k != first).collect();
            let step1 = kron_reduce(&y, &ObservabilityMask::new(keep.clone(), n).unwrap()).unwrap();
            let pos: Vec<usize> = o.iter().map(|i| keep.binary_search(i).unwrap()).collect();
            let step2 = kron_reduce(&step1, &ObservabilityMask::new(pos, keep.len()).unwrap()).unwrap();
            e_seq = e_seq.max(max_abs(&(step2.matrix() - y_r.matrix())));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let worst = e_ohm.max(e_split).max(e_seq).max(e_oracle);
    let pass = worst < 1e-10 && secs < 10.0;
    report(
        2,
        pass,
        format!(
            "200 grids: reduced Ohm {e_ohm:.1e}, power split {e_split:.1e}, sequential {e_seq:.1e}, oracle {e_oracle:.1e}, {secs:.2} s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_gradient_suite() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut y = AdmittanceMatrix::zeros(6);
    for (i, j) in [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)] {
        y.stamp_series(i, j, c(rng.gen_range(0.01..0.1), rng.gen_range(0.05..0.3)).inv());
    }
    let topo = Topology::new(6, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]).unwrap();
    let mut obs = Observations {
        n_nodes: 6,
        v: vec![],
        theta: vec![],
        p: vec![],
        q: vec![],
    };
    for _ in 0..8 {
        let s = VoltageState {
            v: (0..6).map(|_| rng.gen_range(0.95..1.05)).collect(),
            theta: (0..6).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        };
        let pw: PowerState = inverse_pf(&y, &s).unwrap();
        obs.v.extend(&s.v);
        obs.theta.extend(&s.theta);
        obs.p.extend(pw.p.iter().map(|p| p + rng.gen_range(-0.05..0.05)));
        obs.q.extend(pw.q.iter().map(|q| q + rng.gen_range(-0.05..0.05)));
    }
    let data = PgnnData::new(&topo, &obs).unwrap();
    let cfg = TrainConfig {
        net: Some(NetConfig {
            width: 3,
            hidden: 2,
            ..NetConfig::default()
        }),
        ..TrainConfig::default()
    };
    let mut worst = 0.0f64;
    for point in 0..10 {
        let mut model = PowerGnn::new(
            &topo,
            &TrainConfig {
                seed: point,
                ..cfg.clone()
            },
        );
        let mut x = model.params().values;
        for v in x.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let m = topo.edges().len();
        for k in 0..m {
            x[k] = rng.gen_range(0.02..0.2);
            x[m + k] = rng.gen_range(0.1..0.6);
        }
        model.set_params(&x).unwrap();
        let (_, grad) = pgnn_loss(&model, &data, 1e-3).unwrap();
        let mut probe = model.clone();
        let fd = central_difference(
            |p| {
                probe.set_params(p).unwrap();
                pgnn_loss(&probe, &data, 1e-3).unwrap().0.loss
            },
            &x,
            1e-5,
        );
        worst = worst.max(relative_error(&grad, &fd));
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst < 1e-5 && secs < 30.0;
    report(
        3,
        pass,
        format!("10 points, 6-bus: worst relative error {worst:.2e}, {secs:.2} s"),
    );
    assert!(pass);
}

struct FullRuns {
    table: Table1,
    pgnn_c1: PowerGnn,
    vanilla_c1: VanillaNet,
    vanilla_success: bool,
    c1_val: Observations,
    c6_all: Observations,
    secs: f64,
}

fn full_runs() -> &'static FullRuns {
    static RUNS: OnceLock<FullRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t = Instant::now();
        let grid = case14();
        let mask = ObservabilityMask::full(14);
        let topo = Topology::from_grid(&grid);
        let cases = [CaseId::C1, CaseId::C2, CaseId::C3, CaseId::C4, CaseId::C5, CaseId::C6];
        let mut table = Table1::new(cases.iter().map(|c| c.to_string()).collect());
        let mut pgnn_c1 = None;
        let mut vanilla_c1 = None;
        let mut vanilla_success = false;
        let mut c1_val = None;
        let pcfg = TrainConfig::desk_defaults(ModelKind::Pgnn, true);
        let vcfg = TrainConfig::desk_defaults(ModelKind::Vanilla, true);
        for case in &cases[..5] {
            let set = dataset(*case, None, DATA_SEED);
            let (tr, va) = split_set(&set, 0.2, true).unwrap();
            let (otr, ova) = (Observations::from_set(&tr, &mask), Observations::from_set(&va, &mask));
            let (m, _) = train_pgnn(&topo, &otr, &pcfg).unwrap();
            table.set(
                "power-gnn",
                &case.to_string(),
                mismatch(&m, &otr).unwrap().value,
                mismatch(&m, &ova).unwrap().value,
            );
            if matches!(case, CaseId::C1 | CaseId::C4) {
                let (v, rep) = train_vanilla(&otr, &vcfg).unwrap();
                table.set(
                    "vanilla",
                    &case.to_string(),
                    mismatch(&v, &otr).unwrap().value,
                    mismatch(&v, &ova).unwrap().value,
                );
                if *case == CaseId::C1 {
                    vanilla_success = rep.success == Some(true);
                    vanilla_c1 = Some(v);
                }
            }
            if *case == CaseId::C1 {
                pgnn_c1 = Some(m);
                c1_val = Some(ova);
            }
        }
        let c6 = dataset(CaseId::C6, None, DATA_SEED);
        let c6_all = Observations::from_set(&c6, &mask);
        let (pgnn_c1, vanilla_c1) = (pgnn_c1.unwrap(), vanilla_c1.unwrap());
        table.set("power-gnn", "c6", f64::NAN, mismatch(&pgnn_c1, &c6_all).unwrap().value);
        table.set("vanilla", "c6", f64::NAN, mismatch(&vanilla_c1, &c6_all).unwrap().value);
        FullRuns {
            table,
            pgnn_c1,
            vanilla_c1,
            vanilla_success,
            c1_val: c1_val.unwrap(),
            c6_all,
            secs: t.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_4_full_observability_table() {
    let r = full_runs();
    let val = |m: &str, c: &str| r.table.get(m, c).map(|x| x.1).unwrap_or(f64::NAN);
    let pg: Vec<f64> = ["c1", "c2", "c3", "c4", "c5"]
        .iter()
        .map(|c| val("power-gnn", c))
        .collect();
    let pg_ok = pg.iter().all(|&v| v < 1e-4);
    let (v1_train, v1) = r.table.get("vanilla", "c1").unwrap();
    let v4 = val("vanilla", "c4");
    let ratio = v4 / v1;
    let pass = pg_ok && r.vanilla_success && v1_train <= 1e-4 && ratio >= 10.0 && r.secs < 1800.0;
    let dir = std::env::temp_dir().join("pgnn-acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("table1.csv"), r.table.validation_csv()).unwrap();
    std::fs::write(dir.join("table1_train.csv"), r.table.train_csv()).unwrap();
    let pg_str: Vec<String> = pg.iter().map(|v| format!("{v:.1e}")).collect();
    report(
        4,
        pass,
        format!(
            "power-gnn validation c1..c5 [{}]; vanilla c1 train {v1_train:.1e}, validation c1 {v1:.1e}, c4 {v4:.1e} ({ratio:.0}x); {:.0} s",
            pg_str.join(", "),
            r.secs
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_phase_shift() {
    let r = full_runs();
    let base = &r.c1_val;
    let shifted = base.phase_shifted(20f64.to_radians());
    let a = r.pgnn_c1.predict(base).unwrap();
    let b = r.pgnn_c1.predict(&shifted).unwrap();
    let change =
        a.p.iter()
            .zip(&b.p)
            .chain(a.q.iter().zip(&b.q))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
    let v1 = mismatch(&r.vanilla_c1, base).unwrap().value;
    let v6 = mismatch(&r.vanilla_c1, &r.c6_all).unwrap().value;
    let pass = change < 1e-8 && v6 >= 100.0 * v1;
    report(
        5,
        pass,
        format!(
            "power-gnn max change under 20 deg shift {change:.1e}; vanilla c1 {v1:.1e} vs c6 {v6:.1e} ({:.0}x)",
            v6 / v1
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_reconstruction_curve() {
    let t = Instant::now();
    let grid = case14();
    let y = assemble_admittance(&grid).unwrap();
    let set = dataset(CaseId::C3, Some(0.03), DATA_SEED);
    let pool = Observations::from_set(&set, &ObservabilityMask::full(14));
    let mut cfg = ReconCurveConfig::desk(0);
    cfg.sample_counts = vec![10, 40, 100];
    let curve = recon_error_curve(&Topology::from_grid(&grid), &pool, &y, &cfg).unwrap();
    let (c10, c100) = (&curve[0], &curve[2]);
    let pass = curve.iter().all(|c| c.completed == cfg.realizations)
        && c100.mean < 0.05
        && c100.mean <= c10.mean
        && c100.spread() <= c10.spread();
    let rows: Vec<String> = curve
        .iter()
        .map(|c| format!("N={} min {:.3} mean {:.3} max {:.3}", c.n_samples, c.min, c.mean, c.max))
        .collect();
    report(
        6,
        pass,
        format!("{}; {:.0} s", rows.join("; "), t.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

fn partial_setup(seed_offset: u64) -> (pgnn_core::kron::ReducedModel, Observations) {
    let grid = case14();
    let y = assemble_admittance(&grid).unwrap();
    let mask = ObservabilityMask::generators(&grid).unwrap();
    let reference = extract_reduced_graph(&kron_reduce(&y, &mask).unwrap(), DEFAULT_THRESHOLD);
    let set = dataset(CaseId::C3, Some(0.03), DATA_SEED + seed_offset);
    let (tr, _) = split_set(&set, 0.2, true).unwrap();
    (reference, Observations::from_set(&tr, &mask))
}

#[test]
fn criterion_7_partial_observability_lines() {
    let t = Instant::now();
    let (reference, train) = partial_setup(0);
    let cfg = TrainConfig {
        reg_coeff: 1e-4,
        ..TrainConfig::desk_defaults(ModelKind::Pgnn, false)
    };
    let (m, _) = train_pgnn(&Topology::from_reduced(&reference), &train, &cfg).unwrap();
    let cmp = line_param_compare(&m.phys, &reference);
    let frac = cmp.physical_fraction();
    let corr = cmp.susceptance_correlation();
    let below = cmp.violations_below_median();
    let pass = frac >= 0.8 && corr > 0.9 && below && cmp.only_ref.is_empty();
    let flagged: Vec<String> = cmp
        .violations()
        .iter()
        .map(|r| format!("({},{}) |Y| {:.2}", r.i, r.j, r.y_ref_abs))
        .collect();
    report(
        7,
        pass,
        format!(
            "{} lines, physical {:.0}%, b correlation {corr:.3}, flagged [{}] vs median |Y| {:.2}; {:.0} s",
            cmp.rows.len(),
            100.0 * frac,
            flagged.join(", "),
            cmp.median_abs_ref(),
            t.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_regularization_sweep() {
    let t = Instant::now();
    let alphas = [0.0, 1e-6, 1e-4, 1e-2, 1.0];
    let mut lines = Vec::new();
    let mut all = true;
    for seed in 0..3u64 {
        let (reference, train) = partial_setup(seed);
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::desk_defaults(ModelKind::Pgnn, false)
        };
        let sweep = reg_sweep(&reference, &train, &alphas, &cfg).unwrap();
        let q: Vec<String> = sweep
            .points
            .iter()
            .map(|p| p.quality.map_or("failed".into(), |q| format!("{q:.3}")))
            .collect();
        let interior = sweep.has_interior_min();
        all &= interior;
        lines.push(format!(
            "seed {seed}: [{}] argmin {:e}{}",
            q.join(" "),
            sweep.argmin().unwrap_or(f64::NAN),
            if interior { "" } else { " (boundary)" }
        ));
    }
    report(
        8,
        all,
        format!("{}; {:.0} s", lines.join("; "), t.elapsed().as_secs_f64()),
    );
    assert!(all);
}

fn pgnn(root: &Path, args: &[&str]) -> String {
    let o = Command::new(env!("CARGO_BIN_EXE_pgnn"))
        .current_dir(root)
        .args(args)
        .output()
        .unwrap();
    assert!(
        o.status.success(),
        "pgnn {args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn snapshot(dir: &Path, into: &mut BTreeMap<String, Vec<u8>>, root: &Path) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            snapshot(&p, into, root);
        } else {
            into.insert(
                p.strip_prefix(root).unwrap().display().to_string(),
                std::fs::read(&p).unwrap(),
            );
        }
    }
}

/// Every subcommand, run with paths relative to `root`.
fn pipeline(root: &Path) -> (BTreeMap<String, Vec<u8>>, Vec<String>) {
    std::fs::write(root.join("case14.m"), pgnn_core::CASE14).unwrap();
    let (g, d) = ("out/grid/case14.json", "out/data/c3-seed5.csv");
    let steps: Vec<Vec<&str>> = vec![
        vec!["import", "case14.m"],
        vec!["--seed", "5", "generate", "--grid", g, "--case", "c3", "--n", "120"],
        vec!["kron", "--grid", g, "--obs", "generators", "--threshold", "0.02"],
        vec![
            "--seed", "3", "train", "--model", "pgnn", "--grid", g, "--data", d, "--epochs", "200",
        ],
        vec![
            "--seed", "3", "train", "--model", "vanilla", "--grid", g, "--data", d, "--epochs", "200",
        ],
        vec![
            "--seed",
            "3",
            "train",
            "--model",
            "pgnn",
            "--grid",
            g,
            "--data",
            d,
            "--obs",
            "generators",
            "--epochs",
            "100",
        ],
        vec![
            "sweep-reg",
            "--grid",
            g,
            "--data",
            d,
            "--alphas",
            "0,1e-3",
            "--epochs",
            "60",
        ],
        vec![
            "recon-curve",
            "--grid",
            g,
            "--data",
            d,
            "--ns",
            "10,20",
            "--realizations",
            "3",
            "--epochs",
            "60",
        ],
    ];
    let mut stdout: Vec<String> = steps.iter().map(|s| pgnn(root, s)).collect();
    let out = root.join("out");
    let mut files = BTreeMap::new();
    snapshot(&out, &mut files, &out);
    let ckpt = files.keys().find(|k| k.ends_with("checkpoint.json")).unwrap().clone();
    let ckpt = format!("out/{ckpt}");
    stdout.push(pgnn(root, &["evaluate", "--model", &ckpt, "--data", d]));
    (files, stdout)
}

#[test]
fn criterion_9_determinism() {
    let t = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, sa) = pipeline(a.path());
    let (fb, sb) = pipeline(b.path());
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let pass = fa.len() == fb.len() && differing.is_empty() && sa == sb && fa.len() >= 20;
    report(
        9,
        pass,
        format!(
            "{} artifacts from 9 commands byte-identical across reruns{}; {:.0} s",
            fa.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(", differing {differing:?}")
            },
            t.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}
