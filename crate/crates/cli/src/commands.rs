use std::path::{Path, PathBuf};

use serde::Serialize;

use pgnn_core::datagen::{
    generate as generate_set, split_set, write_csv, CaseId, DatasetMeta, SampleSet, ScenarioConfig,
};
use pgnn_core::estimators::{
    train_pgnn, train_pgnn_pruned, train_vanilla, Checkpoint, LoadedModel, ModelKind, NetConfig, Observations,
    Topology, TrainConfig, TrainReport,
};
use pgnn_core::grid::{assemble_admittance, export_grid, import_matpower, load_grid, GridCase};
use pgnn_core::kron::{extract_reduced_graph, kron_reduce, ObservabilityMask, ReducedModel, DEFAULT_THRESHOLD};
use pgnn_core::metrics::{
    fig2_csv, fig2_gp, fig3_csv, fig3_gp, fig4_csv, fig4_gp, line_param_compare, mismatch, recon_error_curve,
    reg_sweep, relative_frobenius, ReconCurveConfig, ReconNormalization, Table1,
};

use crate::config::{read, to_json, write, RunConfig};
use crate::error::CliError;

const DEFAULT_TRAIN_FRAC: f64 = 0.2;
const DEFAULT_ALPHAS: [f64; 5] = [0.0, 1e-6, 1e-4, 1e-2, 1.0];

fn load_grid_file(path: &Path) -> Result<GridCase, CliError> {
    let text = read(path)?;
    load_grid(&text).map_err(|e| CliError::grid(path, e))
}

/// Sidecar holding the dataset metadata: `name.csv` → `name.meta.json`.
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

fn load_data(path: &Path) -> Result<SampleSet, CliError> {
    let csv = read(path)?;
    let meta_file = meta_path(path);
    let meta: DatasetMeta = serde_json::from_str(&read(&meta_file)?).map_err(|e| CliError::parse(&meta_file, e))?;
    SampleSet::from_parts(&csv, meta).map_err(|e| CliError::data(path, e))
}

fn parse_obs(spec: &str, grid: &GridCase) -> Result<ObservabilityMask, CliError> {
    match spec {
        "full" => Ok(ObservabilityMask::full(grid.n_buses())),
        "generators" | "gen" => Ok(ObservabilityMask::generators(grid)?),
        list => {
            let ids = list
                .split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Other(format!("bad observability spec `{list}`: {e}")))?;
            Ok(ObservabilityMask::from_ids(grid, &ids)?)
        }
    }
}

fn check_buses(grid: &GridCase, set: &SampleSet) -> Result<(), CliError> {
    if set.n_buses() != grid.n_buses() {
        return Err(CliError::Other(format!(
            "dataset has {} buses but the grid has {}",
            set.n_buses(),
            grid.n_buses()
        )));
    }
    Ok(())
}

fn reduced_reference(grid: &GridCase, mask: &ObservabilityMask, threshold: f64) -> Result<ReducedModel, CliError> {
    let y = assemble_admittance(grid).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(extract_reduced_graph(&kron_reduce(&y, mask)?, threshold))
}

pub fn import(case: &Path, output: Option<PathBuf>, out: &Path) -> Result<String, CliError> {
    let text = read(case)?;
    let grid = import_matpower(&text).map_err(|e| CliError::grid(case, e))?;
    let stem = case
        .file_stem()
        .map_or("grid".into(), |s| s.to_string_lossy().into_owned());
    let path = output.unwrap_or_else(|| out.join("grid").join(format!("{stem}.json")));
    write(&path, &export_grid(&grid))?;
    Ok(format!(
        "imported {} buses, {} lines, {} generators -> {}",
        grid.buses.len(),
        grid.lines.len(),
        grid.generators.len(),
        path.display()
    ))
}

pub fn generate(c: &RunConfig, output: Option<PathBuf>, out: &Path) -> Result<String, CliError> {
    let grid = load_grid_file(c.grid()?)?;
    let case: CaseId = c.case.as_deref().unwrap_or("c1").parse().map_err(CliError::Other)?;
    let mut sc = ScenarioConfig::new(case, c.seed());
    if let Some(n) = c.n {
        sc.n_samples = n;
    }
    if let Some(d) = c.phase_shift {
        sc.phase_shift_deg = d;
    }
    if let Some(f) = c.noise {
        sc.noise_frac = f;
    }
    let set = generate_set(&grid, &sc).map_err(|e| CliError::data(c.grid().unwrap(), e))?;
    let path = output.unwrap_or_else(|| out.join("data").join(format!("{case}-seed{}.csv", c.seed())));
    write(&path, &write_csv(&set))?;
    write(&meta_path(&path), &to_json(&set.meta()))?;
    Ok(format!(
        "generated {} samples ({} rejected) -> {}",
        set.len(),
        set.rejections,
        path.display()
    ))
}

pub fn kron(c: &RunConfig, output: Option<PathBuf>, out: &Path) -> Result<String, CliError> {
    let grid = load_grid_file(c.grid()?)?;
    let obs = c.obs.as_deref().unwrap_or("generators");
    let mask = parse_obs(obs, &grid)?;
    let threshold = c.threshold.unwrap_or(DEFAULT_THRESHOLD);
    let model = reduced_reference(&grid, &mask, threshold)?;
    let path = output.unwrap_or_else(|| {
        out.join("grid")
            .join(format!("reduced-{}-{threshold}.json", obs.replace(',', "_")))
    });
    write(&path, &to_json(&model))?;
    Ok(format!(
        "reduced to {} nodes, {} effective lines, {} component(s) -> {}",
        model.n_nodes(),
        model.edges.len(),
        model.components,
        path.display()
    ))
}

fn train_config(
    c: &RunConfig,
    model: ModelKind,
    n_buses: usize,
    mask: &ObservabilityMask,
) -> Result<TrainConfig, CliError> {
    let full = mask.is_full();
    let mut cfg = match c.preset.as_deref().unwrap_or("desk") {
        "desk" => TrainConfig::desk_defaults(model, full),
        "full-scale" => TrainConfig::full_scale_defaults(model, n_buses, full, mask.observed().len()),
        other => {
            return Err(CliError::Other(format!(
                "unknown preset `{other}` (expected desk or full-scale)"
            )))
        }
    };
    cfg.seed = c.seed();
    if let Some(e) = c.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = c.lr {
        cfg.lr = lr;
    }
    if c.lr_final.is_some() {
        cfg.lr_final = c.lr_final;
    }
    if let Some(a) = c.reg {
        cfg.reg_coeff = a;
    }
    if c.batch_size.is_some() {
        cfg.batch_size = c.batch_size;
    }
    if model == ModelKind::Pgnn {
        if c.no_net == Some(true) {
            cfg.net = None;
        } else if c.net_width.is_some() || c.net_hidden.is_some() {
            let d = cfg.net.unwrap_or_default();
            cfg.net = Some(NetConfig {
                width: c.net_width.unwrap_or(d.width),
                hidden: c.net_hidden.unwrap_or(d.hidden),
                ..d
            });
        }
    }
    if c.units.is_some() {
        cfg.units = c.units;
    }
    if let Some(l) = c.layers {
        cfg.hidden_layers = l;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSummary {
    run: String,
    model: ModelKind,
    train_mismatch: f64,
    validation_mismatch: f64,
    /// Relative Frobenius error of the learned admittances (Power-GNN only).
    recon_error: Option<f64>,
    n_train: usize,
    n_validation: usize,
}

pub fn train(c: &RunConfig, out: &Path) -> Result<String, CliError> {
    let model_kind: ModelKind = c
        .model
        .as_deref()
        .ok_or(CliError::MissingSetting("model"))?
        .parse()
        .map_err(CliError::Other)?;
    let grid = load_grid_file(c.grid()?)?;
    let set = load_data(c.data()?)?;
    check_buses(&grid, &set)?;
    let mask = parse_obs(c.obs.as_deref().unwrap_or("full"), &grid)?;
    let cfg = train_config(c, model_kind, grid.n_buses(), &mask)?;
    let (tr, va) = split_set(&set, c.train_frac.unwrap_or(DEFAULT_TRAIN_FRAC), true)?;
    let (otr, ova) = (Observations::from_set(&tr, &mask), Observations::from_set(&va, &mask));

    let id = c.run_id("train");
    let dir = out.join("runs").join(&id);
    let threshold = c.threshold.unwrap_or(DEFAULT_THRESHOLD);
    let (loaded, report, recon): (LoadedModel, TrainReport, Option<f64>) = match model_kind {
        ModelKind::Pgnn => {
            let (m, report) = if mask.is_full() {
                train_pgnn(&Topology::from_grid(&grid), &otr, &cfg)?
            } else {
                match c.topology.as_deref().unwrap_or("reference") {
                    "reference" => {
                        let reference = reduced_reference(&grid, &mask, threshold)?;
                        let (m, report) = train_pgnn(&Topology::from_reduced(&reference), &otr, &cfg)?;
                        let cmp = line_param_compare(&m.phys, &reference);
                        write(&dir.join("fig3.csv"), &fig3_csv(&cmp))?;
                        write(&dir.join("fig3.gp"), &fig3_gp("fig3.csv"))?;
                        (m, report)
                    }
                    "pruned" => train_pgnn_pruned(&otr, &cfg, cfg.epochs / 4, threshold)?,
                    other => return Err(CliError::Other(format!("unknown topology `{other}`"))),
                }
            };
            let reference = if mask.is_full() {
                assemble_admittance(&grid).map_err(|e| CliError::Other(e.to_string()))?
            } else {
                kron_reduce(
                    &assemble_admittance(&grid).map_err(|e| CliError::Other(e.to_string()))?,
                    &mask,
                )?
            };
            let recon = relative_frobenius(&m.admittance(), &reference);
            (LoadedModel::Pgnn(m), report, Some(recon))
        }
        ModelKind::Vanilla => {
            let (m, report) = train_vanilla(&otr, &cfg)?;
            (LoadedModel::Vanilla(m), report, None)
        }
    };
    let checkpoint: Checkpoint = match &loaded {
        LoadedModel::Pgnn(m) => m.checkpoint(mask.observed().to_vec(), grid.n_buses()),
        LoadedModel::Vanilla(m) => m.checkpoint(mask.observed().to_vec(), grid.n_buses()),
    };
    let summary = TrainSummary {
        run: id.clone(),
        model: model_kind,
        train_mismatch: mismatch(loaded.as_model(), &otr)?.value,
        validation_mismatch: mismatch(loaded.as_model(), &ova)?.value,
        recon_error: recon,
        n_train: otr.n_samples(),
        n_validation: ova.n_samples(),
    };
    write(&dir.join("config.json"), &to_json(&(c, &cfg)))?;
    write(&dir.join("checkpoint.json"), &to_json(&checkpoint))?;
    write(&dir.join("report.json"), &to_json(&report))?;
    write(&dir.join("trace.csv"), &report.trace_csv())?;
    write(&dir.join("metrics.json"), &to_json(&summary))?;
    let mut table = Table1::new((0..6).map(|k| format!("c{}", k + 1)).collect());
    let method = match model_kind {
        ModelKind::Pgnn => "power-gnn",
        ModelKind::Vanilla => "vanilla",
    };
    table.set(
        method,
        &set.config.case_id.to_string(),
        summary.train_mismatch,
        summary.validation_mismatch,
    );
    write(&dir.join("table1.csv"), &table.validation_csv())?;
    write(&dir.join("table1_train.csv"), &table.train_csv())?;
    let mut line = format!(
        "run {id} model={model_kind} train_mismatch={:e} validation_mismatch={:e}",
        summary.train_mismatch, summary.validation_mismatch
    );
    if let Some(r) = recon {
        line.push_str(&format!(" recon_error={r:e}"));
    }
    if let Some(s) = report.success {
        line.push_str(&format!(" success={s}"));
    }
    line.push_str(&format!(" dir={}", dir.display()));
    Ok(line)
}

pub fn evaluate(model: &Path, c: &RunConfig, split: &str, output: Option<PathBuf>) -> Result<String, CliError> {
    let ckpt: Checkpoint = serde_json::from_str(&read(model)?).map_err(|e| CliError::parse(model, e))?;
    let set = load_data(c.data()?)?;
    if set.n_buses() != ckpt.n_buses() {
        return Err(CliError::Other(format!(
            "dataset has {} buses but the checkpoint expects {}",
            set.n_buses(),
            ckpt.n_buses()
        )));
    }
    let mask = ckpt.mask()?;
    let set = match split {
        "all" => set,
        "train" | "validation" => {
            let (tr, va) = split_set(&set, c.train_frac.unwrap_or(DEFAULT_TRAIN_FRAC), true)?;
            if split == "train" {
                tr
            } else {
                va
            }
        }
        other => return Err(CliError::Other(format!("unknown split `{other}`"))),
    };
    let loaded = ckpt.load()?;
    let r = mismatch(loaded.as_model(), &Observations::from_set(&set, &mask))?;
    if let Some(p) = output {
        write(&p, &to_json(&r))?;
    }
    Ok(format!(
        "mismatch={:e} p_term={:e} q_term={:e} samples={} nodes={}",
        r.value, r.p_term, r.q_term, r.n_samples, r.n_nodes
    ))
}

pub fn sweep_reg(c: &RunConfig, out: &Path) -> Result<String, CliError> {
    let grid = load_grid_file(c.grid()?)?;
    let set = load_data(c.data()?)?;
    check_buses(&grid, &set)?;
    let mask = parse_obs(c.obs.as_deref().unwrap_or("generators"), &grid)?;
    let cfg = train_config(c, ModelKind::Pgnn, grid.n_buses(), &mask)?;
    let reference = reduced_reference(&grid, &mask, c.threshold.unwrap_or(DEFAULT_THRESHOLD))?;
    let (tr, _) = split_set(&set, c.train_frac.unwrap_or(DEFAULT_TRAIN_FRAC), true)?;
    let alphas = c.alphas.clone().unwrap_or_else(|| DEFAULT_ALPHAS.to_vec());
    let sweep = reg_sweep(&reference, &Observations::from_set(&tr, &mask), &alphas, &cfg)?;
    let id = c.run_id("sweep-reg");
    let dir = out.join("runs").join(&id);
    write(&dir.join("config.json"), &to_json(&(c, &cfg)))?;
    write(&dir.join("fig4.csv"), &fig4_csv(&sweep))?;
    write(&dir.join("fig4.gp"), &fig4_gp("fig4.csv", &sweep))?;
    write(&dir.join("sweep.json"), &to_json(&sweep))?;
    let argmin = sweep.argmin().map_or("none".into(), |a| format!("{a:e}"));
    Ok(format!(
        "sweep {id} points={} argmin={argmin} interior={} dir={}",
        sweep.points.len(),
        sweep.has_interior_min(),
        dir.display()
    ))
}

pub fn recon_curve(c: &RunConfig, out: &Path) -> Result<String, CliError> {
    let grid = load_grid_file(c.grid()?)?;
    let set = load_data(c.data()?)?;
    check_buses(&grid, &set)?;
    let mask = ObservabilityMask::full(grid.n_buses());
    let mut rc = ReconCurveConfig::desk(c.seed());
    if c.preset.is_some() || c.lr.is_some() || c.no_net.is_some() {
        rc.train = train_config(c, ModelKind::Pgnn, grid.n_buses(), &mask)?;
    } else {
        if let Some(e) = c.epochs {
            rc.train.epochs = e;
        }
        if c.lr_final.is_some() {
            rc.train.lr_final = c.lr_final;
        }
        if c.net_width.is_some() || c.net_hidden.is_some() {
            let d = NetConfig::default();
            rc.train.net = Some(NetConfig {
                width: c.net_width.unwrap_or(d.width),
                hidden: c.net_hidden.unwrap_or(d.hidden),
                ..d
            });
        }
    }
    if let Some(ns) = &c.ns {
        rc.sample_counts = ns.clone();
    }
    if let Some(r) = c.realizations {
        rc.realizations = r;
    }
    if c.per_node == Some(true) {
        rc.normalization = ReconNormalization::PerNode;
    }
    let y = assemble_admittance(&grid).map_err(|e| CliError::Other(e.to_string()))?;
    let curve = recon_error_curve(
        &Topology::from_grid(&grid),
        &Observations::from_set(&set, &mask),
        &y,
        &rc,
    )?;
    let id = c.run_id("recon-curve");
    let dir = out.join("runs").join(&id);
    write(&dir.join("config.json"), &to_json(&(c, &rc)))?;
    write(&dir.join("fig2.csv"), &fig2_csv(&curve))?;
    write(&dir.join("fig2.gp"), &fig2_gp("fig2.csv"))?;
    write(&dir.join("recon.json"), &to_json(&curve))?;
    let means: Vec<String> = curve
        .iter()
        .map(|r| format!("{}:{:.3e}", r.n_samples, r.mean))
        .collect();
    Ok(format!(
        "recon {id} mean_error {} dir={}",
        means.join(" "),
        dir.display()
    ))
}
