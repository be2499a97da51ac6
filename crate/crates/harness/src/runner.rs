//! Executes an [`ExperimentConfig`] and writes its artifact set.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use layerdyn::data::{linear_teacher_task, load_idx, Dataset};
use layerdyn::diagnostics::{
    balancedness_drift, bound_trajectory, check_bound, combined_strength, estimate_kappas,
    integrate_mode_ode, norm_gap, norm_spread, t_u_deep_limit, t_u_lower_bound, BoundParams,
    BoundSeries,
};
use layerdyn::init::saxe_aligned_init_layered;
use layerdyn::lnn::{covariance, train, train_tracking, CovarianceSummary, LinearNet};
use layerdyn::relu::{
    evaluate_batch, symmetry_residual, train_relu, ClassBatch, MaskTensor, ReluNet,
};
use layerdyn::trajectory::Trajectory;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{BoundSpec, DatasetSpec, ExperimentConfig, Kind};
use crate::error::{HarnessError, Result};
use crate::output::{render_chart, ChartSpec, Table};

/// Samples used for the symmetry-residual decomposition, whose cost is linear
/// in the sample count with a full set of layer Gram products per sample.
pub const RESIDUAL_SAMPLES: usize = 64;

/// Growth-discrepancy pairs summarised for the upper layers (pairs 4–5 and 5–6).
pub const UPPER_PAIRS: [usize; 2] = [3, 4];

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub metadata: Value,
}

/// Sweep parallelism from `RUN_THREADS`, default 1.
pub fn run_threads() -> usize {
    std::env::var("RUN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Order-preserving map over `items` on up to `threads` scoped threads.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// SHA-256 of the compact JSON serialization, hex encoded.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let mut meta = Map::new();
    meta.insert("schema_version".into(), json!(cfg.schema_version));
    meta.insert("kind".into(), json!(cfg.kind.name()));
    meta.insert("config_sha256".into(), json!(config_hash(cfg)));
    meta.insert("seed".into(), json!(cfg.seed));
    meta.insert(
        "config".into(),
        serde_json::to_value(cfg).expect("config serializes"),
    );
    let result = match cfg.kind {
        Kind::LnnTrain => run_lnn(cfg, out, &mut meta),
        Kind::ModeCompare => run_modes(cfg, out, &mut meta),
        Kind::ReluTrain => run_relu(cfg, out, &mut meta),
        Kind::BoundSweep => run_bound_sweep(cfg, out, &mut meta),
    };
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(HarnessError::Divergence(msg)) => format!("diverged: {msg}"),
        Err(_) => "failed".to_string(),
    };
    if matches!(result, Ok(()) | Err(HarnessError::Divergence(_))) {
        meta.insert("status".into(), json!(status));
        write_metadata(out, &meta)?;
    }
    result?;
    Ok(RunOutcome {
        dir: out.to_path_buf(),
        metadata: Value::Object(meta),
    })
}

fn write_metadata(dir: &Path, meta: &Map<String, Value>) -> Result<()> {
    let path = dir.join("metadata.json");
    let mut text = serde_json::to_string_pretty(meta).expect("metadata serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))
}

fn record_columns(meta: &mut Map<String, Value>, file: &str, table: &Table) {
    let cols = meta.entry("columns").or_insert_with(|| json!({}));
    cols[file] = json!(table.columns);
}

fn write_table(
    dir: &Path,
    file: &str,
    table: &Table,
    meta: &mut Map<String, Value>,
) -> Result<PathBuf> {
    let path = dir.join(file);
    table.write(&path)?;
    record_columns(meta, file, table);
    Ok(path)
}

fn chart(csv: &Path, svg_name: &str, spec: &ChartSpec) -> Result<()> {
    let svg = csv.with_file_name(svg_name);
    render_chart(csv, &svg, spec)
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

/// `step, t, loss, norm_W1.., prod_norm, sq_gap_1..`, then `growth_*` and
/// `agree_*` when the run records them. `sq_gap_l = |W_l|² − |W_{l+1}|²`.
pub fn trajectory_table(traj: &Trajectory) -> Table {
    let depth = traj.depth();
    let first = traj.first();
    let growth = first.map_or(0, |s| s.growth_discrepancy.len());
    let agree = first.map_or(0, |s| s.mask_agreement.len());
    let mut cols = vec!["step".to_string(), "t".into(), "loss".into()];
    cols.extend((1..=depth).map(|l| format!("norm_W{l}")));
    cols.push("prod_norm".into());
    cols.extend((1..depth).map(|l| format!("sq_gap_{l}")));
    cols.extend((1..=growth).map(|l| format!("growth_{l}")));
    cols.extend((1..=agree).map(|l| format!("agree_{l}")));
    let mut table = Table::new(cols);
    for s in &traj.snapshots {
        let mut row = vec![s.step as f64, s.time, s.loss];
        row.extend(&s.layer_norms);
        row.push(s.prod_norm);
        row.extend(s.layer_norms.windows(2).map(|w| w[0] * w[0] - w[1] * w[1]));
        row.extend(&s.growth_discrepancy);
        row.extend(&s.mask_agreement);
        table.push(row);
    }
    table
}

/// `step, t, drift_1..` with `drift_l = |C_l(t) − C_l(0)|_F`.
fn conservation_table(traj: &Trajectory) -> Result<Table> {
    let pairs = traj.depth().saturating_sub(1);
    let mut cols = vec!["step".to_string(), "t".into()];
    cols.extend((1..=pairs).map(|l| format!("drift_{l}")));
    let mut table = Table::new(cols);
    let Some(first) = traj.first() else {
        return Ok(table);
    };
    for s in &traj.snapshots {
        let mut row = vec![s.step as f64, s.time];
        for (c, c0) in s.conservation.iter().zip(&first.conservation) {
            row.push(c.sub(c0)?.frobenius_norm());
        }
        table.push(row);
    }
    Ok(table)
}

/// Mixture task for a linear-net config: data, covariance and whether it was whitened.
pub fn lnn_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, CovarianceSummary, bool)> {
    let (spec, outputs, whiten) = cfg
        .dataset()?
        .mixture()
        .ok_or_else(|| HarnessError::Config("`dataset`: expected a mixture dataset".into()))?;
    let data = linear_teacher_task(&spec, outputs, cfg.seed, whiten)?;
    let cov = covariance(&data)?;
    Ok((data, cov, whiten))
}

fn norm_names(depth: usize) -> Vec<String> {
    (1..=depth).map(|l| format!("norm_W{l}")).collect()
}

/// Writes trajectory, conservation and loss artifacts shared by linear runs.
fn write_linear_artifacts(
    cfg: &ExperimentConfig,
    out: &Path,
    traj: &Trajectory,
    meta: &mut Map<String, Value>,
) -> Result<()> {
    let depth = traj.depth();
    let tpath = write_table(out, "trajectory.csv", &trajectory_table(traj), meta)?;
    let mut series = norm_names(depth);
    series.push("prod_norm".into());
    chart(
        &tpath,
        "trajectory.svg",
        &ChartSpec::new("layer norms and end-to-end norm", "t", series).log_x(cfg.log_time),
    )?;
    chart(
        &tpath,
        "loss.svg",
        &ChartSpec::new("loss", "t", ["loss".to_string()])
            .log_x(cfg.log_time)
            .log_y(true),
    )?;
    if depth > 1 {
        let cpath = write_table(out, "conservation.csv", &conservation_table(traj)?, meta)?;
        chart(
            &cpath,
            "conservation.svg",
            &ChartSpec::new(
                "conservation drift",
                "t",
                (1..depth).map(|l| format!("drift_{l}")),
            )
            .log_x(cfg.log_time),
        )?;
    }
    Ok(())
}

/// Splits a core divergence into partial artifacts plus the error.
fn on_divergence<T>(
    result: layerdyn::Result<T>,
    out: &Path,
    meta: &mut Map<String, Value>,
) -> Result<T> {
    match result {
        Ok(v) => Ok(v),
        Err(layerdyn::Error::Divergence {
            step,
            reason,
            partial,
        }) => {
            if let Some(traj) = partial.as_ref() {
                if !traj.is_empty() {
                    write_table(out, "trajectory.csv", &trajectory_table(traj), meta)?;
                }
            }
            meta.insert("diverged_at_step".into(), json!(step));
            Err(HarnessError::Divergence(format!("step {step}: {reason}")))
        }
        Err(e) => Err(e.into()),
    }
}

fn run_lnn(cfg: &ExperimentConfig, out: &Path, meta: &mut Map<String, Value>) -> Result<()> {
    let dims = cfg.dims()?;
    let flow = cfg.flow()?;
    let (data, cov, whitened) = lnn_dataset(cfg)?;
    let sn = cov.sigma_yx.frobenius_norm();
    let (net, _) = cfg.init()?.build(dims, Some(&cov), cfg.seed)?;
    meta.insert("whitened".into(), json!(whitened));
    meta.insert("sigma_xx_deviation".into(), json!(cov.xx_deviation()));
    meta.insert("sigma_yx_norm".into(), json!(sn));
    meta.insert("eta".into(), json!(flow.eta));
    meta.insert("tau".into(), finite_or_null(flow.tau));
    meta.insert("steps".into(), json!(flow.steps));

    let (net, traj) = on_divergence(train(net, &data, &flow), out, meta)?;
    write_linear_artifacts(cfg, out, &traj, meta)?;

    let err = net.end_to_end().sub(&cov.sigma_yx)?.frobenius_norm();
    meta.insert("final_error".into(), json!(err));
    meta.insert(
        "final_loss".into(),
        json!(traj.last().map_or(f64::NAN, |s| s.loss)),
    );
    let drift = balancedness_drift(&traj)?;
    meta.insert("max_conservation_drift".into(), json!(drift));
    let gaps = norm_gap(&traj);
    let initial: Vec<f64> = gaps.abs_gap.iter().map(|g| g[0]).collect();
    let max: Vec<f64> = gaps
        .abs_gap
        .iter()
        .map(|g| g.iter().fold(0.0f64, |a, &b| a.max(b)))
        .collect();
    meta.insert("initial_abs_norm_gap".into(), json!(initial));
    meta.insert("max_abs_norm_gap".into(), json!(max));
    meta.insert(
        "delta".into(),
        json!(norm_spread(&traj.first().expect("non-empty").layer_norms)),
    );

    match estimate_kappas(&traj, sn) {
        Ok(k) => {
            let p = BoundParams::from_kappas(traj.depth(), &k, sn, 1.0);
            meta.insert("kappa1".into(), json!(k.kappa1));
            meta.insert("kappa2".into(), json!(k.kappa2));
            meta.insert("u0".into(), json!(k.u0));
            meta.insert("m".into(), json!(p.m()));
            meta.insert("kappa_excluded_snapshots".into(), json!(k.excluded.len()));
            let check = check_bound(&traj, &p)?;
            meta.insert(
                "bound_max_relative_excess".into(),
                json!(check.max_relative_excess),
            );
            let mut table = Table::new(["t", "U", "measured", "bound"]);
            for (i, t) in check.times.iter().enumerate() {
                let u = combined_strength(&traj.snapshots[i].layer_norms, p.delta);
                table.push(vec![*t, u, check.measured[i], check.bound[i]]);
            }
            let bpath = write_table(out, "bound.csv", &table, meta)?;
            chart(
                &bpath,
                "bound.svg",
                &ChartSpec::new(
                    "growth of U against the bound",
                    "t",
                    ["measured".to_string(), "bound".into()],
                )
                .log_x(cfg.log_time),
            )?;
        }
        Err(e) => {
            meta.insert("kappa_error".into(), json!(e.to_string()));
        }
    }
    Ok(())
}

fn run_modes(cfg: &ExperimentConfig, out: &Path, meta: &mut Map<String, Value>) -> Result<()> {
    let dims = cfg.dims()?;
    let flow = cfg.flow()?;
    let init = cfg.init()?;
    let (data, cov, whitened) = lnn_dataset(cfg)?;
    let depth = dims.len() - 1;
    let layer_sigma = match &cfg.layer_sigma {
        Some(ls) => ls.clone(),
        None => vec![init.sigma0.expect("validated"); depth],
    };
    let (net, align) =
        saxe_aligned_init_layered(dims, &cov, &layer_sigma, init.seed.unwrap_or(cfg.seed))?;
    meta.insert("whitened".into(), json!(whitened));
    meta.insert("sigma_yx_norm".into(), json!(cov.sigma_yx.frobenius_norm()));
    meta.insert("eta".into(), json!(flow.eta));
    meta.insert("steps".into(), json!(flow.steps));
    meta.insert("mode_targets".into(), json!(align.targets));

    let (net, traj) = on_divergence(train_tracking(net, &data, &flow, Some(&align)), out, meta)?;
    write_linear_artifacts(cfg, out, &traj, meta)?;

    let cmp = compare_modes(&traj, &align.targets, flow.eta, flow.steps)?;
    let mpath = write_table(out, "modes.csv", &cmp.table, meta)?;
    let mut series = Vec::new();
    for k in 1..=align.modes() {
        for l in 1..=depth {
            series.push(format!("sigma_{k}_{l}"));
        }
    }
    chart(
        &mpath,
        "modes.svg",
        &ChartSpec::new("mode strengths", "t", series).log_x(cfg.log_time),
    )?;
    meta.insert(
        "mode_max_relative_error".into(),
        json!(cmp.max_relative_error),
    );
    meta.insert("mode_final_product".into(), json!(cmp.final_product));
    meta.insert("mode_ratio_monotone".into(), json!(cmp.ratio_monotone));
    meta.insert("mode_final_ratio".into(), json!(cmp.final_ratio));
    meta.insert(
        "final_error".into(),
        json!(net.end_to_end().sub(&cov.sigma_yx)?.frobenius_norm()),
    );
    Ok(())
}

/// Measured mode strengths against the decoupled ODE integrated at the same step.
#[derive(Debug, Clone)]
pub struct ModeComparison {
    /// `step, t, sigma_k_l.., ode_k_l.., ratio_k..`.
    pub table: Table,
    /// Per mode, `max_{t,l} |σ − σ_ode| / |σ_ode|`.
    pub max_relative_error: Vec<f64>,
    /// Per mode, `∏_l σ_{k,l}` at the last snapshot.
    pub final_product: Vec<f64>,
    /// Per mode, whether `min_l σ / max_l σ` never decreases.
    pub ratio_monotone: Vec<bool>,
    pub final_ratio: Vec<f64>,
}

pub fn compare_modes(
    traj: &Trajectory,
    targets: &[f64],
    eta: f64,
    steps: usize,
) -> Result<ModeComparison> {
    let depth = traj.depth();
    let k = targets.len();
    let measured: Vec<&Vec<Vec<f64>>> = traj
        .snapshots
        .iter()
        .map(|s| {
            s.modes
                .as_ref()
                .ok_or_else(|| HarnessError::Config("trajectory has no mode strengths".into()))
        })
        .collect::<Result<_>>()?;
    let mut odes = Vec::with_capacity(k);
    for (mode, &s) in targets.iter().enumerate() {
        let init: Vec<f64> = (0..depth).map(|l| measured[0][l][mode]).collect();
        odes.push(integrate_mode_ode(s, &init, 1.0, eta, steps)?);
    }
    let mut cols = vec!["step".to_string(), "t".into()];
    for m in 1..=k {
        cols.extend((1..=depth).map(|l| format!("sigma_{m}_{l}")));
    }
    for m in 1..=k {
        cols.extend((1..=depth).map(|l| format!("ode_{m}_{l}")));
    }
    cols.extend((1..=k).map(|m| format!("ratio_{m}")));
    let mut table = Table::new(cols);
    let mut max_rel = vec![0.0f64; k];
    let mut monotone = vec![true; k];
    let mut last_ratio = vec![f64::NEG_INFINITY; k];
    for (snap, sig) in traj.snapshots.iter().zip(&measured) {
        let mut row = vec![snap.step as f64, snap.time];
        for mode in 0..k {
            row.extend((0..depth).map(|l| sig[l][mode]));
        }
        for (mode, ode) in odes.iter().enumerate() {
            for l in 0..depth {
                let o = ode[snap.step][l];
                row.push(o);
                let rel = (sig[l][mode] - o).abs() / o.abs().max(f64::MIN_POSITIVE);
                max_rel[mode] = max_rel[mode].max(rel);
            }
        }
        for mode in 0..k {
            let vals = (0..depth).map(|l| sig[l][mode].abs());
            let lo = vals.clone().fold(f64::INFINITY, f64::min);
            let hi = vals.fold(0.0, f64::max);
            let r = if hi > 0.0 { lo / hi } else { 1.0 };
            if r < last_ratio[mode] - 1e-12 {
                monotone[mode] = false;
            }
            last_ratio[mode] = r;
            row.push(r);
        }
        table.push(row);
    }
    let last = measured.last().expect("non-empty trajectory");
    let final_product = (0..k)
        .map(|mode| (0..depth).map(|l| last[l][mode]).product())
        .collect();
    Ok(ModeComparison {
        table,
        max_relative_error: max_rel,
        final_product,
        ratio_monotone: monotone,
        final_ratio: last_ratio,
    })
}

fn relu_batch(cfg: &ExperimentConfig) -> Result<ClassBatch> {
    match cfg.dataset()? {
        DatasetSpec::Idx {
            images,
            labels,
            subset,
        } => Ok(load_idx(images, labels, *subset)?),
        DatasetSpec::Mixture { .. } => Err(HarnessError::Config(
            "`dataset`: expected an idx dataset".into(),
        )),
    }
}

/// One full-batch step from `net` and its residual decomposition over the
/// first `RESIDUAL_SAMPLES` samples.
fn residual_rows(
    net: &ReluNet,
    batch: &ClassBatch,
    eta: f64,
    step: usize,
    table: &mut Table,
) -> Result<()> {
    let sub = batch.prefix(RESIDUAL_SAMPLES.min(batch.len()))?;
    let eval = evaluate_batch(net, &sub)?;
    let mut after = net.weights().to_vec();
    for (w, g) in after.iter_mut().zip(&eval.gradients) {
        w.axpy(eta, g)?;
    }
    let after = ReluNet::new(after)?;
    let masks: &MaskTensor = &eval.masks;
    let r = symmetry_residual(net, &after, masks)?;
    for l in 0..r.raw.len() {
        table.push(vec![
            step as f64,
            (l + 1) as f64,
            r.raw[l],
            r.aggregate[l],
            r.diagonal[l],
            r.cross[l],
        ]);
    }
    Ok(())
}

/// Means of a per-snapshot series over the first and second halves.
pub fn half_means(series: &[f64]) -> (f64, f64) {
    let half = series.len() / 2;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&series[..half]), mean(&series[half..]))
}

fn run_relu(cfg: &ExperimentConfig, out: &Path, meta: &mut Map<String, Value>) -> Result<()> {
    let dims = cfg.dims()?;
    let flow = cfg.flow()?;
    let batch = relu_batch(cfg)?;
    if batch.inputs().cols() != dims[0] || batch.classes() != dims[dims.len() - 1] {
        return Err(HarnessError::Config(format!(
            "`dims`: endpoints ({}, {}) do not match data ({} inputs, {} classes)",
            dims[0],
            dims[dims.len() - 1],
            batch.inputs().cols(),
            batch.classes()
        )));
    }
    let (net, _) = cfg.init()?.build(dims, None, cfg.seed)?;
    let net = ReluNet::from(net);
    meta.insert("samples".into(), json!(batch.len()));
    meta.insert("eta".into(), json!(flow.eta));
    meta.insert("steps".into(), json!(flow.steps));
    meta.insert(
        "residual_samples".into(),
        json!(RESIDUAL_SAMPLES.min(batch.len())),
    );

    let mut residuals = Table::new(["step", "layer", "raw", "aggregate", "diagonal", "cross"]);
    residual_rows(&net, &batch, flow.eta, 0, &mut residuals)?;

    let (net, traj) = on_divergence(train_relu(net, &batch, &flow), out, meta)?;
    residual_rows(&net, &batch, flow.eta, flow.steps, &mut residuals)?;

    let depth = traj.depth();
    let tpath = write_table(out, "trajectory.csv", &trajectory_table(&traj), meta)?;
    write_table(out, "symmetry.csv", &residuals, meta)?;
    chart(
        &tpath,
        "loss.svg",
        &ChartSpec::new("cross-entropy", "t", ["loss".to_string()]).log_x(cfg.log_time),
    )?;
    chart(
        &tpath,
        "norms.svg",
        &ChartSpec::new("layer norms", "t", norm_names(depth)).log_x(cfg.log_time),
    )?;
    chart(
        &tpath,
        "growth.svg",
        &ChartSpec::new(
            "growth-rate discrepancy",
            "t",
            (1..depth).map(|l| format!("growth_{l}")),
        )
        .log_x(cfg.log_time)
        .log_y(true),
    )?;
    chart(
        &tpath,
        "agreement.svg",
        &ChartSpec::new(
            "mask agreement",
            "t",
            (1..=depth).map(|l| format!("agree_{l}")),
        )
        .log_x(cfg.log_time),
    )?;

    let mut early_late = Map::new();
    for &pair in UPPER_PAIRS.iter().filter(|&&p| p + 1 < depth) {
        let series: Vec<f64> = traj
            .snapshots
            .iter()
            .map(|s| s.growth_discrepancy[pair])
            .collect();
        let (early, late) = half_means(&series);
        early_late.insert(
            format!("growth_{}", pair + 1),
            json!({ "early": early, "late": late }),
        );
    }
    meta.insert("upper_growth_halves".into(), Value::Object(early_late));
    let last = traj.last().expect("non-empty");
    meta.insert("final_mask_agreement".into(), json!(last.mask_agreement));
    meta.insert(
        "final_mask_agreement_monotone".into(),
        json!(last.mask_agreement.windows(2).all(|w| w[1] >= w[0])),
    );
    meta.insert("final_loss".into(), json!(last.loss));
    Ok(())
}

/// Bound sweep inputs resolved from explicit values or from data and init.
pub fn resolve_bound_inputs(cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    let b = cfg.bound()?;
    let m = match b.m {
        Some(m) => m,
        None => {
            let (_, cov, _) = lnn_dataset(cfg)?;
            (2.0 * b.kappa1 + 1.0) * cov.sigma_yx.frobenius_norm()
        }
    };
    let u0 = match b.u0 {
        Some(u0) => u0,
        None => {
            let (_, cov, _) = lnn_dataset(cfg)?;
            let (net, _): (LinearNet, _) = cfg.init()?.build(cfg.dims()?, Some(&cov), cfg.seed)?;
            let norms = net.layer_norms();
            combined_strength(&norms, norm_spread(&norms))
        }
    };
    Ok((m, u0))
}

/// Per-depth summary of one bound integration.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSummary {
    pub depth: usize,
    pub time_to_half_m: Option<f64>,
    pub max_slope: f64,
}

/// Integrates the bound for every depth in `spec` from the shared `m` and `u0`.
pub fn sweep_depths(
    spec: &BoundSpec,
    m: f64,
    u0: f64,
    threads: usize,
) -> Result<Vec<(DepthSummary, BoundSeries)>> {
    parallel_map(&spec.depths, threads, |&depth| {
        let p = BoundParams::with_m(depth, spec.kappa1, spec.kappa2, m, u0);
        let series = bound_trajectory(&p, spec.dt, spec.steps)?;
        Ok((
            DepthSummary {
                depth,
                time_to_half_m: series.time_to_reach(m / 2.0),
                max_slope: series.max_slope(),
            },
            series,
        ))
    })
    .into_iter()
    .collect()
}

fn run_bound_sweep(
    cfg: &ExperimentConfig,
    out: &Path,
    meta: &mut Map<String, Value>,
) -> Result<()> {
    let b = cfg.bound()?.clone();
    let (m, u0) = resolve_bound_inputs(cfg)?;
    meta.insert("kappa1".into(), json!(b.kappa1));
    meta.insert("kappa2".into(), json!(b.kappa2));
    meta.insert("m".into(), json!(m));
    meta.insert("u0".into(), json!(u0));
    meta.insert("dt".into(), json!(b.dt));
    meta.insert("bound_steps".into(), json!(b.steps));
    let threads = run_threads();
    let results = sweep_depths(&b, m, u0, threads)?;

    // Each depth also owns a directory with its full-resolution series.
    let written: Vec<Result<()>> = parallel_map(&results, threads, |(summary, series)| {
        let dir = out.join(format!("depth_{}", summary.depth));
        std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        let mut t = Table::new(["t", "U"]);
        for (i, (time, u)) in series.times.iter().zip(&series.u).enumerate() {
            if i % b.record_every == 0 || i + 1 == series.u.len() {
                t.push(vec![*time, *u]);
            }
        }
        t.write(&dir.join("bound.csv"))
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;

    let mut cols = vec!["t".to_string()];
    cols.extend(b.depths.iter().map(|d| format!("U_L{d}")));
    let mut sweep = Table::new(cols.clone());
    let len = results[0].1.u.len();
    for i in (0..len).filter(|i| i % b.record_every == 0 || i + 1 == len) {
        let mut row = vec![results[0].1.times[i]];
        row.extend(results.iter().map(|(_, s)| s.u[i]));
        sweep.push(row);
    }
    let spath = write_table(out, "bound_sweep.csv", &sweep, meta)?;
    chart(
        &spath,
        "bound_sweep.svg",
        &ChartSpec::new("bound at equality by depth", "t", cols.into_iter().skip(1))
            .log_x(cfg.log_time),
    )?;

    let mut summary = Table::new(["depth", "time_to_half_m", "max_slope"]);
    for (s, _) in &results {
        summary.push(vec![
            s.depth as f64,
            s.time_to_half_m.unwrap_or(f64::NAN),
            s.max_slope,
        ]);
    }
    write_table(out, "bound_summary.csv", &summary, meta)?;
    Ok(())
}

/// Single-depth bound integration plus the time-to-reach table comparing the
/// closed forms with the numeric series.
pub fn run_bound(p: &BoundParams, dt: f64, steps: usize, out: &Path) -> Result<Value> {
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let mut meta = Map::new();
    let series = bound_trajectory(p, dt, steps)?;
    let mut t = Table::new(["t", "U"]);
    let stride = (steps / 2000).max(1);
    for (i, (time, u)) in series.times.iter().zip(&series.u).enumerate() {
        if i % stride == 0 || i + 1 == series.u.len() {
            t.push(vec![*time, *u]);
        }
    }
    let bpath = write_table(out, "bound.csv", &t, &mut meta)?;
    chart(
        &bpath,
        "bound.svg",
        &ChartSpec::new("bound at equality", "t", ["U".to_string()]),
    )?;

    let m = p.m();
    let hi = series
        .u
        .last()
        .copied()
        .unwrap_or(p.u0)
        .min(m * (1.0 - 1e-9));
    let mut tu = Table::new(["u", "t_lower_bound", "t_deep_limit", "t_numeric"]);
    if hi > p.u0 {
        for i in 0..=50 {
            let u = p.u0 + (hi - p.u0) * i as f64 / 50.0;
            tu.push(vec![
                u,
                t_u_lower_bound(p, u)?,
                t_u_deep_limit(p, u)?,
                series.time_to_reach(u).unwrap_or(f64::NAN),
            ]);
        }
    }
    write_table(out, "t_u.csv", &tu, &mut meta)?;
    meta.insert("depth".into(), json!(p.depth));
    meta.insert("kappa1".into(), json!(p.kappa1));
    meta.insert("kappa2".into(), json!(p.kappa2));
    meta.insert("m".into(), json!(m));
    meta.insert("u0".into(), json!(p.u0));
    meta.insert("dt".into(), json!(dt));
    meta.insert("steps".into(), json!(steps));
    meta.insert(
        "time_to_half_m".into(),
        json!(series.time_to_reach(m / 2.0)),
    );
    meta.insert("max_slope".into(), json!(series.max_slope()));
    meta.insert("status".into(), json!("ok"));
    write_metadata(out, &meta)?;
    Ok(Value::Object(meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{preset_fig1, Fig1Variant};

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<usize> = (0..17).collect();
        for threads in [1, 3, 8] {
            assert_eq!(
                parallel_map(&items, threads, |x| x * x),
                items.iter().map(|x| x * x).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn hash_tracks_config() {
        let a = preset_fig1(Fig1Variant::TwoMatrix);
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.seed = 1;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn half_means_split() {
        assert_eq!(half_means(&[4.0, 2.0, 1.0, 1.0]), (3.0, 1.0));
    }

    #[test]
    fn short_lnn_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = preset_fig1(Fig1Variant::TwoMatrix);
        cfg.flow.as_mut().unwrap().steps = 200;
        let outcome = run(&cfg, dir.path()).unwrap();
        for f in [
            "trajectory.csv",
            "conservation.csv",
            "bound.csv",
            "metadata.json",
            "trajectory.svg",
            "bound.svg",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let t = Table::read(&dir.path().join("trajectory.csv")).unwrap();
        assert_eq!(
            t.columns,
            [
                "step",
                "t",
                "loss",
                "norm_W1",
                "norm_W2",
                "prod_norm",
                "sq_gap_1"
            ]
        );
        assert_eq!(t.rows.len(), 21);
        for key in [
            "delta",
            "kappa1",
            "kappa2",
            "sigma_yx_norm",
            "config_sha256",
        ] {
            assert!(outcome.metadata.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn divergence_flushes_partial_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = preset_fig1(Fig1Variant::TwoMatrix);
        cfg.init = Some(layerdyn::init::InitSpec::glorot(400.0));
        cfg.flow = Some(layerdyn::lnn::FlowConfig::new(0.5, 500, 1));
        let err = run(&cfg, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), crate::error::EXIT_DIVERGENCE);
        assert!(dir.path().join("trajectory.csv").exists());
        let meta: Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("metadata.json")).unwrap(),
        )
        .unwrap();
        assert!(meta["status"].as_str().unwrap().starts_with("diverged"));
    }
}
