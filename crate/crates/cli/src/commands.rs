use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde_json::{json, Value};

use mplnet::engine::{self, FitConfig, FitResult, FitStatus, IclCount};
use mplnet::eval::{self, BaselinePenalty, EvalReport, StabilityFit};
use mplnet::glasso::ZeroEdgeSet;
use mplnet::io::{self, NamedMatrix};
use mplnet::pln::CountDataset;
use mplnet::simgen::{self, SimConfig};
use mplnet::Error;

use crate::args::{BenchmarkArgs, FitArgs, Selection, SimulateArgs, SolverArgs};
use crate::manifest::{file_digest, Phases, RunManifest};

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_DEGENERATE: i32 = 4;

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::InvalidInput(_) | Error::Parse { .. } | Error::Io(_) | Error::Parameter(_) => EXIT_INPUT,
            Error::Degenerate { .. } => EXIT_DEGENERATE,
            _ => EXIT_NUMERICAL,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: EXIT_INPUT,
            message: e.to_string(),
        }
    }
}

fn input_error(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_INPUT,
        message: message.into(),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| input_error(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn write_matrix(path: &Path, corner: &str, rows: &[String], cols: &[String], values: &DMatrix<f64>) -> Result<(), CliError> {
    let m = NamedMatrix {
        corner: corner.into(),
        row_names: rows.to_vec(),
        col_names: cols.to_vec(),
        values: values.clone(),
    };
    io::write_matrix(io::create(path)?, &m)?;
    Ok(())
}

fn component_names(g: usize) -> Vec<String> {
    (1..=g).map(|k| format!("g{k}")).collect()
}

fn finish_manifest(out: &Path, mut manifest: RunManifest, phases: Phases) -> Result<(), CliError> {
    manifest.timings = phases.timings;
    write_json(&out.join("manifest.json"), &manifest)
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut phases = Phases::new();
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<SimConfig>(&text).map_err(|e| input_error(format!("{}: {e}", path.display())))?
        }
        None => SimConfig::default(),
    };
    if let Some(g) = args.graph {
        config.graph_kind = g;
    }
    if let Some(p) = args.p {
        config.p = p;
    }
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(k) = args.populations {
        config.populations = k;
        config.proportions = vec![1.0 / k.max(1) as f64; k];
    }
    if let Some(d) = args.dropout {
        config.dropout_level = d;
    }
    if let Some(m) = args.mixing {
        config.mixing_level = m;
    }
    if args.p_d.is_some() {
        config.p_d = args.p_d;
    }
    if let Some(m) = args.edge_magnitude {
        config.edge_magnitude = m;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    let manifest = RunManifest::new("simulate", serde_json::to_value(&config).expect("config serializes"), config.seed);

    let sim = simgen::gen_dataset(&config).map_err(|e| {
        if let Error::Calibration { closest_ari, closest_band, .. } = e.root() {
            eprintln!("closest achieved ARI {closest_ari:.4} (band {closest_band})");
        }
        CliError::from(e)
    })?;
    phases.mark("generate");

    let out = &args.out;
    fs::create_dir_all(out)?;
    let data = &sim.dataset;
    io::write_counts(io::create(&out.join("counts.tsv"))?, data)?;
    io::write_named_values(io::create(&out.join("scaling.tsv"))?, ("sample", "scaling"), data.sample_names(), data.scaling())?;
    let labels = data.true_labels().expect("generated data carries labels");
    io::write_labels(io::create(&out.join("labels.tsv"))?, data.sample_names(), labels)?;
    let names = data.feature_names();
    for (g, theta) in sim.true_precisions.iter().enumerate() {
        let k = g + 1;
        io::write_edges(io::create(&out.join(format!("truth_edges_g{k}.tsv")))?, &io::edges_from_precision(theta, names))?;
        write_matrix(&out.join(format!("true_precision_g{k}.tsv")), "feature", names, names, theta)?;
    }
    let means = DMatrix::from_fn(sim.true_means.len(), data.p(), |g, j| sim.true_means[g][j]);
    write_matrix(&out.join("true_means.tsv"), "component", &component_names(sim.true_means.len()), names, &means)?;
    write_json(
        &out.join("simulation.json"),
        &json!({
            "config": config,
            "p_d_used": sim.p_d_used,
            "achieved_ari": sim.achieved_ari,
            "draw_seed": sim.draw_seed,
            "zero_fraction": sim.zero_fraction(),
        }),
    )?;
    phases.mark("write");
    finish_manifest(out, manifest, phases)?;
    println!(
        "wrote {} samples x {} features, ARI {:.3}, zero fraction {:.3} to {}",
        data.n(),
        data.p(),
        sim.achieved_ari,
        sim.zero_fraction(),
        out.display()
    );
    Ok(())
}

fn fit_config(components: usize, solver: &SolverArgs) -> Result<FitConfig, CliError> {
    if !(solver.rho > 0.0 && solver.rho.is_finite()) {
        return Err(input_error("--rho must be positive"));
    }
    if solver.max_iter == 0 {
        return Err(input_error("--max-iter must be at least 1"));
    }
    let mut config = FitConfig::new(components, 0.0);
    config.max_outer = solver.max_iter;
    config.tol_elbo = solver.tol_elbo;
    config.tol_sign = solver.tol_sign;
    config.admm.rho = solver.rho;
    config.p_step_mode = solver.p_step;
    config.seed = solver.seed;
    Ok(config)
}

fn solver_json(solver: &SolverArgs) -> Value {
    json!({
        "p_step": solver.p_step,
        "seed": solver.seed,
        "max_iter": solver.max_iter,
        "tol_elbo": solver.tol_elbo,
        "tol_sign": solver.tol_sign,
        "rho": solver.rho,
    })
}

fn load_counts(counts: &Path, scaling: Option<&Path>) -> Result<CountDataset, CliError> {
    let scaling = match scaling {
        Some(path) => {
            let (names, values) = io::read_named_values(io::open(path)?)?;
            Some((names, values))
        }
        None => None,
    };
    let data = io::read_counts(io::open(counts)?, scaling.as_ref().map(|s| s.1.clone()))?;
    if let Some((names, _)) = &scaling {
        if names != data.sample_names() {
            return Err(input_error("scaling file samples do not match the count matrix rows"));
        }
    }
    Ok(data)
}

/// Writes every per-fit artifact into `out`.
fn write_fit(out: &Path, data: &CountDataset, fit: &FitResult) -> Result<(), CliError> {
    let names = data.feature_names();
    let g_names = component_names(fit.params.components());
    for (g, theta) in fit.params.precisions.iter().enumerate() {
        let k = g + 1;
        write_matrix(&out.join(format!("precision_g{k}.tsv")), "feature", names, names, theta)?;
        io::write_edges(io::create(&out.join(format!("edges_g{k}.tsv")))?, &io::edges_from_precision(theta, names))?;
    }
    write_matrix(&out.join("responsibilities.tsv"), "sample", data.sample_names(), &g_names, &fit.state.responsibilities)?;
    io::write_named_values(io::create(&out.join("proportions.tsv"))?, ("component", "proportion"), &g_names, &fit.params.proportions)?;
    let means = DMatrix::from_fn(fit.params.components(), data.p(), |g, j| fit.params.means[g][j]);
    write_matrix(&out.join("means.tsv"), "component", &g_names, names, &means)?;
    write_json(&out.join("trace.json"), &fit.trace)?;
    Ok(())
}

fn status_json(fit: &FitResult) -> Value {
    json!({
        "status": fit.status,
        "partial": matches!(fit.status, FitStatus::Degenerate { .. }),
        "outer_iterations": fit.trace.len(),
        "lambdas": fit.lambdas,
        "elbo": fit.elbo.total,
        "penalized_objective": fit.penalized_objective(),
        "densities": fit.densities(),
    })
}

pub fn fit(args: &FitArgs) -> Result<(), CliError> {
    let mut phases = Phases::new();
    let data = load_counts(&args.counts, args.scaling.as_deref())?;
    let zeros = match &args.zero_edges {
        Some(path) => io::read_zero_edges(io::open(path)?, data.feature_names())?,
        None => ZeroEdgeSet::new(),
    };
    let mut config = fit_config(args.components, &args.solver)?;
    config.zero_edges = zeros;
    let selection = match (args.lambda, args.select) {
        (Some(l), None) => {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(input_error("--lambda must be finite and non-negative"));
            }
            config.lambda = l;
            json!({"lambda": l})
        }
        (None, Some(Selection::Icl)) => json!("icl"),
        (None, Some(Selection::Density(d))) => json!({"density": d}),
        _ => return Err(input_error("give exactly one of --lambda or --select")),
    };
    config.validate(&data)?;

    let mut inputs = json!({"counts": file_digest(&args.counts)?});
    if let Some(s) = &args.scaling {
        inputs["scaling"] = json!(file_digest(s)?);
    }
    if let Some(z) = &args.zero_edges {
        inputs["zero_edges"] = json!(file_digest(z)?);
    }
    let manifest = RunManifest::new(
        "fit",
        json!({
            "inputs": inputs,
            "components": args.components,
            "selection": selection,
            "solver": solver_json(&args.solver),
        }),
        args.solver.seed,
    );
    phases.mark("load");

    let (fit, extra) = match args.select {
        None => (engine::fit(&data, &config)?, Value::Null),
        Some(Selection::Icl) => {
            let grid = engine::default_lambda_grid(&data);
            let sel = engine::select_lambda_icl(&data, &config, &grid, IclCount::default())?;
            let path: Vec<Value> = sel.path.iter().map(|(l, icl)| json!({"lambda": l, "icl": icl})).collect();
            (sel.fit, json!({"method": "icl", "grid": grid, "path": path}))
        }
        Some(Selection::Density(d)) => {
            let sel = engine::select_lambda_density(&data, &config, d, true)?;
            let extra = json!({"method": "density", "target": d, "steps": sel.steps, "status": sel.status});
            (sel.fit, extra)
        }
    };
    phases.mark("fit");

    fs::create_dir_all(&args.out)?;
    write_fit(&args.out, &data, &fit)?;
    let mut summary = status_json(&fit);
    summary["selection"] = extra;
    write_json(&args.out.join("fit.json"), &summary)?;
    phases.mark("write");
    finish_manifest(&args.out, manifest, phases)?;

    if let FitStatus::Degenerate { component, weight, iteration } = fit.status {
        return Err(CliError {
            code: EXIT_DEGENERATE,
            message: format!(
                "component {} degenerate at iteration {iteration} (weight {weight:e}); outputs are from the last sound iterate",
                component + 1
            ),
        });
    }
    println!(
        "{} components, lambdas {:?}, {} outer iterations, status {:?}",
        fit.params.components(),
        fit.lambdas,
        fit.trace.len(),
        fit.status
    );
    Ok(())
}

/// Bundle contents needed for scoring.
struct Bundle {
    data: CountDataset,
    true_precisions: Vec<DMatrix<f64>>,
}

fn load_bundle(dir: &Path) -> Result<Bundle, CliError> {
    let scaling = dir.join("scaling.tsv");
    let data = load_counts(&dir.join("counts.tsv"), scaling.exists().then_some(scaling.as_path()))?;
    let labels_path = dir.join("labels.tsv");
    if !labels_path.exists() {
        return Err(input_error(format!("{} has no labels.tsv; benchmark needs ground truth", dir.display())));
    }
    let (names, labels) = io::read_labels(io::open(&labels_path)?)?;
    if names != data.sample_names() {
        return Err(input_error("labels.tsv samples do not match counts.tsv"));
    }
    let data = data.with_true_labels(labels)?;
    let mut true_precisions = Vec::new();
    for k in 1.. {
        let path: PathBuf = dir.join(format!("true_precision_g{k}.tsv"));
        if !path.exists() {
            break;
        }
        let m = io::read_matrix(io::open(&path)?)?;
        if m.values.shape() != (data.p(), data.p()) {
            return Err(input_error(format!("{} is not {} x {}", path.display(), data.p(), data.p())));
        }
        true_precisions.push(m.values);
    }
    if true_precisions.is_empty() {
        return Err(input_error(format!("{} has no true_precision_g*.tsv; benchmark needs ground truth", dir.display())));
    }
    Ok(Bundle { data, true_precisions })
}

/// Both methods at one density, scored against the truth.
pub fn benchmark_reports(data: &CountDataset, truth: &[DMatrix<f64>], config: &FitConfig, density: f64) -> Result<Vec<EvalReport>, Error> {
    let labels = data
        .true_labels()
        .ok_or_else(|| Error::InvalidInput("dataset has no true labels".into()))?;
    let t = Instant::now();
    let sel = engine::select_lambda_density(data, config, density, true)?;
    let vmpln = eval::evaluate(
        "vmpln",
        &sel.fit.params.precisions,
        &sel.fit.state.responsibilities,
        labels,
        truth,
        t.elapsed().as_secs_f64(),
    )?;
    let t = Instant::now();
    let base = eval::two_step_baseline(data, config.components, BaselinePenalty::Density(density), &config.zero_edges, config.seed)?;
    let precisions: Vec<DMatrix<f64>> = base.networks.iter().map(|n| n.precision.clone()).collect();
    let two_step = eval::evaluate(
        "kmeans_glasso",
        &precisions,
        &eval::one_hot(&base.labels, config.components),
        labels,
        truth,
        t.elapsed().as_secs_f64(),
    )?;
    Ok(vec![vmpln, two_step])
}

pub fn benchmark(args: &BenchmarkArgs) -> Result<(), CliError> {
    let mut phases = Phases::new();
    let bundle = load_bundle(&args.bundle)?;
    let components = args.components.unwrap_or(bundle.true_precisions.len());
    if !(args.density > 0.0 && args.density <= 1.0) {
        return Err(input_error("--density must lie in (0, 1]"));
    }
    let config = fit_config(components, &args.solver)?;
    config.validate(&bundle.data)?;
    let mut inputs = json!({"counts": file_digest(&args.bundle.join("counts.tsv"))?});
    for k in 1..=bundle.true_precisions.len() {
        inputs[format!("true_precision_g{k}")] = json!(file_digest(&args.bundle.join(format!("true_precision_g{k}.tsv")))?);
    }
    let manifest = RunManifest::new(
        "benchmark",
        json!({
            "inputs": inputs,
            "components": components,
            "density": args.density,
            "stability": args.stability.then_some(json!({"reps": args.reps, "frac": args.frac})),
            "solver": solver_json(&args.solver),
        }),
        args.solver.seed,
    );
    phases.mark("load");

    let mut reports = benchmark_reports(&bundle.data, &bundle.true_precisions, &config, args.density)?;
    phases.mark("fit");

    if args.stability {
        let density = args.density;
        let vmpln = |d: &CountDataset, seed: u64| {
            let cfg = FitConfig { seed, ..config.clone() };
            let sel = engine::select_lambda_density(d, &cfg, density, true)?;
            Ok(StabilityFit {
                precisions: sel.fit.params.precisions,
                responsibilities: sel.fit.state.responsibilities,
            })
        };
        let baseline = |d: &CountDataset, seed: u64| {
            let base = eval::two_step_baseline(d, components, BaselinePenalty::Density(density), &config.zero_edges, seed)?;
            Ok(StabilityFit {
                precisions: base.networks.into_iter().map(|n| n.precision).collect(),
                responsibilities: eval::one_hot(&base.labels, components),
            })
        };
        reports[0].stability_jaccard =
            Some(eval::jaccard_stability(&bundle.data, vmpln, args.frac, args.reps, density, args.solver.seed)?);
        reports[1].stability_jaccard =
            Some(eval::jaccard_stability(&bundle.data, baseline, args.frac, args.reps, density, args.solver.seed)?);
        phases.mark("stability");
    }

    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("report.json"), &reports)?;
    let mut table = String::from("method\tmean_pauprc_ratio\tpauprc_ratios\tari\tstability_jaccard\tdensities\tseconds\n");
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",");
    for r in &reports {
        table.push_str(&format!(
            "{}\t{:.4}\t{}\t{:.4}\t{}\t{}\t{:.1}\n",
            r.method,
            r.mean_ratio,
            join(&r.pauprc_ratio),
            r.ari,
            r.stability_jaccard.map_or("NA".to_string(), |s| format!("{s:.4}")),
            join(&r.density),
            r.seconds
        ));
    }
    fs::write(args.out.join("report.tsv"), &table)?;
    phases.mark("write");
    finish_manifest(&args.out, manifest, phases)?;
    print!("{table}");
    Ok(())
}
