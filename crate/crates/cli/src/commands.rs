//! Subcommand bodies. Every command validates the experiment first, then
//! computes, then writes its files in a fixed order.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde_json::{json, Value};
use xover_core::catalog::{generate_catalog, CatalogKind};
use xover_core::io::{fmt_num, read_dataset, read_prior_table, write_dataset, write_fit_summary, write_fit_table};
use xover_core::{
    bayes_objective, empirical_variance_check, fit, lhs_sample, prior_from_ci_table, simulate_trial,
    weight_sweep, ApproxDesign, DesignModel, EfficiencyReport, FitResult, PriorSample, SimConfig,
    Structure, SweepRow,
};

use crate::config::{Experiment, PriorSource};
use crate::CliError;

fn need<'a, T>(value: &'a Option<T>, section: &str) -> Result<&'a T, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("this command needs a [{section}] section")))
}

fn create(dir: &Path, name: &str) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| CliError::Config(format!("cannot create {}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn write_rows(dir: &Path, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    w.write_record(header).map_err(CliError::from_csv)?;
    for r in rows {
        w.write_record(r).map_err(CliError::from_csv)?;
    }
    w.flush().map_err(|e| CliError::Config(e.to_string()))
}

fn write_meta(dir: &Path, exp: &Experiment, command: &str, extra: Value) -> Result<(), CliError> {
    let mut meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": exp.seed,
        "subjects": exp.layout.subjects(),
        "treatments": exp.layout.treatments(),
        "periods": exp.layout.periods(),
        "family": exp.spec.family().name(),
        "carryover": exp.spec.carryover(),
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
        m.extend(e);
    }
    let text = serde_json::to_string_pretty(&meta).expect("json values serialize") + "\n";
    let path = dir.join("meta.json");
    fs::write(&path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

pub fn output_dir(exp: &Experiment, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = flag.or_else(|| exp.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn fit_dataset(exp: &Experiment, path: &Path, structure: Structure) -> Result<FitResult, CliError> {
    let file = File::open(path).map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
    let data = read_dataset(file, &exp.layout, exp.spec.family())
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    fit(&data, &exp.spec, structure).map_err(CliError::from)
}

/// LHS sample of the configured prior; `N` points seeded by the run seed.
pub fn prior_sample(exp: &Experiment) -> Result<PriorSample, CliError> {
    let prior = need(&exp.prior, "prior")?;
    let m = exp.spec.param_layout(&exp.layout).len();
    let (estimate, lo, hi) = match &prior.source {
        PriorSource::Inline {
            estimate,
            ci_low,
            ci_high,
        } => (estimate.clone(), ci_low.clone(), ci_high.clone()),
        PriorSource::Csv(path) => {
            let file = File::open(path)
                .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
            let t = read_prior_table(file).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            (t.estimates, t.ci_low, t.ci_high)
        }
        PriorSource::Dataset { path, structure } => {
            let f = fit_dataset(exp, path, *structure)?;
            (
                f.theta_hat.iter().copied().collect(),
                f.ci_low.iter().copied().collect(),
                f.ci_high.iter().copied().collect(),
            )
        }
    };
    if estimate.len() != m {
        return Err(CliError::Config(format!(
            "prior table has {} rows, the model has {m} parameters",
            estimate.len()
        )));
    }
    let spec = prior_from_ci_table(&estimate, &lo, &hi, prior.kind).map_err(|e| CliError::Config(e.to_string()))?;
    lhs_sample(&spec, prior.sample_size, exp.seed).map_err(CliError::from)
}

fn base_model(exp: &Experiment) -> Result<DesignModel, CliError> {
    DesignModel::new(exp.layout, exp.spec, xover_core::CorrelationKind::independent()).map_err(CliError::from)
}

fn cell_name(s: Structure, a: f64) -> String {
    format!("({s}, {a})")
}

fn sweep(exp: &Experiment, sample: &PriorSample) -> Result<Vec<SweepRow>, CliError> {
    let candidates = need(&exp.candidates, "candidates")?;
    let (structures, alphas) = need(&exp.cells, "correlation")?;
    let mut config = exp.optimizer;
    config.seed = exp.seed;
    Ok(weight_sweep(
        &base_model(exp)?,
        candidates,
        sample,
        structures,
        alphas,
        exp.layout.subjects(),
        &config,
    ))
}

/// Writes `design.csv` and `objective.csv` for the successful cells and
/// reports the first failing cell.
fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut design = vec![];
    let mut objective = vec![];
    let mut failure = None;
    for row in rows {
        let (kind, alpha) = (row.structure.name().to_string(), fmt_num(row.alpha));
        match &row.result {
            Ok(r) => {
                for (seq, w) in r.design.iter() {
                    design.push(vec![kind.clone(), alpha.clone(), seq.to_string(), fmt_num(w)]);
                }
                objective.push(vec![
                    kind,
                    alpha,
                    fmt_num(r.objective),
                    fmt_num(r.optimality_gap),
                    r.iterations.to_string(),
                    r.converged.to_string(),
                ]);
            }
            Err(e) => {
                failure.get_or_insert_with(|| format!("cell {} failed: {e}", cell_name(row.structure, row.alpha)));
            }
        }
    }
    write_rows(dir, "design.csv", &["kind", "alpha", "sequence", "weight"], &design)?;
    write_rows(
        dir,
        "objective.csv",
        &["kind", "alpha", "psi", "optimality_gap", "iterations", "converged"],
        &objective,
    )?;
    match failure {
        Some(msg) => Err(CliError::Numerical(msg)),
        None => Ok(()),
    }
}

pub fn optimize(exp: &Experiment, dir: &Path) -> Result<(), CliError> {
    let sample = prior_sample(exp)?;
    let rows = sweep(exp, &sample)?;
    write_meta(dir, exp, "optimize", json!({ "sample_size": sample.len() }))?;
    write_sweep(dir, &rows)
}

fn comparison_designs(exp: &Experiment) -> Result<Vec<(String, ApproxDesign)>, CliError> {
    let mut out = vec![];
    for &kind in &exp.catalogs {
        for d in generate_catalog(kind, &exp.layout).map_err(|e| CliError::Config(e.to_string()))? {
            out.push((d.name, d.design));
        }
    }
    out.extend(exp.designs.iter().cloned());
    if out.is_empty() {
        return Err(CliError::Config("[comparison] lists no designs".into()));
    }
    Ok(out)
}

fn efficiency_row(name: &str, s: Structure, a: f64, r: Result<EfficiencyReport, String>) -> Vec<String> {
    let (kind, alpha) = (s.name().to_string(), fmt_num(a));
    match r {
        Ok(r) => vec![
            name.to_string(),
            kind,
            alpha,
            r.eff_paper.map(fmt_num).unwrap_or_default(),
            fmt_num(r.eff_log),
            String::new(),
        ],
        Err(e) => vec![name.to_string(), kind, alpha, String::new(), String::new(), e],
    }
}

/// One row per design, structure and alpha. The reference is the optimal
/// design of each cell unless a named design is chosen.
pub fn efficiency(exp: &Experiment, dir: &Path) -> Result<(), CliError> {
    let sample = prior_sample(exp)?;
    let designs = comparison_designs(exp)?;
    let (structures, alphas) = need(&exp.cells, "correlation")?;
    let n = exp.layout.subjects();
    let base = base_model(exp)?;
    let cells: Vec<(Structure, f64)> = structures
        .iter()
        .flat_map(|&s| alphas.iter().map(move |&a| (s, a)))
        .collect();

    let optimal = match &exp.reference {
        Some(_) => None,
        None => Some(sweep(exp, &sample)?),
    };
    let references: Vec<Result<ApproxDesign, String>> = match (&optimal, &exp.reference) {
        (Some(rows), _) => rows
            .iter()
            .map(|r| r.result.as_ref().map(|o| o.design.clone()).map_err(|e| format!("reference: {e}")))
            .collect(),
        (None, Some(name)) => {
            let d = designs.iter().find(|(n, _)| n == name).expect("validated reference").1.clone();
            vec![Ok(d); cells.len()]
        }
        (None, None) => unreachable!(),
    };

    let q = base.params().contrasts();
    let m = base.params().len();
    let table: Vec<Vec<Vec<String>>> = cells
        .par_iter()
        .zip(references.par_iter())
        .map(|(&(s, a), reference)| {
            let model = base.with_working(s.with_alpha(a));
            let psi_ref = match (&model, reference) {
                (Ok(model), Ok(r)) => bayes_objective(model, r, &sample, n).map_err(|e| format!("reference: {e}")),
                (Err(e), _) => Err(e.to_string()),
                (_, Err(e)) => Err(e.clone()),
            };
            designs
                .iter()
                .map(|(name, d)| {
                    let r = psi_ref.clone().and_then(|psi_ref| {
                        let model = model.as_ref().map_err(|e| e.to_string())?;
                        let psi = bayes_objective(model, d, &sample, n).map_err(|e| e.to_string())?;
                        Ok(EfficiencyReport::from_objectives(psi, psi_ref, m, q))
                    });
                    efficiency_row(name, s, a, r)
                })
                .collect()
        })
        .collect();

    let rows: Vec<Vec<String>> = table.into_iter().flatten().collect();
    write_rows(
        dir,
        "efficiency.csv",
        &["design_name", "kind", "alpha", "eff_paper", "eff_log", "note"],
        &rows,
    )?;
    let reference = exp.reference.clone().unwrap_or_else(|| "optimal".into());
    write_meta(
        dir,
        exp,
        "efficiency",
        json!({ "sample_size": sample.len(), "reference": reference, "designs": designs.len() }),
    )?;
    match optimal {
        Some(rows) => write_sweep(dir, &rows),
        None => Ok(()),
    }
}

pub fn fit_command(exp: &Experiment, dir: &Path, data: Option<PathBuf>) -> Result<(), CliError> {
    let (config_path, structure) = exp
        .fit
        .clone()
        .unwrap_or((None, Structure::CompoundSymmetric));
    let path = data
        .or(config_path)
        .ok_or_else(|| CliError::Config("fit needs --data or [fit] dataset".into()))?;
    let result = fit_dataset(exp, &path, structure)?;
    let open = |name: &str| {
        let p = dir.join(name);
        File::create(&p)
            .map(BufWriter::new)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", p.display())))
    };
    write_fit_table(open("fit.csv")?, &result).map_err(CliError::from)?;
    write_fit_summary(open("fit_summary.csv")?, &result).map_err(CliError::from)?;
    write_meta(
        dir,
        exp,
        "fit",
        json!({ "structure": structure.name(), "converged": result.converged }),
    )
}

pub fn simulate(exp: &Experiment, dir: &Path) -> Result<(), CliError> {
    let sim = need(&exp.simulation, "simulation")?;
    let config = SimConfig {
        layout: exp.layout,
        design: sim.design.clone(),
        theta_true: DVector::from_vec(sim.theta.clone()),
        spec: exp.spec,
        truth: sim.truth,
        n: exp.layout.subjects(),
        seed: exp.seed,
        calibrate: sim.calibrate,
    };
    let data = simulate_trial(&config)?;
    let path = dir.join("dataset.csv");
    let file = File::create(&path).map_err(|e| CliError::Config(format!("cannot create {}: {e}", path.display())))?;
    write_dataset(BufWriter::new(file), &data).map_err(CliError::from)?;
    let mut extra = json!({
        "truth": sim.truth.structure.name(),
        "alpha": sim.truth.alpha,
        "calibrate": sim.calibrate,
    });
    if sim.check_replications > 0 {
        let report = empirical_variance_check(&config, sim.check_working, sim.check_replications)?;
        let names = exp.spec.param_layout(&exp.layout).names();
        let rows: Vec<Vec<String>> = names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                vec![
                    name.clone(),
                    fmt_num(report.empirical[(k, k)]),
                    fmt_num(report.model_based[(k, k)]),
                    fmt_num(report.sandwich[(k, k)]),
                    fmt_num(report.model_ratio[(k, k)]),
                    fmt_num(report.sandwich_ratio[(k, k)]),
                ]
            })
            .collect();
        write_rows(
            dir,
            "variance_check.csv",
            &["parameter", "empirical", "model_based", "sandwich", "model_ratio", "sandwich_ratio"],
            &rows,
        )?;
        if let Value::Object(m) = &mut extra {
            m.insert(
                "check".into(),
                json!({
                    "working": report.working.name(),
                    "replications": report.replications,
                    "failures": report.failures,
                    "insufficient": report.insufficient,
                    "mean_alpha": report.mean_alpha,
                    "mean_dispersion": report.mean_dispersion,
                }),
            );
        }
    }
    write_meta(dir, exp, "simulate", extra)
}

pub fn catalog(exp: &Experiment, dir: &Path) -> Result<(), CliError> {
    let kinds = if exp.catalogs.is_empty() {
        vec![CatalogKind::Lsd, CatalogKind::Wsd, CatalogKind::Epd]
    } else {
        exp.catalogs.clone()
    };
    let mut rows = vec![];
    for kind in kinds {
        for d in generate_catalog(kind, &exp.layout).map_err(|e| CliError::Config(e.to_string()))? {
            for (seq, w) in d.design.iter() {
                rows.push(vec![d.name.clone(), seq.to_string(), fmt_num(w)]);
            }
        }
    }
    write_rows(dir, "catalog.csv", &["design_name", "sequence", "weight"], &rows)?;
    write_meta(dir, exp, "catalog", json!({}))
}

