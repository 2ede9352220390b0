//! Experiment drivers.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use quasihom_core::coeff::{load_grid, sample_on_mesh, synth_channels, CoeffError, CoefficientField};
use quasihom_core::fem::{FemSpace, Problem};
use quasihom_core::mesh::build_coarse_mesh;
use quasihom_core::mesh::refine;
use quasihom_core::nfunc::NFunction;
use quasihom_core::solvers::{reference_solution, solve, SolveReport, SolverConfig, SolverError};

use crate::config::{make_nfunction, CoefficientSpec, Experiment, ProblemSpec, RunConfig};
use crate::svg::{emit_svg, PlotSpec};
use crate::table::{ResultTable, Value};
use crate::CliError;

/// Columns of every per-iteration CSV.
pub const ITERATION_COLUMNS: [&str; 11] = [
    "n",
    "energy",
    "energy_error",
    "residual_l2h",
    "alpha",
    "rho",
    "lambda",
    "c_tilde",
    "regularized",
    "bases_updated",
    "wall_time",
];

/// What a finished experiment hands back to the caller.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: ResultTable,
    pub files: Vec<PathBuf>,
}

fn solver_err(e: SolverError) -> CliError {
    match e {
        SolverError::InvalidConfig(m) => CliError::Config(m),
        e => CliError::Solver(e.to_string()),
    }
}

fn coeff_err(e: CoeffError) -> CliError {
    match e {
        CoeffError::InvalidArgument(_) | CoeffError::OutOfExtent { .. } => CliError::Config(e.to_string()),
        e => CliError::Data(e.to_string()),
    }
}

/// Loads or synthesizes the coefficient once per experiment.
pub fn load_field(spec: &CoefficientSpec) -> Result<CoefficientField, CliError> {
    match spec {
        CoefficientSpec::Mstrig => Ok(CoefficientField::Mstrig),
        CoefficientSpec::Constant(c) => CoefficientField::constant(*c).map_err(coeff_err),
        CoefficientSpec::Grid { path, rows, cols, extent } => load_grid(path, *rows, *cols, *extent).map_err(coeff_err),
        CoefficientSpec::Channels {
            count,
            contrast,
            seed,
            rows,
            cols,
        } => synth_channels(*rows, *cols, *count, *contrast, *seed).map_err(coeff_err),
    }
}

pub fn build_problem(
    spec: &ProblemSpec,
    nc: usize,
    j: usize,
    field: &CoefficientField,
    nf: NFunction,
) -> Result<Problem, CliError> {
    let d = spec.domain;
    let coarse = build_coarse_mesh(nc, nc, d.lx, d.ly).map_err(|e| CliError::Config(e.to_string()))?;
    let space = Arc::new(FemSpace::new(Arc::new(refine(&coarse, j))).map_err(|e| CliError::Solver(e.to_string()))?);
    let kappa = sample_on_mesh(field, space.mesh()).map_err(coeff_err)?;
    let load = space.load_vector(|x, y| spec.load.eval(x, y, d));
    Problem::new(space, &kappa, nf, load).map_err(|e| CliError::Solver(e.to_string()))
}

pub fn iteration_table(rep: &SolveReport) -> ResultTable {
    let mut t = ResultTable::new(&ITERATION_COLUMNS);
    for r in &rep.records {
        t.push(vec![
            r.n.into(),
            r.energy.into(),
            r.energy_error.unwrap_or(f64::NAN).into(),
            r.residual_l2h.into(),
            r.alpha.into(),
            r.rho.into(),
            r.lambda.into(),
            r.c_tilde.into(),
            r.regularized.into(),
            r.bases_updated.into(),
            r.wall_time.into(),
        ]);
    }
    t
}

fn positive(v: &Value) -> bool {
    v.as_f64().is_some_and(|x| x > 0.0 && x.is_finite())
}

/// Log-scale plots drop nonpositive samples; a plot with no samples left is
/// skipped.
fn plot(table: &ResultTable, spec: &PlotSpec, path: PathBuf, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut t = table.clone();
    if spec.log_x {
        t = t.filter(&spec.x, positive);
    }
    if spec.log_y {
        t = t.filter(&spec.y, positive);
    }
    if t.is_empty() {
        return Ok(());
    }
    emit_svg(&t, spec, &path)?;
    files.push(path);
    Ok(())
}

fn write(table: &ResultTable, path: PathBuf, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    table.write_csv(&path)?;
    files.push(path);
    Ok(())
}

fn subdir(out: &Path, name: &str) -> Result<PathBuf, CliError> {
    let dir = out.join(name);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::output(&dir, e))?;
    Ok(dir)
}

fn with_prefix(label: &str, table: &ResultTable, column: &str) -> ResultTable {
    let mut cols = vec![column];
    cols.extend(table.columns().iter().map(String::as_str));
    let mut out = ResultTable::new(&cols);
    for row in table.rows() {
        let mut r = vec![Value::from(label)];
        r.extend(row.iter().cloned());
        out.push(r);
    }
    out
}

pub fn run_experiment(cfg: &RunConfig) -> Result<Outcome, CliError> {
    match cfg.experiment {
        Experiment::Solve => single_solve(cfg),
        Experiment::CompareMethods => compare_methods(cfg),
        Experiment::HomogenizationError => homogenization_error(cfg),
        Experiment::RegularizationStudy => regularization_study(cfg),
        Experiment::SparseUpdateStudy => sparse_update_study(cfg),
    }
}

fn reference(pb: &Problem, wanted: bool) -> Result<Option<(Vec<f64>, f64)>, CliError> {
    if wanted {
        reference_solution(pb).map(Some).map_err(solver_err)
    } else {
        Ok(None)
    }
}

/// `(H¹ error, energy error)` against the reference, NaN without one.
fn errors(pb: &Problem, rep: &SolveReport, reference: Option<&(Vec<f64>, f64)>) -> (f64, f64) {
    match reference {
        Some((u, j)) => (pb.space().error_norms(&rep.u, u, 2.0).0, rep.final_energy() - j),
        None => (f64::NAN, f64::NAN),
    }
}

fn start(cfg: &RunConfig, pb: &Problem) -> Option<Vec<f64>> {
    cfg.zero_start.then(|| vec![0.0; pb.space().dim()])
}

fn single_solve(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let spec = &cfg.problem;
    let field = load_field(&spec.coefficient)?;
    let pb = build_problem(spec, spec.nc, spec.j, &field, spec.nfunc)?;
    let r = reference(&pb, cfg.reference)?;
    let rep = solve(&pb, start(cfg, &pb), &cfg.solver, r.as_ref().map(|r| r.1)).map_err(solver_err)?;
    let (h1, err) = errors(&pb, &rep, r.as_ref());

    let mut files = Vec::new();
    let iters = iteration_table(&rep);
    write(&iters, cfg.out.join("iterations.csv"), &mut files)?;
    let mut summary = ResultTable::new(&[
        "iterations",
        "converged",
        "termination",
        "final_energy",
        "energy_error",
        "h1_error",
        "update_fraction",
    ]);
    summary.push(vec![
        (rep.records.len() - 1).into(),
        rep.converged.into(),
        rep.termination.name().into(),
        rep.final_energy().into(),
        err.into(),
        h1.into(),
        rep.update_fraction().into(),
    ]);
    write(&summary, cfg.out.join("summary.csv"), &mut files)?;
    let y = if r.is_some() { "energy_error" } else { "residual_l2h" };
    plot(
        &iters,
        &PlotSpec::new(&format!("{} iteration, p = {}", cfg.solver.method.name(), spec.nfunc.p()), "n", y).log_y(),
        cfg.out.join("iterations.svg"),
        &mut files,
    )?;
    Ok(Outcome { summary, files })
}

fn compare_methods(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let spec = &cfg.problem;
    let field = load_field(&spec.coefficient)?;
    let pb = build_problem(spec, spec.nc, spec.j, &field, spec.nfunc)?;
    let r = reference(&pb, cfg.reference)?;
    let jref = r.as_ref().map(|r| r.1);
    let reports = cfg
        .methods
        .par_iter()
        .map(|&m| {
            let solver = SolverConfig { method: m, ..cfg.solver.clone() };
            solve(&pb, start(cfg, &pb), &solver, jref).map_err(solver_err)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut files = Vec::new();
    let mut all = Vec::new();
    let mut summary = ResultTable::new(&[
        "method",
        "iterations",
        "converged",
        "termination",
        "final_energy",
        "energy_error",
        "h1_error",
    ]);
    for (m, rep) in cfg.methods.iter().zip(&reports) {
        let iters = iteration_table(rep);
        write(&iters, subdir(&cfg.out, m.name())?.join("iterations.csv"), &mut files)?;
        all.push(with_prefix(m.name(), &iters, "method"));
        let (h1, err) = errors(&pb, rep, r.as_ref());
        summary.push(vec![
            m.name().into(),
            (rep.records.len() - 1).into(),
            rep.converged.into(),
            rep.termination.name().into(),
            rep.final_energy().into(),
            err.into(),
            h1.into(),
        ]);
    }
    let all = ResultTable::concat(&all);
    write(&all, cfg.out.join("iterations.csv"), &mut files)?;
    write(&summary, cfg.out.join("summary.csv"), &mut files)?;
    let y = if r.is_some() { "energy_error" } else { "residual_l2h" };
    plot(
        &all,
        &PlotSpec::new(&format!("iterative methods, p = {}", spec.nfunc.p()), "n", y).group("method").log_y(),
        cfg.out.join("methods.svg"),
        &mut files,
    )?;
    Ok(Outcome { summary, files })
}

fn homogenization_error(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let spec = &cfg.problem;
    let field = load_field(&spec.coefficient)?;
    let runs = cfg
        .levels
        .par_iter()
        .map(|&(nc, j)| {
            let pb = build_problem(spec, nc, j, &field, spec.nfunc)?;
            let r = reference_solution(&pb).map_err(solver_err)?;
            let rep = solve(&pb, Some(vec![0.0; pb.space().dim()]), &cfg.solver, Some(r.1)).map_err(solver_err)?;
            let (h1, err) = errors(&pb, &rep, Some(&r));
            let norm = pb.space().error_norms(&r.0, &vec![0.0; r.0.len()], 2.0).0;
            Ok((nc, j, rep, h1, h1 / norm, err))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut files = Vec::new();
    let mut summary = ResultTable::new(&[
        "nc",
        "j",
        "coarse_h",
        "h1_error",
        "h1_relative",
        "energy_error",
        "iterations",
        "converged",
    ]);
    let mut long = ResultTable::new(&["quantity", "coarse_h", "error"]);
    for (nc, j, rep, h1, rel, err) in &runs {
        let h = spec.domain.lx / *nc as f64;
        write(
            &iteration_table(rep),
            subdir(&cfg.out, &format!("nc{nc}_j{j}"))?.join("iterations.csv"),
            &mut files,
        )?;
        summary.push(vec![
            (*nc).into(),
            (*j).into(),
            h.into(),
            (*h1).into(),
            (*rel).into(),
            (*err).into(),
            (rep.records.len() - 1).into(),
            rep.converged.into(),
        ]);
        long.push(vec!["h1_error".into(), h.into(), (*h1).into()]);
        long.push(vec!["energy_error".into(), h.into(), (*err).into()]);
    }
    write(&summary, cfg.out.join("summary.csv"), &mut files)?;
    plot(
        &long,
        &PlotSpec::new(&format!("coarse error vs H, p = {}", spec.nfunc.p()), "coarse_h", "error")
            .group("quantity")
            .log_x()
            .log_y(),
        cfg.out.join("errors.svg"),
        &mut files,
    )?;
    Ok(Outcome { summary, files })
}

fn regularization_study(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let spec = &cfg.problem;
    let (p, kind) = (spec.nfunc.p(), spec.nfunc.kind());
    let field = load_field(&spec.coefficient)?;
    let exact = build_problem(spec, spec.nc, spec.j, &field, NFunction::power(p).expect("p was validated"))?;
    let (u_p, j_p) = reference_solution(&exact).map_err(solver_err)?;
    let rows = cfg
        .eps_sweep
        .par_iter()
        .map(|&e| {
            let nf = make_nfunction(kind, p, e, spec.nfunc.eps_plus())?;
            let pb = exact.with_nfunction(nf);
            let (u, j) = reference_solution(&pb).map_err(solver_err)?;
            let (h1, lp) = pb.space().error_norms(&u, &u_p, p);
            Ok((e, nf.eps_minus(), (j_p - j).abs(), h1, lp))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut files = Vec::new();
    let mut summary = ResultTable::new(&["eps_minus_pow", "eps_minus", "energy_gap", "h1_distance", "lp_distance"]);
    for (e, em, gap, h1, lp) in rows {
        summary.push(vec![e.into(), em.into(), gap.into(), h1.into(), lp.into()]);
    }
    write(&summary, cfg.out.join("summary.csv"), &mut files)?;
    plot(
        &summary,
        &PlotSpec::new(&format!("regularization error, p = {p}"), "eps_minus_pow", "energy_gap").log_x().log_y(),
        cfg.out.join("energy_gap.svg"),
        &mut files,
    )?;
    Ok(Outcome { summary, files })
}

fn sparse_update_study(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let spec = &cfg.problem;
    let field = load_field(&spec.coefficient)?;
    let pb = build_problem(spec, spec.nc, spec.j, &field, spec.nfunc)?;
    let r = reference_solution(&pb).map_err(solver_err)?;
    let norm = pb.space().error_norms(&r.0, &vec![0.0; r.0.len()], 2.0).0;
    let reports = cfg
        .thresholds
        .par_iter()
        .map(|&d| {
            let solver = SolverConfig {
                sparse_update_threshold: d,
                ..cfg.solver.clone()
            };
            solve(&pb, start(cfg, &pb), &solver, Some(r.1)).map_err(solver_err)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut files = Vec::new();
    let mut summary = ResultTable::new(&[
        "threshold",
        "update_fraction",
        "basis_updates",
        "iterations",
        "converged",
        "h1_relative",
        "energy_error",
    ]);
    for (k, (d, rep)) in cfg.thresholds.iter().zip(&reports).enumerate() {
        write(
            &iteration_table(rep),
            subdir(&cfg.out, &format!("run{k}_threshold_{d}"))?.join("iterations.csv"),
            &mut files,
        )?;
        let (h1, err) = errors(&pb, rep, Some(&r));
        summary.push(vec![
            (*d).into(),
            rep.update_fraction().into(),
            rep.basis_updates.into(),
            (rep.records.len() - 1).into(),
            rep.converged.into(),
            (h1 / norm).into(),
            err.into(),
        ]);
    }
    write(&summary, cfg.out.join("summary.csv"), &mut files)?;
    let title = format!("sparse updating, p = {}", spec.nfunc.p());
    plot(
        &summary,
        &PlotSpec::new(&title, "threshold", "h1_relative").log_y(),
        cfg.out.join("error.svg"),
        &mut files,
    )?;
    plot(
        &summary,
        &PlotSpec::new(&title, "threshold", "update_fraction"),
        cfg.out.join("update_fraction.svg"),
        &mut files,
    )?;
    Ok(Outcome { summary, files })
}
