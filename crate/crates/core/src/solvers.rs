//! Nonlinear iterations: fine-space descent methods and the iterated
//! numerical homogenization scheme with residual-regularized line search and
//! sparse basis updating.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use thiserror::Error;

use crate::fem::{FemError, FemState, LinMode, LinearizedOperator, Problem};
use crate::grps::{
    build_measurements, cache_file_name, coarse_solve, compute_basis, default_layers, update_indicator, CoarseSpace,
    GrpsError, MeasurementSet,
};
use crate::sparsela::{axpy, dot, solve_spd, SparseError, DEFAULT_TOL};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("direction is not a descent direction (J'(u)w = {0:e})")]
    NoDescent(f64),
    #[error("line search found no decrease")]
    LineSearchFailure,
    #[error("could not bracket the scaling constant")]
    Bracketing,
    #[error(transparent)]
    Linear(#[from] SparseError),
    #[error(transparent)]
    Grps(#[from] GrpsError),
    #[error(transparent)]
    Fem(#[from] FemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Gd,
    Pgd,
    Newton,
    Quasinorm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gd => "gd",
            Method::Pgd => "pgd",
            Method::Newton => "newton",
            Method::Quasinorm => "quasinorm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gd" => Some(Method::Gd),
            "pgd" => Some(Method::Pgd),
            "newton" => Some(Method::Newton),
            "quasinorm" => Some(Method::Quasinorm),
            _ => None,
        }
    }

    /// Operator that defines the direction; the quasi-norm method uses the
    /// secant operator for its auxiliary quantities.
    pub fn lin_mode(self) -> LinMode {
        match self {
            Method::Gd => LinMode::Gd,
            Method::Pgd | Method::Quasinorm => LinMode::Pgd,
            Method::Newton => LinMode::Newton,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceKind {
    Fine,
    Coarse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineSearch {
    /// Full step `α = 1`.
    None,
    Plain,
    ResidualRegularized,
}

impl LineSearch {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(LineSearch::None),
            "plain" => Some(LineSearch::Plain),
            "residual_regularized" | "regularized" => Some(LineSearch::ResidualRegularized),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LineSearch::None => "none",
            LineSearch::Plain => "plain",
            LineSearch::ResidualRegularized => "residual_regularized",
        }
    }
}

/// Support of the coarse basis functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Localization {
    /// `max(2, ⌈log₂(1/H)⌉)` layers.
    Auto,
    Global,
    Layers(usize),
}

impl Localization {
    pub fn resolve(self, coarse_h: f64) -> Option<usize> {
        match self {
            Localization::Auto => Some(default_layers(coarse_h)),
            Localization::Global => None,
            Localization::Layers(l) => Some(l),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub space: SpaceKind,
    /// Relative energy decrease below which the iteration stops.
    pub tol: f64,
    pub max_iters: usize,
    pub line_search: LineSearch,
    /// `ρ` threshold that switches the residual regularization off.
    pub delta: f64,
    /// Bases with update indicator below this value are kept; `0` updates all.
    pub sparse_update_threshold: f64,
    pub inner_tol: f64,
    pub inner_max: usize,
    pub localization: Localization,
    /// Scaling of the quasi-norm direction.
    pub c_q: f64,
    pub alpha_max: f64,
    /// Also estimate `C̃_n` each iteration (one extra fine solve).
    pub estimate_cn: bool,
    pub cache_dir: Option<PathBuf>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Newton,
            space: SpaceKind::Fine,
            tol: 1e-15,
            max_iters: 100,
            line_search: LineSearch::Plain,
            delta: 0.68,
            sparse_update_threshold: 0.0,
            inner_tol: 1e-10,
            inner_max: 100,
            localization: Localization::Auto,
            c_q: 2.0,
            alpha_max: 4.0,
            estimate_cn: false,
            cache_dir: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if !(self.delta > 0.5 && self.delta < 1.0) {
            return bad("delta must lie in (0.5, 1)");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if !(self.sparse_update_threshold >= 0.0) {
            return bad("sparse_update_threshold must be nonnegative");
        }
        if !(self.inner_tol > 0.0) || self.inner_max == 0 {
            return bad("inner_tol must be positive and inner_max at least 1");
        }
        if !(self.c_q > 0.0) {
            return bad("c_q must be positive");
        }
        if !(self.alpha_max >= 1.0) {
            return bad("alpha_max must be at least 1");
        }
        if self.space == SpaceKind::Coarse && self.method == Method::Quasinorm {
            return bad("the quasi-norm method runs on the fine space only");
        }
        if self.localization == Localization::Layers(0) {
            return bad("localization needs at least one layer");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub n: usize,
    pub energy: f64,
    /// `J(u⁽ⁿ⁾) − J_ref` when a reference energy is supplied.
    pub energy_error: Option<f64>,
    pub residual_l2h: f64,
    /// Step, indicator and penalty of the step that produced `u⁽ⁿ⁾`; NaN for
    /// the initial record.
    pub alpha: f64,
    pub rho: f64,
    pub lambda: f64,
    /// Scaling estimate at `u⁽ⁿ⁻¹⁾`; NaN when not requested.
    pub c_tilde: f64,
    pub regularized: bool,
    pub bases_updated: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Tolerance,
    MaxIterations,
    /// Zero residual or no descent available from the current state.
    Stationary,
    LineSearchFailure,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::Tolerance => "tolerance",
            Termination::MaxIterations => "max_iterations",
            Termination::Stationary => "stationary",
            Termination::LineSearchFailure => "line_search_failure",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub records: Vec<IterationRecord>,
    pub u: Vec<f64>,
    pub converged: bool,
    pub termination: Termination,
    /// Basis recomputations after the first build, and the number possible.
    pub basis_updates: usize,
    pub basis_update_slots: usize,
}

impl SolveReport {
    pub fn final_energy(&self) -> f64 {
        self.records.last().expect("records are nonempty").energy
    }

    /// Fraction of bases recomputed over iterations `n ≥ 1`; 1 when no such
    /// iteration ran.
    pub fn update_fraction(&self) -> f64 {
        if self.basis_update_slots == 0 {
            1.0
        } else {
            self.basis_updates as f64 / self.basis_update_slots as f64
        }
    }
}

/// Solution of the `κ`-weighted linear problem, the default initial guess.
pub fn poisson_initial_guess(pb: &Problem) -> Result<Vec<f64>, SolverError> {
    Ok(solve_spd(&pb.kappa_stiffness(), pb.load(), 1e-12)?)
}

/// Solves `A[u] w = −J′(u)` on the fine space for the operator of `method`.
pub fn search_direction(pb: &Problem, s: &FemState, method: Method) -> Result<Vec<f64>, SolverError> {
    let r = pb.residual(s);
    let a = pb.linearize(s, method.lin_mode());
    fine_direction(&a, &r)
}

fn fine_direction(a: &LinearizedOperator, r: &[f64]) -> Result<Vec<f64>, SolverError> {
    let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
    if rhs.iter().all(|&x| x == 0.0) {
        return Ok(rhs);
    }
    Ok(solve_spd(&a.matrix, &rhs, DEFAULT_TOL)?)
}

/// Result of the quasi-norm direction solve.
#[derive(Debug, Clone)]
pub struct QuasinormDirection {
    pub w: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Derivative at `w` in direction `d` of the convex functional
/// `F(w) = C_q Σ_T area κ Ψ(|∇w|) + rᵀw`, `Ψ′(s) = s φ″(|∇u| + s)`, whose
/// minimizer is the quasi-norm direction.
fn quasinorm_slope(pb: &Problem, s: &FemState, r: &[f64], c_q: f64, w: &[f64], d: &[f64]) -> f64 {
    let sp = pb.space();
    let gw = sp.gradients(w);
    let gd = sp.gradients(d);
    let flux: f64 = gw
        .iter()
        .zip(&gd)
        .enumerate()
        .map(|(t, (a, b))| {
            sp.areas()[t] * pb.kappa()[t] * pb.nf().ddphi(s.grad_norms()[t] + a[0].hypot(a[1])) * (a[0] * b[0] + a[1] * b[1])
        })
        .sum();
    c_q * flux + dot(r, d)
}

/// Solves `C_q ∫ κ φ″(|∇u|+|∇w|) ∇w·∇v = −J′(u)(v)` by frozen-coefficient
/// iteration from `w = 0`. Each update is damped by a line search on the
/// convex functional the relation is the optimality condition of.
pub fn quasinorm_direction(pb: &Problem, s: &FemState, c_q: f64, tol: f64, max_iter: usize) -> Result<QuasinormDirection, SolverError> {
    let sp = pb.space();
    let r = pb.residual(s);
    let n = sp.dim();
    let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
    if rhs.iter().all(|&x| x == 0.0) {
        return Ok(QuasinormDirection {
            w: vec![0.0; n],
            iterations: 0,
            converged: true,
        });
    }
    let mut w = vec![0.0; n];
    for k in 1..=max_iter {
        let gw = sp.gradients(&w);
        let weights: Vec<f64> = gw
            .iter()
            .enumerate()
            .map(|(t, g)| c_q * pb.kappa()[t] * pb.nf().ddphi(s.grad_norms()[t] + g[0].hypot(g[1])))
            .collect();
        let a = sp.assemble_weighted(&weights, None);
        let next = solve_spd(&a, &rhs, DEFAULT_TOL)?;
        let d: Vec<f64> = next.iter().zip(&w).map(|(a, b)| a - b).collect();
        let step_norm = dot(&a.matvec(&d), &d).sqrt();
        let next_norm = dot(&a.matvec(&next), &next).sqrt();
        // exact line search on F along d: F is convex, so bisect its slope
        let slope = |tau: f64| {
            let wt: Vec<f64> = w.iter().zip(&d).map(|(a, b)| a + tau * b).collect();
            quasinorm_slope(pb, s, &r, c_q, &wt, &d)
        };
        let tau = if slope(1.0) <= 0.0 {
            1.0
        } else {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if slope(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        };
        axpy(tau, &d, &mut w);
        if step_norm <= tol * next_norm {
            return Ok(QuasinormDirection {
                w,
                iterations: k,
                converged: true,
            });
        }
    }
    Ok(QuasinormDirection {
        w,
        iterations: max_iter,
        converged: false,
    })
}

/// Defect of the quasi-norm relation for `w`, relative to `‖J′(u)‖`.
pub fn quasinorm_defect(pb: &Problem, s: &FemState, c_q: f64, w: &[f64]) -> f64 {
    let sp = pb.space();
    let gw = sp.gradients(w);
    let weights: Vec<f64> = gw
        .iter()
        .enumerate()
        .map(|(t, g)| c_q * pb.kappa()[t] * pb.nf().ddphi(s.grad_norms()[t] + g[0].hypot(g[1])))
        .collect();
    let r = pb.residual(s);
    let mut d = sp.assemble_weighted(&weights, None).matvec(w);
    for (x, ri) in d.iter_mut().zip(&r) {
        *x += ri;
    }
    sp.residual_l2h(&d) / sp.residual_l2h(&r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchResult {
    pub alpha: f64,
    /// Actual over predicted decrease, `(E(α) − E(0))/(α g)` with
    /// `g = J′(u)(w)`. Equals `1/2` at the exact step of a quadratic.
    pub rho: f64,
    /// Penalty weight; zero for the plain search.
    pub lambda: f64,
    pub energy: f64,
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;
const FD_STEP: f64 = 1e-6;

/// Minimizes `f` over `α ∈ (0, alpha_max]` starting from the unit step:
/// halving until `f` drops below `f(0)`, doubling while it keeps
/// decreasing, then golden-section search to relative width `1e−6`.
fn minimize_1d<F: FnMut(f64) -> f64>(mut f: F, f0: f64, alpha_max: f64) -> Option<(f64, f64)> {
    let mut a = 1.0f64.min(alpha_max);
    let mut fa = f(a);
    let (lo, hi);
    if !(fa < f0) {
        let mut found = false;
        for _ in 0..60 {
            a *= 0.5;
            fa = f(a);
            if fa < f0 {
                found = true;
                break;
            }
        }
        if !found {
            return None;
        }
        lo = 0.0;
        hi = 2.0 * a;
    } else {
        let mut prev = 0.0;
        loop {
            if a >= alpha_max {
                lo = prev;
                hi = alpha_max;
                break;
            }
            let b = (2.0 * a).min(alpha_max);
            let fb = f(b);
            if fb < fa {
                prev = a;
                a = b;
                fa = fb;
            } else {
                lo = prev;
                hi = b;
                break;
            }
        }
    }
    let (mut best_a, mut best_f) = (a, fa);
    let (mut x0, mut x1) = (lo, hi);
    let mut c = x1 - GOLDEN * (x1 - x0);
    let mut d = x0 + GOLDEN * (x1 - x0);
    let (mut fc, mut fd) = (f(c), f(d));
    while x1 - x0 > 1e-6 * 0.5 * (x0 + x1) {
        if fc < fd {
            x1 = d;
            d = c;
            fd = fc;
            c = x1 - GOLDEN * (x1 - x0);
            fc = f(c);
        } else {
            x0 = c;
            c = d;
            fc = fd;
            d = x0 + GOLDEN * (x1 - x0);
            fd = f(d);
        }
    }
    for (x, fx) in [(c, fc), (d, fd)] {
        if fx < best_f {
            best_a = x;
            best_f = fx;
        }
    }
    Some((best_a, best_f))
}

fn rho_of(e0: f64, ea: f64, alpha: f64, g: f64) -> f64 {
    (ea - e0) / (alpha * g)
}

/// Step length along a descent direction `w`.
pub fn line_search(pb: &Problem, s: &FemState, w: &[f64], mode: LineSearch, alpha_max: f64) -> Result<LineSearchResult, SolverError> {
    let sp = pb.space();
    let r = pb.residual(s);
    let g = dot(&r, w);
    if !(g < 0.0) {
        return Err(SolverError::NoDescent(g));
    }
    let e0 = pb.energy(s);
    let energy = |a: f64| pb.energy(&s.step(sp, a, w));
    let (alpha, lambda) = match mode {
        LineSearch::None => (1.0, 0.0),
        LineSearch::Plain => {
            let (a, _) = minimize_1d(energy, e0, alpha_max).ok_or(SolverError::LineSearchFailure)?;
            (a, 0.0)
        }
        LineSearch::ResidualRegularized => {
            let res = |a: f64| {
                let r = pb.residual(&s.step(sp, a, w));
                let n = sp.residual_l2h(&r);
                n * n
            };
            let de = (energy(FD_STEP) - energy(-FD_STEP)) / (2.0 * FD_STEP);
            let dr = (res(FD_STEP) - res(-FD_STEP)) / (2.0 * FD_STEP);
            let lambda = if dr == 0.0 { 0.0 } else { de.abs() / dr.abs() };
            let r0 = res(0.0);
            let merit = |a: f64| energy(a) + lambda * res(a);
            let (a, _) = minimize_1d(merit, e0 + lambda * r0, alpha_max).ok_or(SolverError::LineSearchFailure)?;
            (a, lambda)
        }
    };
    let ea = energy(alpha);
    Ok(LineSearchResult {
        alpha,
        rho: rho_of(e0, ea, alpha, g),
        lambda,
        energy: ea,
    })
}

/// Root `C̃` of `C A[u](w₀,w₀) = ∫ κ φ″(|∇u| + |∇w₀|/C)|∇w₀|²`, by bisection
/// in `log C` on `[1e−6, 1e12]`.
pub fn estimate_cn(pb: &Problem, s: &FemState, a: &LinearizedOperator, w0: &[f64]) -> Result<f64, SolverError> {
    let sp = pb.space();
    let aw = dot(&a.matrix.matvec(w0), w0);
    if !(aw > 0.0) {
        return Err(SolverError::Bracketing);
    }
    let gw = sp.gradients(w0);
    let rhs = |c: f64| -> f64 {
        gw.iter()
            .enumerate()
            .map(|(t, g)| {
                let nw2 = g[0] * g[0] + g[1] * g[1];
                sp.areas()[t] * pb.kappa()[t] * pb.nf().ddphi(s.grad_norms()[t] + nw2.sqrt() / c) * nw2
            })
            .sum()
    };
    let gap = |c: f64| c * aw - rhs(c);
    let g1 = gap(1.0);
    if g1.abs() <= 1e-12 * aw {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (1e-6f64.ln(), 1e12f64.ln());
    if gap(lo.exp()) > 0.0 || gap(hi.exp()) < 0.0 {
        return Err(SolverError::Bracketing);
    }
    while hi - lo > 1e-8 {
        let mid = 0.5 * (lo + hi);
        if gap(mid.exp()) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

struct CoarseState {
    meas: MeasurementSet,
    layers: Option<usize>,
    space: Option<CoarseSpace>,
}

impl CoarseState {
    fn full_build(&mut self, pb: &Problem, a: &LinearizedOperator, cfg: &SolverConfig) -> Result<(), SolverError> {
        let sp = pb.space();
        let mesh_fp = sp.mesh().fingerprint();
        let path = cfg
            .cache_dir
            .as_ref()
            .map(|d| d.join(cache_file_name(mesh_fp, a.fingerprint, self.layers)));
        if let Some(p) = &path {
            if let Ok(cs) = CoarseSpace::load(p, sp) {
                if cs.layers == self.layers && cs.built_from.iter().all(|&f| f == a.fingerprint) {
                    self.space = Some(cs);
                    return Ok(());
                }
            }
        }
        let cs = compute_basis(a, &self.meas, sp, self.layers)?;
        if let Some(p) = &path {
            // a failed cache write is ignored
            let _ = std::fs::create_dir_all(p.parent().expect("cache file has a directory"));
            let _ = cs.save(p, mesh_fp);
        }
        self.space = Some(cs);
        Ok(())
    }
}

/// Runs the configured iteration from `u0` (default: the `κ`-Poisson
/// solution). `reference` is the energy of the discrete minimizer, used for
/// the energy-error column.
pub fn solve(pb: &Problem, u0: Option<Vec<f64>>, cfg: &SolverConfig, reference: Option<f64>) -> Result<SolveReport, SolverError> {
    cfg.validate()?;
    let sp = pb.space();
    let start = Instant::now();
    let u0 = match u0 {
        Some(u) => u,
        None => poisson_initial_guess(pb)?,
    };
    let mut s = pb.state(u0)?;
    let mut e = pb.energy(&s);
    let record = |n, e: f64, s: &FemState, ls: Option<LineSearchResult>, c_tilde, regularized, updated| IterationRecord {
        n,
        energy: e,
        energy_error: reference.map(|r| e - r),
        residual_l2h: sp.residual_l2h(&pb.residual(s)),
        alpha: ls.map_or(f64::NAN, |l| l.alpha),
        rho: ls.map_or(f64::NAN, |l| l.rho),
        lambda: ls.map_or(f64::NAN, |l| l.lambda),
        c_tilde,
        regularized,
        bases_updated: updated,
        wall_time: start.elapsed().as_secs_f64(),
    };
    let mut records = vec![record(0, e, &s, None, f64::NAN, false, 0)];
    let mut regularize = cfg.line_search == LineSearch::ResidualRegularized;
    let mut coarse = match cfg.space {
        SpaceKind::Fine => None,
        SpaceKind::Coarse => Some(CoarseState {
            meas: build_measurements(sp)?,
            layers: cfg.localization.resolve(sp.mesh().coarse_hx()),
            space: None,
        }),
    };
    // iterate each basis was last rebuilt at, and the iterates still referenced
    let mut built_at: Vec<usize> = Vec::new();
    let mut history: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut basis_updates = 0;
    let mut basis_update_slots = 0;
    let mode = cfg.method.lin_mode();

    let mut termination = Termination::MaxIterations;
    let mut converged = false;
    for n in 0..cfg.max_iters {
        let r = pb.residual(&s);
        let mut updated = 0;
        let mut a_used = None;
        let w = match (&mut coarse, cfg.method) {
            (None, Method::Quasinorm) => quasinorm_direction(pb, &s, cfg.c_q, cfg.inner_tol, cfg.inner_max)?.w,
            (None, _) => {
                let a = pb.linearize(&s, mode);
                let w = fine_direction(&a, &r)?;
                a_used = Some(a);
                w
            }
            (Some(cs), _) => {
                let a = pb.linearize(&s, mode);
                match &mut cs.space {
                    Some(space) => {
                        let m = space.num_bases();
                        let which: Vec<usize> = if cfg.sparse_update_threshold <= 0.0 {
                            (0..m).collect()
                        } else {
                            let mut which = Vec::new();
                            for (&k, uk) in &history {
                                let incr: Vec<f64> = s.u().iter().zip(uk).map(|(a, b)| a - b).collect();
                                let a_incr = pb.linearize(&pb.state(incr)?, mode);
                                which.extend((0..m).filter(|&i| {
                                    built_at[i] == k
                                        && update_indicator(&a_incr, &space.bases[i]) >= cfg.sparse_update_threshold
                                }));
                            }
                            which.sort_unstable();
                            which
                        };
                        space.update(&a, &cs.meas, &which)?;
                        if space.layers.is_none() {
                            built_at.iter_mut().for_each(|k| *k = n);
                        } else {
                            which.iter().for_each(|&i| built_at[i] = n);
                        }
                        updated = if space.layers.is_none() { m } else { which.len() };
                        basis_updates += updated;
                        basis_update_slots += m;
                    }
                    None => {
                        cs.full_build(pb, &a, cfg)?;
                        updated = cs.space.as_ref().map_or(0, |c| c.num_bases());
                        built_at = vec![n; updated];
                    }
                }
                if cfg.sparse_update_threshold > 0.0 {
                    history.retain(|k, _| built_at.contains(k));
                    if built_at.contains(&n) {
                        history.insert(n, s.u().to_vec());
                    }
                }
                let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
                let w = coarse_solve(&a, &rhs, cs.space.as_ref().expect("built above"))?;
                a_used = Some(a);
                w
            }
        };
        let c_tilde = if cfg.estimate_cn {
            let a = match a_used.take() {
                Some(a) => a,
                None => pb.linearize(&s, mode),
            };
            let w0 = fine_direction(&a, &r)?;
            if w0.iter().all(|&x| x == 0.0) {
                f64::NAN
            } else {
                estimate_cn(pb, &s, &a, &w0).unwrap_or(f64::NAN)
            }
        } else {
            f64::NAN
        };

        let g = dot(&r, &w);
        let scale = e.abs().max(f64::MIN_POSITIVE);
        if !(g < 0.0) {
            // no descent left: the state is stationary up to rounding
            records.push(record(n + 1, e, &s, None, c_tilde, regularize, updated));
            converged = g.abs() <= 1e-10 * scale;
            termination = Termination::Stationary;
            break;
        }
        let ls_mode = match cfg.line_search {
            LineSearch::ResidualRegularized if !regularize => LineSearch::Plain,
            m => m,
        };
        let used_reg = ls_mode == LineSearch::ResidualRegularized;
        let ls = match line_search(pb, &s, &w, ls_mode, cfg.alpha_max) {
            Ok(ls) => ls,
            Err(SolverError::LineSearchFailure) => {
                records.push(record(n + 1, e, &s, None, c_tilde, used_reg, updated));
                converged = -g <= 1e-10 * scale;
                termination = if converged {
                    Termination::Stationary
                } else {
                    Termination::LineSearchFailure
                };
                break;
            }
            Err(err) => return Err(err),
        };
        if used_reg && ls.rho <= cfg.delta {
            regularize = false;
        }
        let next = s.step(sp, ls.alpha, &w);
        let e_next = ls.energy;
        s = next;
        let decrease = (e - e_next) / scale;
        e = e_next;
        records.push(record(n + 1, e, &s, Some(ls), c_tilde, used_reg, updated));
        if decrease < cfg.tol {
            // a full step that raised the energy is not convergence
            converged = decrease > -1e-12;
            termination = Termination::Tolerance;
            break;
        }
    }
    Ok(SolveReport {
        records,
        u: s.into_vec(),
        converged,
        termination,
        basis_updates,
        basis_update_slots,
    })
}

/// Fine Newton solve to `tol = 1e−15`, used as the reference minimizer.
pub fn reference_solution(pb: &Problem) -> Result<(Vec<f64>, f64), SolverError> {
    let cfg = SolverConfig {
        method: Method::Newton,
        space: SpaceKind::Fine,
        max_iters: 200,
        ..SolverConfig::default()
    };
    let report = solve(pb, None, &cfg, None)?;
    let e = report.final_energy();
    Ok((report.u, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::coeff::{sample_on_mesh, CoefficientField};
    use crate::fem::FemSpace;
    use crate::mesh::{build_coarse_mesh, refine};
    use crate::nfunc::NFunction;

    fn problem(nc: usize, j: usize, field: CoefficientField, nf: NFunction) -> Problem {
        let mesh = Arc::new(refine(&build_coarse_mesh(nc, nc, 1.0, 1.0).unwrap(), j));
        let sp = Arc::new(FemSpace::new(mesh).unwrap());
        let k = sample_on_mesh(&field, sp.mesh()).unwrap();
        let load = sp.load_vector(|x, y| (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin());
        Problem::new(sp, &k, nf, load).unwrap()
    }

    fn mstrig(nc: usize, j: usize, p: f64) -> Problem {
        problem(nc, j, CoefficientField::Mstrig, NFunction::default_regularized(p).unwrap())
    }

    fn random_state(pb: &Problem, rng: &mut ChaCha8Rng, scale: f64) -> FemState {
        let u = (0..pb.space().dim()).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        pb.state(u).unwrap()
    }

    #[test]
    fn directions_descend() {
        let pb = mstrig(4, 3, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let s = random_state(&pb, &mut rng, 0.05);
            let r = pb.residual(&s);
            for m in [Method::Gd, Method::Pgd, Method::Newton] {
                let w = search_direction(&pb, &s, m).unwrap();
                assert!(dot(&r, &w) < 0.0, "{}", m.name());
            }
            let q = quasinorm_direction(&pb, &s, 2.0, 1e-10, 100).unwrap();
            assert!(dot(&r, &q.w) < 0.0);
        }
    }

    #[test]
    fn direction_vanishes_at_minimizer() {
        let pb = mstrig(4, 2, 5.0);
        let (u, _) = reference_solution(&pb).unwrap();
        let s = pb.state(u.clone()).unwrap();
        let w = search_direction(&pb, &s, Method::Newton).unwrap();
        let a = pb.linearize(&s, LinMode::Newton);
        let wn = dot(&a.matrix.matvec(&w), &w).sqrt();
        let un = dot(&a.matrix.matvec(&u), &u).sqrt();
        assert!(wn <= 1e-8 * un, "{wn} vs {un}");
    }

    #[test]
    fn linear_newton_step_is_exact() {
        let pb = problem(4, 2, CoefficientField::Mstrig, NFunction::power(2.0).unwrap());
        let s = pb.state(vec![0.0; pb.space().dim()]).unwrap();
        let w = search_direction(&pb, &s, Method::Newton).unwrap();
        let exact = solve_spd(&pb.kappa_stiffness(), pb.load(), 1e-12).unwrap();
        for (a, b) in w.iter().zip(&exact) {
            assert!((a - b).abs() <= 1e-9 * exact.iter().fold(0.0f64, |m, x| m.max(x.abs())));
        }
        let ls = line_search(&pb, &s, &w, LineSearch::Plain, 4.0).unwrap();
        assert!((ls.alpha - 1.0).abs() < 1e-5, "{}", ls.alpha);
        assert!((ls.rho - 0.5).abs() < 1e-4, "{}", ls.rho);
        assert_eq!(ls.lambda, 0.0);
    }

    #[test]
    fn halving_the_direction_doubles_the_step() {
        let pb = problem(4, 2, CoefficientField::Mstrig, NFunction::power(2.0).unwrap());
        let s = pb.state(vec![0.0; pb.space().dim()]).unwrap();
        let w = search_direction(&pb, &s, Method::Gd).unwrap();
        let half: Vec<f64> = w.iter().map(|x| 0.5 * x).collect();
        let a = line_search(&pb, &s, &w, LineSearch::Plain, 4.0).unwrap().alpha;
        let b = line_search(&pb, &s, &half, LineSearch::Plain, 8.0).unwrap().alpha;
        assert!(a < 2.0);
        assert!((b / a - 2.0).abs() < 1e-5, "{a} {b}");
    }

    #[test]
    fn ascent_direction_is_rejected() {
        let pb = mstrig(2, 2, 5.0);
        let s = pb.state(vec![0.0; pb.space().dim()]).unwrap();
        let w: Vec<f64> = search_direction(&pb, &s, Method::Newton).unwrap().iter().map(|x| -x).collect();
        assert!(matches!(line_search(&pb, &s, &w, LineSearch::Plain, 4.0), Err(SolverError::NoDescent(_))));
    }

    #[test]
    fn quadratic_quasinorm_direction() {
        let pb = problem(4, 2, CoefficientField::Mstrig, NFunction::power(2.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_state(&pb, &mut rng, 0.1);
        let q = quasinorm_direction(&pb, &s, 2.0, 1e-10, 50).unwrap();
        assert!(q.converged);
        assert!(q.iterations <= 2, "{}", q.iterations);
        let r = pb.residual(&s);
        let k2: Vec<f64> = r.iter().map(|x| -0.5 * x).collect();
        let want = solve_spd(&pb.kappa_stiffness(), &k2, 1e-12).unwrap();
        let scale = want.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in q.w.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn quasinorm_direction_at_stationary_point_is_zero() {
        let pb = problem(2, 1, CoefficientField::Mstrig, NFunction::power(5.0).unwrap());
        let sp = pb.space();
        let zero_load = Problem::new(pb.space_arc().clone(), &sample_on_mesh(&CoefficientField::Mstrig, sp.mesh()).unwrap(), NFunction::power(5.0).unwrap(), vec![0.0; sp.dim()]).unwrap();
        let s = zero_load.state(vec![0.0; sp.dim()]).unwrap();
        let q = quasinorm_direction(&zero_load, &s, 2.0, 1e-10, 10).unwrap();
        assert!(q.w.iter().all(|&x| x == 0.0));
        assert_eq!(q.iterations, 0);
    }

    #[test]
    fn quasinorm_relation_holds() {
        let pb = mstrig(4, 2, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let s = random_state(&pb, &mut rng, 0.05);
            let q = quasinorm_direction(&pb, &s, 2.0, 1e-12, 200).unwrap();
            assert!(q.converged);
            let d = quasinorm_defect(&pb, &s, 2.0, &q.w);
            assert!(d <= 1e-8, "{d}");
        }
    }

    #[test]
    fn quasinorm_steps_decrease_by_the_quasinorm() {
        let pb = mstrig(4, 2, 5.0);
        let mut s = pb.state(poisson_initial_guess(&pb).unwrap()).unwrap();
        for _ in 0..6 {
            let q = quasinorm_direction(&pb, &s, 2.0, 1e-12, 200).unwrap();
            let ls = line_search(&pb, &s, &q.w, LineSearch::Plain, 4.0).unwrap();
            let e0 = pb.energy(&s);
            let full = pb.energy(&s.step(pb.space(), 1.0, &q.w));
            let bound = 0.9 * pb.quasi_norm(&s, &q.w);
            assert!(e0 - full >= bound, "{} < {bound}", e0 - full);
            assert!(e0 - ls.energy >= bound);
            s = s.step(pb.space(), ls.alpha, &q.w);
        }
    }

    #[test]
    fn cn_is_one_for_quadratics() {
        let pb = problem(4, 2, CoefficientField::Mstrig, NFunction::power(2.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_state(&pb, &mut rng, 0.1);
        let a = pb.linearize(&s, LinMode::Newton);
        let w0 = search_direction(&pb, &s, Method::Newton).unwrap();
        assert_eq!(estimate_cn(&pb, &s, &a, &w0).unwrap(), 1.0);
        for c in [1e-3, 7.0, 1e4] {
            let scaled: Vec<f64> = w0.iter().map(|x| c * x).collect();
            assert_eq!(estimate_cn(&pb, &s, &a, &scaled).unwrap(), 1.0);
        }
    }

    #[test]
    fn cn_root_satisfies_its_equation() {
        let pb = mstrig(4, 2, 10.0);
        let s = pb.state(poisson_initial_guess(&pb).unwrap()).unwrap();
        let a = pb.linearize(&s, LinMode::Newton);
        let w0 = search_direction(&pb, &s, Method::Newton).unwrap();
        let c = estimate_cn(&pb, &s, &a, &w0).unwrap();
        assert!(c > 1.0);
        let sp = pb.space();
        let gw = sp.gradients(&w0);
        let rhs: f64 = gw
            .iter()
            .enumerate()
            .map(|(t, g)| {
                let n2 = g[0] * g[0] + g[1] * g[1];
                sp.areas()[t] * pb.kappa()[t] * pb.nf().ddphi(s.grad_norms()[t] + n2.sqrt() / c) * n2
            })
            .sum();
        let lhs = c * dot(&a.matrix.matvec(&w0), &w0);
        assert!((lhs - rhs).abs() <= 1e-6 * lhs, "{lhs} {rhs}");
    }

    #[test]
    fn linear_solve_takes_one_iteration() {
        let pb = problem(4, 2, CoefficientField::Constant(1.0), NFunction::power(2.0).unwrap());
        for m in [Method::Gd, Method::Pgd, Method::Newton, Method::Quasinorm] {
            let cfg = SolverConfig { method: m, ..Default::default() };
            let rep = solve(&pb, None, &cfg, None).unwrap();
            assert_eq!(rep.records.len(), 2, "{}", m.name());
            assert!(rep.converged, "{}", m.name());
        }
    }

    #[test]
    fn energy_decreases_monotonically() {
        let pb = mstrig(4, 2, 5.0);
        for m in [Method::Gd, Method::Pgd, Method::Newton, Method::Quasinorm] {
            let cfg = SolverConfig { method: m, max_iters: 25, ..Default::default() };
            let rep = solve(&pb, None, &cfg, None).unwrap();
            for w in rep.records.windows(2) {
                assert!(w[1].energy <= w[0].energy + 1e-14, "{} at {}", m.name(), w[1].n);
            }
        }
    }

    #[test]
    fn newton_beats_gradient_descent() {
        let pb = mstrig(4, 2, 5.0);
        let (_, jref) = reference_solution(&pb).unwrap();
        let err = |m| {
            let cfg = SolverConfig { method: m, max_iters: 20, ..Default::default() };
            let rep = solve(&pb, None, &cfg, Some(jref)).unwrap();
            rep.records.last().unwrap().energy_error.unwrap()
        };
        assert!(err(Method::Newton) < err(Method::Gd));
    }

    #[test]
    fn sparse_path_with_zero_threshold_is_full_update() {
        let pb = mstrig(4, 2, 5.0);
        let base = SolverConfig {
            space: SpaceKind::Coarse,
            line_search: LineSearch::ResidualRegularized,
            max_iters: 6,
            localization: Localization::Layers(1),
            ..Default::default()
        };
        let full = solve(&pb, None, &base, None).unwrap();
        let tiny = SolverConfig { sparse_update_threshold: f64::MIN_POSITIVE, ..base };
        let sparse = solve(&pb, None, &tiny, None).unwrap();
        assert_eq!(full.u, sparse.u);
        assert_eq!(full.update_fraction(), 1.0);
        assert_eq!(sparse.update_fraction(), 1.0);
        for (a, b) in full.records.iter().zip(&sparse.records) {
            assert_eq!(a.energy.to_bits(), b.energy.to_bits());
            assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
        }
    }

    #[test]
    fn large_threshold_skips_updates() {
        let pb = mstrig(4, 2, 5.0);
        let cfg = SolverConfig {
            space: SpaceKind::Coarse,
            max_iters: 4,
            localization: Localization::Layers(1),
            sparse_update_threshold: 1e300,
            ..Default::default()
        };
        let rep = solve(&pb, None, &cfg, None).unwrap();
        assert_eq!(rep.records[1].bases_updated, 32);
        assert!(rep.records[2..].iter().all(|r| r.bases_updated == 0));
    }

    #[test]
    fn regularized_step_is_shorter() {
        let pb = mstrig(4, 2, 10.0);
        let sp = pb.space();
        let s = pb.state(poisson_initial_guess(&pb).unwrap()).unwrap();
        let a = pb.linearize(&s, LinMode::Newton);
        let meas = build_measurements(sp).unwrap();
        let cs = compute_basis(&a, &meas, sp, Some(2)).unwrap();
        let rhs: Vec<f64> = pb.residual(&s).iter().map(|x| -x).collect();
        let w = coarse_solve(&a, &rhs, &cs).unwrap();
        let plain = line_search(&pb, &s, &w, LineSearch::Plain, 4.0).unwrap();
        let reg = line_search(&pb, &s, &w, LineSearch::ResidualRegularized, 4.0).unwrap();
        assert!(reg.lambda > 0.0);
        assert!(reg.alpha < plain.alpha, "{} {}", reg.alpha, plain.alpha);
        assert!(reg.rho > plain.rho);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = [
            SolverConfig { tol: 0.0, ..Default::default() },
            SolverConfig { delta: 0.5, ..Default::default() },
            SolverConfig { delta: 1.0, ..Default::default() },
            SolverConfig { max_iters: 0, ..Default::default() },
            SolverConfig { sparse_update_threshold: -1.0, ..Default::default() },
            SolverConfig { inner_max: 0, ..Default::default() },
            SolverConfig { c_q: 0.0, ..Default::default() },
            SolverConfig { alpha_max: 0.5, ..Default::default() },
            SolverConfig { method: Method::Quasinorm, space: SpaceKind::Coarse, ..Default::default() },
            SolverConfig { localization: Localization::Layers(0), ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(SolverError::InvalidConfig(_))), "{cfg:?}");
        }
    }

    #[test]
    fn names_round_trip() {
        for m in [Method::Gd, Method::Pgd, Method::Newton, Method::Quasinorm] {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        for l in [LineSearch::None, LineSearch::Plain, LineSearch::ResidualRegularized] {
            assert_eq!(LineSearch::parse(l.name()), Some(l));
        }
        assert_eq!(Method::parse("bfgs"), None);
    }
}
