//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use quasihom_core::mesh::Rect;
use quasihom_core::nfunc::{NFunction, NKind};
use quasihom_core::solvers::{LineSearch, Localization, Method, SolverConfig, SpaceKind};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Solve,
    CompareMethods,
    HomogenizationError,
    RegularizationStudy,
    SparseUpdateStudy,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Solve,
        Experiment::CompareMethods,
        Experiment::HomogenizationError,
        Experiment::RegularizationStudy,
        Experiment::SparseUpdateStudy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Solve => "solve",
            Experiment::CompareMethods => "compare-methods",
            Experiment::HomogenizationError => "homogenization-error",
            Experiment::RegularizationStudy => "regularization-study",
            Experiment::SparseUpdateStudy => "sparse-update-study",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s)
    }

    /// Defaults that differ from the global ones.
    fn preset(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Experiment::Solve => &[],
            Experiment::CompareMethods => &[("p", "5"), ("max_iters", "20")],
            Experiment::HomogenizationError => &[
                ("p", "5"),
                ("space", "coarse"),
                ("line_search", "residual_regularized"),
                ("max_iters", "40"),
            ],
            Experiment::RegularizationStudy => &[("p", "10")],
            Experiment::SparseUpdateStudy => &[
                ("coefficient", "channels"),
                ("p", "20"),
                ("space", "coarse"),
                ("line_search", "residual_regularized"),
                ("max_iters", "60"),
            ],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("lx", "1", "domain width"),
    ("ly", "1", "domain height"),
    ("nc", "8", "coarse cells along each side (Nc)"),
    ("j", "2", "red-refinement levels from coarse to fine (J)"),
    ("coefficient", "mstrig", "mstrig | constant | grid | channels"),
    ("kappa", "1", "value of the constant coefficient"),
    ("grid_file", "", "whitespace-separated grid values, row 0 at y = 0"),
    ("grid_rows", "0", "rows of the grid file"),
    ("grid_cols", "0", "columns of the grid file"),
    ("grid_lx", "", "width covered by the grid (default: lx)"),
    ("grid_ly", "", "height covered by the grid (default: ly)"),
    ("channels_count", "3", "number of synthetic channels"),
    ("channels_contrast", "1e4", "channel to background contrast"),
    ("channels_seed", "7", "seed of the channel layout"),
    ("channels_rows", "64", "rows of the synthetic grid"),
    ("channels_cols", "64", "columns of the synthetic grid"),
    ("f", "sinpi", "sinpi | sinbox | constant"),
    ("f_value", "1", "value of the constant load"),
    ("p", "2", "growth exponent"),
    ("nfunc", "reg_c1", "power | reg_c1 | reg_c2"),
    ("eps_minus_pow", "1e-6", "lower regularization threshold raised to p - 2"),
    ("eps_plus", "inf", "upper regularization threshold"),
    ("method", "newton", "gd | pgd | newton | quasinorm"),
    ("space", "fine", "fine | coarse"),
    ("tol", "1e-15", "relative energy decrease that stops the iteration"),
    ("max_iters", "100", "iteration cap"),
    ("line_search", "plain", "none | plain | residual_regularized"),
    ("delta", "0.68", "indicator threshold that ends residual regularization"),
    ("sparse_update_threshold", "0", "basis update threshold, 0 updates all"),
    ("inner_tol", "1e-10", "tolerance of inner iterations"),
    ("inner_max", "100", "inner iteration cap"),
    ("localization", "auto", "auto | global | number of layers"),
    ("c_q", "2", "scaling of the quasi-norm direction"),
    ("alpha_max", "4", "initial bracket of the line search"),
    ("estimate_cn", "false", "estimate the scaling constant each iteration"),
    ("initial_guess", "poisson", "poisson (linear κ problem) | zero"),
    ("reference", "true", "compute a fine reference solution for error columns"),
    ("methods", "gd,pgd,newton,quasinorm", "compare-methods: methods to run"),
    ("levels", "2:4,4:3,8:2", "homogenization-error: Nc:J pairs at a common fine mesh"),
    ("eps_sweep", "1e-2,1e-4,1e-6", "regularization-study: values of eps_minus_pow"),
    ("thresholds", "0,1,3,10", "sparse-update-study: values of sparse_update_threshold"),
];

const MAX_FINE_CELLS: usize = 1 << 12;

#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientSpec {
    Mstrig,
    Constant(f64),
    Grid {
        path: PathBuf,
        rows: usize,
        cols: usize,
        extent: Rect,
    },
    Channels {
        count: usize,
        contrast: f64,
        seed: u64,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LoadSpec {
    Sinpi,
    Sinbox,
    Constant(f64),
}

impl LoadSpec {
    pub fn eval(self, x: f64, y: f64, domain: Rect) -> f64 {
        use std::f64::consts::PI;
        match self {
            LoadSpec::Sinpi => (PI * x).sin() * (PI * y).sin(),
            LoadSpec::Sinbox => (PI * x / domain.lx).sin() * (PI * y / domain.ly).sin(),
            LoadSpec::Constant(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub domain: Rect,
    pub nc: usize,
    pub j: usize,
    pub coefficient: CoefficientSpec,
    pub load: LoadSpec,
    pub nfunc: NFunction,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub problem: ProblemSpec,
    pub solver: SolverConfig,
    pub reference: bool,
    /// Start from zero instead of the κ-Poisson solution.
    pub zero_start: bool,
    pub methods: Vec<Method>,
    pub levels: Vec<(usize, usize)>,
    pub eps_sweep: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub out: PathBuf,
    pub jobs: usize,
    /// Fully resolved key/value pairs.
    pub values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Stable hash of the resolved settings.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.experiment.name().hash(&mut h);
        self.values.hash(&mut h);
        h.finish()
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        check_key(k)?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(config_err(format!("line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(out)
}

fn check_key(k: &str) -> Result<(), CliError> {
    if KEYS.iter().any(|(name, _, _)| *name == k) {
        Ok(())
    } else {
        Err(config_err(format!("unknown key {k:?}")))
    }
}

/// Command line after the experiment name has been split off.
#[derive(Debug, Default, Clone)]
pub struct Args {
    pub config: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn parse_args<I: IntoIterator<Item = String>>(args: I) -> Result<Args, CliError> {
    let mut out = Args::default();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| config_err(format!("unexpected argument {a:?}")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| config_err(format!("--{key} needs a value")))?;
                (key.to_string(), v)
            }
        };
        match key.as_str() {
            "config" => out.config = Some(PathBuf::from(value)),
            "out" => out.out = Some(PathBuf::from(value)),
            "jobs" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| config_err(format!("--jobs expects a positive integer, got {value:?}")))?;
                if n == 0 {
                    return Err(config_err("--jobs must be at least 1"));
                }
                out.jobs = Some(n);
            }
            _ => {
                let k = key.replace('-', "_");
                check_key(&k)?;
                out.overrides.push((k, value));
            }
        }
    }
    Ok(out)
}

/// Merges defaults, the experiment preset, the config file and overrides,
/// then validates everything.
pub fn resolve(experiment: Experiment, args: &Args, cache_dir: Option<PathBuf>) -> Result<RunConfig, CliError> {
    let mut values: BTreeMap<String, String> =
        KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
    for (k, v) in experiment.preset() {
        values.insert(k.to_string(), v.to_string());
    }
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        values.extend(parse_config_text(&text)?);
    }
    for (k, v) in &args.overrides {
        values.insert(k.clone(), v.clone());
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("quasihom-out").join(experiment.name()));
    build(experiment, values, out, args.jobs.unwrap_or(0), cache_dir)
}

struct Reader<'a>(&'a BTreeMap<String, String>);

impl Reader<'_> {
    fn raw(&self, k: &str) -> &str {
        self.0.get(k).map(String::as_str).unwrap_or("")
    }

    fn f64(&self, k: &str) -> Result<f64, CliError> {
        let v = self.raw(k);
        v.parse::<f64>()
            .ok()
            .filter(|x| !x.is_nan())
            .ok_or_else(|| config_err(format!("{k}: expected a number, got {v:?}")))
    }

    fn positive(&self, k: &str) -> Result<f64, CliError> {
        let x = self.f64(k)?;
        if x > 0.0 && x.is_finite() {
            Ok(x)
        } else {
            Err(config_err(format!("{k}: expected a positive finite number, got {x}")))
        }
    }

    fn usize(&self, k: &str) -> Result<usize, CliError> {
        let v = self.raw(k);
        v.parse()
            .map_err(|_| config_err(format!("{k}: expected a nonnegative integer, got {v:?}")))
    }

    fn bool(&self, k: &str) -> Result<bool, CliError> {
        match self.raw(k) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(config_err(format!("{k}: expected true or false, got {v:?}"))),
        }
    }

    fn list(&self, k: &str) -> Vec<&str> {
        self.raw(k).split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
    }

    fn pick<T>(&self, k: &str, parse: impl Fn(&str) -> Option<T>) -> Result<T, CliError> {
        let v = self.raw(k);
        parse(v).ok_or_else(|| config_err(format!("{k}: unsupported value {v:?}")))
    }
}

fn build(
    experiment: Experiment,
    values: BTreeMap<String, String>,
    out: PathBuf,
    jobs: usize,
    cache_dir: Option<PathBuf>,
) -> Result<RunConfig, CliError> {
    let r = Reader(&values);
    let domain = Rect {
        lx: r.positive("lx")?,
        ly: r.positive("ly")?,
    };
    let (nc, j) = (r.usize("nc")?, r.usize("j")?);
    check_resolution(nc, j)?;

    let coefficient = match r.raw("coefficient") {
        "mstrig" => CoefficientSpec::Mstrig,
        "constant" => CoefficientSpec::Constant(r.positive("kappa")?),
        "grid" => {
            let path = r.raw("grid_file");
            if path.is_empty() {
                return Err(config_err("coefficient = grid needs grid_file"));
            }
            let (rows, cols) = (r.usize("grid_rows")?, r.usize("grid_cols")?);
            if rows == 0 || cols == 0 {
                return Err(config_err("coefficient = grid needs positive grid_rows and grid_cols"));
            }
            let side = |k: &str, default: f64| {
                if r.raw(k).is_empty() {
                    Ok(default)
                } else {
                    r.positive(k)
                }
            };
            let extent = Rect {
                lx: side("grid_lx", domain.lx)?,
                ly: side("grid_ly", domain.ly)?,
            };
            if extent.lx < domain.lx || extent.ly < domain.ly {
                return Err(config_err("the grid extent must cover the domain"));
            }
            CoefficientSpec::Grid {
                path: PathBuf::from(path),
                rows,
                cols,
                extent,
            }
        }
        "channels" => {
            let count = r.usize("channels_count")?;
            let (rows, cols) = (r.usize("channels_rows")?, r.usize("channels_cols")?);
            let contrast = r.positive("channels_contrast")?;
            if count == 0 || rows == 0 || cols == 0 || contrast < 1.0 {
                return Err(config_err(
                    "channels need count, rows and cols of at least 1 and contrast of at least 1",
                ));
            }
            let seed = r
                .raw("channels_seed")
                .parse()
                .map_err(|_| config_err("channels_seed: expected an unsigned integer"))?;
            CoefficientSpec::Channels {
                count,
                contrast,
                seed,
                rows,
                cols,
            }
        }
        v => return Err(config_err(format!("coefficient: unsupported value {v:?}"))),
    };

    let load = match r.raw("f") {
        "sinpi" => LoadSpec::Sinpi,
        "sinbox" => LoadSpec::Sinbox,
        "constant" => LoadSpec::Constant(r.f64("f_value")?),
        v => return Err(config_err(format!("f: unsupported value {v:?}"))),
    };

    let p = r.f64("p")?;
    let kind = r.pick("nfunc", NKind::parse)?;
    let eps_minus_pow = r.positive("eps_minus_pow")?;
    let eps_plus = r.f64("eps_plus")?;
    let nfunc = make_nfunction(kind, p, eps_minus_pow, eps_plus)?;

    let solver = SolverConfig {
        method: r.pick("method", Method::parse)?,
        space: r.pick("space", |s| match s {
            "fine" => Some(SpaceKind::Fine),
            "coarse" => Some(SpaceKind::Coarse),
            _ => None,
        })?,
        tol: r.f64("tol")?,
        max_iters: r.usize("max_iters")?,
        line_search: r.pick("line_search", LineSearch::parse)?,
        delta: r.f64("delta")?,
        sparse_update_threshold: r.f64("sparse_update_threshold")?,
        inner_tol: r.f64("inner_tol")?,
        inner_max: r.usize("inner_max")?,
        localization: r.pick("localization", |s| match s {
            "auto" => Some(Localization::Auto),
            "global" => Some(Localization::Global),
            n => n.parse().ok().map(Localization::Layers),
        })?,
        c_q: r.f64("c_q")?,
        alpha_max: r.f64("alpha_max")?,
        estimate_cn: r.bool("estimate_cn")?,
        cache_dir,
    };
    solver.validate().map_err(|e| config_err(e.to_string()))?;

    let methods = r
        .list("methods")
        .into_iter()
        .map(|m| Method::parse(m).ok_or_else(|| config_err(format!("methods: unknown method {m:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let levels = r
        .list("levels")
        .into_iter()
        .map(|s| {
            let bad = || config_err(format!("levels: expected Nc:J, got {s:?}"));
            let (a, b) = s.split_once(':').ok_or_else(bad)?;
            let nc: usize = a.trim().parse().map_err(|_| bad())?;
            let j: usize = b.trim().parse().map_err(|_| bad())?;
            check_resolution(nc, j)?;
            Ok((nc, j))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let numbers = |k: &str, lower: f64| {
        r.list(k)
            .into_iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|x| *x >= lower && x.is_finite())
                    .ok_or_else(|| config_err(format!("{k}: invalid entry {s:?}")))
            })
            .collect::<Result<Vec<_>, _>>()
    };
    let eps_sweep = numbers("eps_sweep", f64::MIN_POSITIVE)?;
    let thresholds = numbers("thresholds", 0.0)?;

    match experiment {
        Experiment::CompareMethods if methods.is_empty() => return Err(config_err("methods is empty")),
        Experiment::CompareMethods if methods.contains(&Method::Quasinorm) && solver.space == SpaceKind::Coarse => {
            return Err(config_err("the quasi-norm method runs on the fine space only"))
        }
        Experiment::HomogenizationError => {
            if levels.len() < 2 {
                return Err(config_err("levels needs at least two entries"));
            }
            let fine = levels[0].0 << levels[0].1;
            if levels.iter().any(|&(n, l)| n << l != fine) {
                return Err(config_err("all levels must share the fine resolution Nc·2^J"));
            }
        }
        Experiment::RegularizationStudy => {
            if eps_sweep.is_empty() {
                return Err(config_err("eps_sweep is empty"));
            }
            if kind == NKind::Power {
                return Err(config_err("regularization-study needs nfunc = reg_c1 or reg_c2"));
            }
            for &e in &eps_sweep {
                make_nfunction(kind, p, e, eps_plus)?;
            }
        }
        Experiment::SparseUpdateStudy => {
            if thresholds.is_empty() {
                return Err(config_err("thresholds is empty"));
            }
            if solver.space != SpaceKind::Coarse {
                return Err(config_err("sparse-update-study needs space = coarse"));
            }
        }
        _ => {}
    }

    Ok(RunConfig {
        experiment,
        problem: ProblemSpec {
            domain,
            nc,
            j,
            coefficient,
            load,
            nfunc,
        },
        solver,
        reference: r.bool("reference")?,
        zero_start: r.pick("initial_guess", |s| match s {
            "poisson" => Some(false),
            "zero" => Some(true),
            _ => None,
        })?,
        methods,
        levels,
        eps_sweep,
        thresholds,
        out,
        jobs,
        values,
    })
}

fn check_resolution(nc: usize, j: usize) -> Result<(), CliError> {
    if nc == 0 {
        return Err(config_err("nc must be at least 1"));
    }
    if j > 12 || nc.checked_shl(j as u32).is_none_or(|n| n > MAX_FINE_CELLS) {
        return Err(config_err(format!("fine resolution nc·2^j = {nc}·2^{j} is too large")));
    }
    Ok(())
}

pub fn make_nfunction(kind: NKind, p: f64, eps_minus_pow: f64, eps_plus: f64) -> Result<NFunction, CliError> {
    let nf = if kind == NKind::Power {
        NFunction::power(p)
    } else {
        NFunction::regularized(kind, p, eps_minus_pow, eps_plus)
    };
    nf.map_err(|e| config_err(e.to_string()))
}

/// Writes the resolved configuration back in the input format.
pub fn write_resolved(cfg: &RunConfig, path: &Path) -> std::io::Result<()> {
    let mut s = format!("# experiment: {}\n", cfg.experiment);
    for (k, v) in &cfg.values {
        s.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(path, s)
}
