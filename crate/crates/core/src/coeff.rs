//! Heterogeneous coefficient fields and their per-element sampling.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mesh::{Mesh, Rect};

#[derive(Debug, Error)]
pub enum CoeffError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: cannot parse {token:?} as a decimal")]
    Parse { line: usize, token: String },
    #[error("grid dimension mismatch: expected {expected} values ({rows}×{cols}), found {found}")]
    DimensionMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: coefficient value {value} is not positive")]
    NonPositive { line: usize, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point ({x}, {y}) lies outside the coefficient extent {lx}×{ly}")]
    OutOfExtent { x: f64, y: f64, lx: f64, ly: f64 },
}

/// How a grid field came to be.
#[derive(Debug, Clone, PartialEq)]
pub enum GridSource {
    File(PathBuf),
    Channels {
        count: usize,
        contrast: f64,
        seed: u64,
    },
}

/// Cell-centered values on a `rows × cols` grid covering `extent`; row 0 is
/// the row at `y = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    extent: Rect,
    source: GridSource,
}

impl GridField {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, extent: Rect, source: GridSource) -> Result<Self, CoeffError> {
        if rows == 0 || cols == 0 {
            return Err(CoeffError::InvalidArgument(format!("grid must be nonempty, got {rows}×{cols}")));
        }
        if values.len() != rows * cols {
            return Err(CoeffError::DimensionMismatch {
                rows,
                cols,
                expected: rows * cols,
                found: values.len(),
            });
        }
        if !(extent.lx > 0.0 && extent.ly > 0.0) {
            return Err(CoeffError::InvalidArgument(format!(
                "extent must be positive, got {}×{}",
                extent.lx, extent.ly
            )));
        }
        Ok(Self {
            rows,
            cols,
            values,
            extent,
            source,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn extent(&self) -> Rect {
        self.extent
    }

    pub fn source(&self) -> &GridSource {
        &self.source
    }

    pub fn with_extent(mut self, extent: Rect) -> Self {
        self.extent = extent;
        self
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Value of the cell containing `(x, y)`, clamped at the edges.
    pub fn at(&self, x: f64, y: f64) -> f64 {
        let col = ((x / self.extent.lx) * self.cols as f64).floor();
        let row = ((y / self.extent.ly) * self.rows as f64).floor();
        let col = (col.max(0.0) as usize).min(self.cols - 1);
        let row = (row.max(0.0) as usize).min(self.rows - 1);
        self.value(row, col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientField {
    /// The six-term multiscale trigonometric coefficient.
    Mstrig,
    Constant(f64),
    Grid(GridField),
}

impl CoefficientField {
    pub fn constant(value: f64) -> Result<Self, CoeffError> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(CoeffError::InvalidArgument(format!(
                "constant coefficient must be positive, got {value}"
            )));
        }
        Ok(Self::Constant(value))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Mstrig => "mstrig",
            Self::Constant(_) => "constant",
            Self::Grid(g) => match g.source {
                GridSource::File(_) => "grid",
                GridSource::Channels { .. } => "channels",
            },
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Self::Mstrig => mstrig_eval(x, y),
            Self::Constant(c) => *c,
            Self::Grid(g) => g.at(x, y),
        }
    }
}

/// Multiscale trigonometric coefficient with the non-separable scales
/// 1/5, 1/13, 1/17, 1/31, 1/65.
pub fn mstrig_eval(x: f64, y: f64) -> f64 {
    let s = |t: f64, eps: f64| (2.0 * PI * t / eps).sin();
    let c = |t: f64, eps: f64| (2.0 * PI * t / eps).cos();
    let (e1, e2, e3, e4, e5) = (1.0 / 5.0, 1.0 / 13.0, 1.0 / 17.0, 1.0 / 31.0, 1.0 / 65.0);
    let sum = (1.1 + s(x, e1)) / (1.1 + s(y, e1))
        + (1.1 + s(y, e2)) / (1.1 + c(x, e2))
        + (1.1 + c(x, e3)) / (1.1 + s(y, e3))
        + (1.1 + s(y, e4)) / (1.1 + c(x, e4))
        + (1.1 + c(x, e5)) / (1.1 + s(y, e5))
        + (4.0 * x * x * y * y).sin()
        + 1.0;
    sum / 6.0
}

/// Reads `rows × cols` whitespace-separated positive decimals, row-major with
/// row 0 at the bottom of the domain.
pub fn load_grid(path: &Path, rows: usize, cols: usize, extent: Rect) -> Result<CoefficientField, CoeffError> {
    let text = fs::read_to_string(path).map_err(|source| CoeffError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let values = parse_grid(&text, rows, cols)?;
    let grid = GridField::new(rows, cols, values, extent, GridSource::File(path.to_path_buf()))?;
    Ok(CoefficientField::Grid(grid))
}

/// Parses the grid file body; split out so the format can be tested without files.
pub fn parse_grid(text: &str, rows: usize, cols: usize) -> Result<Vec<f64>, CoeffError> {
    if rows == 0 || cols == 0 {
        return Err(CoeffError::InvalidArgument(format!("grid must be nonempty, got {rows}×{cols}")));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for (k, line) in text.lines().enumerate() {
        for token in line.split_whitespace() {
            let value: f64 = token.parse().map_err(|_| CoeffError::Parse {
                line: k + 1,
                token: token.to_string(),
            })?;
            if !(value > 0.0 && value.is_finite()) {
                return Err(CoeffError::NonPositive { line: k + 1, value });
            }
            values.push(value);
        }
    }
    if values.len() != rows * cols {
        return Err(CoeffError::DimensionMismatch {
            rows,
            cols,
            expected: rows * cols,
            found: values.len(),
        });
    }
    Ok(values)
}

/// Synthetic high-contrast field: background 1 crossed by `n_channels`
/// meandering horizontal bands of value `contrast`. Covers `[0,1]²` until
/// rescaled with [`GridField::with_extent`].
pub fn synth_channels(rows: usize, cols: usize, n_channels: usize, contrast: f64, seed: u64) -> Result<CoefficientField, CoeffError> {
    if rows == 0 || cols == 0 || n_channels == 0 {
        return Err(CoeffError::InvalidArgument(format!(
            "counts must be at least 1, got rows={rows} cols={cols} channels={n_channels}"
        )));
    }
    if !(contrast > 1.0 && contrast.is_finite()) {
        return Err(CoeffError::InvalidArgument(format!("contrast must exceed 1, got {contrast}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![1.0; rows * cols];
    let half_width = (rows as f64 / (8.0 * n_channels as f64)).max(0.5);
    for k in 0..n_channels {
        let base = (k as f64 + 0.5) / n_channels as f64 * rows as f64;
        let amplitude = rng.gen_range(0.05..0.2) * rows as f64;
        let periods = rng.gen_range(0.5..2.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        for c in 0..cols {
            let center = base + amplitude * (2.0 * PI * periods * (c as f64 + 0.5) / cols as f64 + phase).sin();
            for r in 0..rows {
                if (r as f64 + 0.5 - center).abs() <= half_width {
                    values[r * cols + c] = contrast;
                }
            }
        }
    }
    // Keep both extremes present on degenerate grids.
    if values.iter().all(|&v| v == contrast) {
        values[0] = 1.0;
    }
    if values.iter().all(|&v| v == 1.0) {
        let mid = (rows / 2) * cols + cols / 2;
        values[mid] = contrast;
    }
    let grid = GridField::new(
        rows,
        cols,
        values,
        Rect { lx: 1.0, ly: 1.0 },
        GridSource::Channels {
            count: n_channels,
            contrast,
            seed,
        },
    )?;
    Ok(CoefficientField::Grid(grid))
}

/// One positive coefficient per fine triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementCoefficients {
    pub values: Vec<f64>,
    pub mesh_id: u64,
}

impl ElementCoefficients {
    pub fn uniform(mesh: &Mesh, value: f64) -> Self {
        Self {
            values: vec![value; mesh.num_triangles()],
            mesh_id: mesh.fingerprint(),
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contrast(&self) -> f64 {
        self.max() / self.min()
    }
}

/// Evaluates `field` at every triangle barycenter of `mesh`.
pub fn sample_on_mesh(field: &CoefficientField, mesh: &Mesh) -> Result<ElementCoefficients, CoeffError> {
    if let CoefficientField::Grid(g) = field {
        let ext = g.extent();
        let slack = 1e-12 * ext.lx.max(ext.ly);
        let dom = mesh.domain();
        if dom.lx > ext.lx + slack || dom.ly > ext.ly + slack {
            return Err(CoeffError::OutOfExtent {
                x: dom.lx,
                y: dom.ly,
                lx: ext.lx,
                ly: ext.ly,
            });
        }
    }
    let values: Vec<f64> = (0..mesh.num_triangles())
        .map(|t| {
            let [x, y] = mesh.barycenter(t);
            field.eval(x, y)
        })
        .collect();
    if let Some(bad) = values.iter().find(|v| !(**v > 0.0)) {
        return Err(CoeffError::InvalidArgument(format!("sampled coefficient {bad} is not positive")));
    }
    Ok(ElementCoefficients {
        values,
        mesh_id: mesh.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_coarse_mesh, refine};

    #[test]
    fn mstrig_at_origin() {
        // sin terms vanish and cos terms equal one at the origin.
        let terms = [1.1 / 1.1, 1.1 / 2.1, 2.1 / 1.1, 1.1 / 2.1, 2.1 / 1.1, 0.0, 1.0];
        let want: f64 = terms.iter().sum::<f64>() / 6.0;
        assert!((mstrig_eval(0.0, 0.0) - want).abs() < 1e-15);
    }

    #[test]
    fn mstrig_positive_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1_000_000 {
            let x: f64 = rng.gen_range(-3.0..3.0);
            let y: f64 = rng.gen_range(-3.0..3.0);
            assert!(mstrig_eval(x, y) > 0.0);
        }
        let n = 400;
        let mut hi = 0.0f64;
        for i in 0..=n {
            for j in 0..=n {
                let v = mstrig_eval(i as f64 / n as f64, j as f64 / n as f64);
                // five ratios bounded by 2.1/0.1 plus sin + 1 <= 2
                assert!(v > 0.0 && v < (5.0 * 21.0 + 2.0) / 6.0);
                hi = hi.max(v);
            }
        }
        // the peak of the field on the unit square is about 12.66
        assert!(hi > 12.0 && hi < 12.7, "{hi}");
    }

    #[test]
    fn constant_sampling_is_exact() {
        let mesh = refine(&build_coarse_mesh(3, 2, 1.0, 1.0).unwrap(), 2);
        let k = sample_on_mesh(&CoefficientField::constant(3.0).unwrap(), &mesh).unwrap();
        assert_eq!(k.values.len(), mesh.num_triangles());
        assert!(k.values.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn mstrig_sampling_matches_direct_scan() {
        let mesh = refine(&build_coarse_mesh(4, 4, 1.0, 1.0).unwrap(), 5);
        let k = sample_on_mesh(&CoefficientField::Mstrig, &mesh).unwrap();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for tri in mesh.triangles() {
            let x = tri.iter().map(|&v| mesh.vertices()[v][0]).sum::<f64>() / 3.0;
            let y = tri.iter().map(|&v| mesh.vertices()[v][1]).sum::<f64>() / 3.0;
            let v = mstrig_eval(x, y);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        assert!((k.min() - lo).abs() <= 1e-14 * lo);
        assert!((k.max() - hi).abs() <= 1e-14 * hi);
    }

    #[test]
    fn grid_parsing_and_errors() {
        assert_eq!(parse_grid("2.5\n", 1, 1).unwrap(), vec![2.5]);
        assert_eq!(parse_grid("1 2\n3 4", 2, 2).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        match parse_grid("1 2\n3 x", 2, 2) {
            Err(CoeffError::Parse { line: 2, token }) => assert_eq!(token, "x"),
            other => panic!("unexpected {other:?}"),
        }
        match parse_grid("1 2\n3 0", 2, 2) {
            Err(CoeffError::NonPositive { line: 2, value }) => assert_eq!(value, 0.0),
            other => panic!("unexpected {other:?}"),
        }
        let short: String = (0..59).map(|_| "1 1 1\n").collect();
        assert!(matches!(
            parse_grid(&short, 60, 3),
            Err(CoeffError::DimensionMismatch {
                expected: 180,
                found: 177,
                ..
            })
        ));
    }

    #[test]
    fn single_cell_grid_is_constant() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.txt");
        fs::write(&path, "2.5\n").unwrap();
        let field = load_grid(&path, 1, 1, Rect { lx: 1.0, ly: 1.0 }).unwrap();
        for (x, y) in [(0.0, 0.0), (0.3, 0.9), (1.0, 1.0)] {
            assert_eq!(field.eval(x, y), 2.5);
        }
        assert!(matches!(
            load_grid(&dir.path().join("missing.txt"), 1, 1, Rect { lx: 1.0, ly: 1.0 }),
            Err(CoeffError::Io { .. })
        ));
    }

    #[test]
    fn grid_lookup_uses_containing_cell() {
        // 2 rows × 3 cols on [0,3]×[0,2]; row 0 is the bottom row.
        let g = GridField::new(
            2,
            3,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            Rect { lx: 3.0, ly: 2.0 },
            GridSource::File("mem".into()),
        )
        .unwrap();
        assert_eq!(g.at(0.5, 0.5), 1.0);
        assert_eq!(g.at(2.5, 0.2), 3.0);
        assert_eq!(g.at(1.2, 1.7), 5.0);
        assert_eq!(g.at(3.0, 2.0), 6.0);
        // A fine mesh cell inside one data cell picks that value.
        let mesh = refine(&build_coarse_mesh(3, 2, 3.0, 2.0).unwrap(), 2);
        let k = sample_on_mesh(&CoefficientField::Grid(g.clone()), &mesh).unwrap();
        for t in 0..mesh.num_triangles() {
            let [x, y] = mesh.barycenter(t);
            assert_eq!(k.values[t], g.at(x, y));
        }
    }

    #[test]
    fn grid_extent_must_cover_mesh() {
        let g = GridField::new(1, 1, vec![1.0], Rect { lx: 1.0, ly: 1.0 }, GridSource::File("mem".into())).unwrap();
        let mesh = build_coarse_mesh(2, 2, 2.0, 1.0).unwrap();
        assert!(matches!(
            sample_on_mesh(&CoefficientField::Grid(g), &mesh),
            Err(CoeffError::OutOfExtent { .. })
        ));
    }

    #[test]
    fn channels_are_deterministic_with_exact_extremes() {
        assert!(synth_channels(60, 220, 3, 1.0, 7).is_err());
        assert!(synth_channels(0, 220, 3, 10.0, 7).is_err());
        let a = synth_channels(60, 220, 3, 1e6, 7).unwrap();
        let b = synth_channels(60, 220, 3, 1e6, 7).unwrap();
        assert_eq!(a, b);
        let CoefficientField::Grid(g) = a else { panic!() };
        let lo = g.values().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = g.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (1.0, 1e6));
        for (rows, cols, n) in [(1, 1, 1), (2, 1, 4), (5, 7, 2)] {
            let CoefficientField::Grid(g) = synth_channels(rows, cols, n, 50.0, 3).unwrap() else { panic!() };
            let lo = g.values().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = g.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if rows * cols > 1 {
                assert_eq!((lo, hi), (1.0, 50.0));
            }
        }
    }
}
