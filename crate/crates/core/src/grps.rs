//! Generalized rough polyharmonic splines: coarse spaces adapted to a
//! linearized operator.
//!
//! The measurement functions are the indicators of the coarse triangles. Basis
//! `φ_i` minimizes `φᵀAφ` subject to `∫_{T_j} φ = δ_ij`, either over the whole
//! domain or over the free fine nodes inside an `ℓ`-layer patch around `T_i`.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::fem::{FemSpace, LinearizedOperator};
use crate::mesh::{build_patch, MeshError};
use crate::sparsela::{CsrMatrix, SaddleSolver, SparseError};

/// Relative tolerance of the basis saddle solves.
const BASIS_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GrpsError {
    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),
    #[error("basis {index}: {source}")]
    Basis { index: usize, source: SparseError },
    #[error("coarse stiffness matrix is singular")]
    SingularCoarse,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("basis cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `m × n` matrix with entry `(i, j) = ∫_{T_i} λ_j` over the free fine nodes.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    pub matrix: CsrMatrix,
    /// Coarse triangles each free node touches, sorted.
    node_cells: Vec<Vec<usize>>,
}

impl MeasurementSet {
    pub fn num_measurements(&self) -> usize {
        self.matrix.nrows()
    }

    /// `(∫_{T_i} w)_i`.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        self.matrix.matvec(w)
    }
}

pub fn build_measurements(space: &FemSpace) -> Result<MeasurementSet, GrpsError> {
    let mesh = space.mesh();
    let m = mesh.num_coarse_triangles();
    if mesh.level() > 0 && mesh.parents().is_none_or(|p| p.len() != mesh.num_triangles()) {
        return Err(GrpsError::MeshMismatch("fine mesh carries no parent map".into()));
    }
    let mut trip = Vec::new();
    let mut node_cells = vec![Vec::new(); space.dim()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let parent = mesh.coarse_parent(t);
        if parent >= m {
            return Err(GrpsError::MeshMismatch(format!("triangle {t} has parent {parent} of {m}")));
        }
        let third = space.areas()[t] / 3.0;
        for &v in tri {
            if let Some(d) = space.dof(v) {
                trip.push((parent, d, third));
                node_cells[d].push(parent);
            }
        }
    }
    for cells in &mut node_cells {
        cells.sort_unstable();
        cells.dedup();
    }
    Ok(MeasurementSet {
        matrix: CsrMatrix::from_triplets(m, space.dim(), &trip),
        node_cells,
    })
}

/// A fine-space vector stored by its nonzero support, indices sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseVector {
    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }

    pub fn from_dense(v: &[f64]) -> Self {
        let (indices, values) = v.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(i, x)| (i, *x)).unzip();
        Self { indices, values }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Localization of a basis: the free nodes it may live on and the
/// constraints active there.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchData {
    pub cells: Vec<usize>,
    pub dofs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseSpace {
    pub bases: Vec<SparseVector>,
    /// `None` for the global basis.
    pub layers: Option<usize>,
    /// Fingerprint of the operator each basis was last computed for.
    pub built_from: Vec<u64>,
    pub patches: Vec<Option<PatchData>>,
    pub stale: Vec<bool>,
    pub dim: usize,
}

/// `ℓ = max(2, ⌈log₂(1/H)⌉)`.
pub fn default_layers(coarse_h: f64) -> usize {
    ((1.0 / coarse_h).log2().ceil().max(2.0)) as usize
}

fn patch_data(space: &FemSpace, center: usize, layers: usize) -> Result<PatchData, GrpsError> {
    let patch = build_patch(space.mesh(), center, layers)?;
    let dofs = patch
        .interior_fine_nodes
        .iter()
        .map(|&v| space.dof(v).expect("interior patch node is free"))
        .collect();
    Ok(PatchData {
        cells: patch.elements,
        dofs,
    })
}

fn local_basis(a: &CsrMatrix, meas: &MeasurementSet, patch: &PatchData, center: usize) -> Result<SparseVector, SparseError> {
    let a_loc = a.submatrix(&patch.dofs, &patch.dofs);
    let b_loc = meas.matrix.submatrix(&patch.cells, &patch.dofs);
    let solver = SaddleSolver::new(&a_loc, &b_loc)?;
    let g: Vec<f64> = patch.cells.iter().map(|&c| if c == center { 1.0 } else { 0.0 }).collect();
    let (x, _) = solver.solve(&vec![0.0; patch.dofs.len()], &g, BASIS_TOL)?;
    Ok(SparseVector {
        indices: patch.dofs.clone(),
        values: x,
    })
}

impl CoarseSpace {
    pub fn num_bases(&self) -> usize {
        self.bases.len()
    }

    /// Wraps given basis vectors, for instance to test degenerate spaces.
    pub fn from_bases(bases: Vec<SparseVector>, dim: usize) -> Self {
        let m = bases.len();
        Self {
            bases,
            layers: None,
            built_from: vec![0; m],
            patches: vec![None; m],
            stale: vec![false; m],
            dim,
        }
    }

    pub fn basis_dense(&self, i: usize) -> Vec<f64> {
        self.bases[i].to_dense(self.dim)
    }

    /// Recomputes the bases listed in `which` for operator `a`. The global
    /// space recomputes every basis regardless of `which`.
    pub fn update(&mut self, a: &LinearizedOperator, meas: &MeasurementSet, which: &[usize]) -> Result<(), GrpsError> {
        match self.layers {
            None => {
                let fresh = compute_global(a, meas, self.dim)?;
                *self = fresh;
            }
            Some(_) => {
                let patches = &self.patches;
                let new: Vec<(usize, SparseVector)> = which
                    .par_iter()
                    .map(|&i| {
                        let patch = patches[i].as_ref().expect("local basis has a patch");
                        local_basis(&a.matrix, meas, patch, i)
                            .map(|b| (i, b))
                            .map_err(|source| GrpsError::Basis { index: i, source })
                    })
                    .collect::<Result<_, _>>()?;
                for (i, b) in new {
                    self.bases[i] = b;
                    self.built_from[i] = a.fingerprint;
                    self.stale[i] = false;
                }
                for i in 0..self.bases.len() {
                    if self.built_from[i] != a.fingerprint {
                        self.stale[i] = true;
                    }
                }
            }
        }
        Ok(())
    }

    /// `R A Rᵀ` for the basis matrix `R`.
    pub fn coarse_matrix(&self, a: &CsrMatrix) -> DMatrix<f64> {
        let m = self.bases.len();
        let cols: Vec<Vec<f64>> = (0..m).into_par_iter().map(|j| a.matvec(&self.basis_dense(j))).collect();
        let mut k = DMatrix::zeros(m, m);
        for (j, aphi) in cols.iter().enumerate() {
            for i in 0..m {
                let b = &self.bases[i];
                k[(i, j)] = b.indices.iter().zip(&b.values).map(|(&r, v)| v * aphi[r]).sum();
            }
        }
        (&k + k.transpose()) * 0.5
    }

    fn apply_rt(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (b, &ci) in self.bases.iter().zip(c) {
            for (&r, v) in b.indices.iter().zip(&b.values) {
                out[r] += ci * v;
            }
        }
        out
    }

    fn apply_r(&self, v: &[f64]) -> Vec<f64> {
        self.bases
            .iter()
            .map(|b| b.indices.iter().zip(&b.values).map(|(&r, x)| x * v[r]).sum())
            .collect()
    }

    /// Writes the space to `path`. Values are stored as raw bit patterns so a
    /// reload is exact.
    pub fn save(&self, path: &Path, mesh_fp: u64) -> Result<(), GrpsError> {
        let mut s = String::new();
        let layers = self.layers.map_or("global".to_string(), |l| l.to_string());
        writeln!(s, "quasihom-basis-cache 1").unwrap();
        writeln!(s, "mesh {mesh_fp:016x}").unwrap();
        writeln!(s, "dim {} m {} layers {layers}", self.dim, self.bases.len()).unwrap();
        for (i, b) in self.bases.iter().enumerate() {
            writeln!(s, "basis {i} {:016x} {}", self.built_from[i], b.nnz()).unwrap();
            for (&r, v) in b.indices.iter().zip(&b.values) {
                writeln!(s, "{r} {:016x}", v.to_bits()).unwrap();
            }
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, s)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Reads a space written by [`CoarseSpace::save`]. Patch metadata is
    /// rebuilt from `space`.
    pub fn load(path: &Path, space: &FemSpace) -> Result<Self, GrpsError> {
        let text = fs::read_to_string(path)?;
        let bad = |msg: &str| GrpsError::Cache(format!("{}: {msg}", path.display()));
        let mut lines = text.lines();
        if lines.next() != Some("quasihom-basis-cache 1") {
            return Err(bad("unknown header"));
        }
        let mesh_line = lines.next().ok_or_else(|| bad("truncated"))?;
        if mesh_line != format!("mesh {:016x}", space.mesh().fingerprint()) {
            return Err(bad("mesh fingerprint differs"));
        }
        let dims: Vec<&str> = lines.next().ok_or_else(|| bad("truncated"))?.split_whitespace().collect();
        if dims.len() != 6 || dims[0] != "dim" || dims[2] != "m" || dims[4] != "layers" {
            return Err(bad("malformed size line"));
        }
        let dim: usize = dims[1].parse().map_err(|_| bad("dim"))?;
        let m: usize = dims[3].parse().map_err(|_| bad("m"))?;
        if dim != space.dim() {
            return Err(bad("dimension differs"));
        }
        let layers = match dims[5] {
            "global" => None,
            l => Some(l.parse::<usize>().map_err(|_| bad("layers"))?),
        };
        let mut bases = Vec::with_capacity(m);
        let mut built_from = Vec::with_capacity(m);
        for i in 0..m {
            let head: Vec<&str> = lines.next().ok_or_else(|| bad("truncated"))?.split_whitespace().collect();
            if head.len() != 4 || head[0] != "basis" || head[1] != i.to_string() {
                return Err(bad("malformed basis header"));
            }
            built_from.push(u64::from_str_radix(head[2], 16).map_err(|_| bad("fingerprint"))?);
            let nnz: usize = head[3].parse().map_err(|_| bad("nnz"))?;
            let mut b = SparseVector {
                indices: Vec::with_capacity(nnz),
                values: Vec::with_capacity(nnz),
            };
            for _ in 0..nnz {
                let line = lines.next().ok_or_else(|| bad("truncated"))?;
                let (r, v) = line.split_once(' ').ok_or_else(|| bad("malformed entry"))?;
                b.indices.push(r.parse().map_err(|_| bad("index"))?);
                b.values.push(f64::from_bits(u64::from_str_radix(v, 16).map_err(|_| bad("value"))?));
            }
            bases.push(b);
        }
        let patches = match layers {
            None => vec![None; m],
            Some(l) => (0..m).map(|i| patch_data(space, i, l).map(Some)).collect::<Result<_, _>>()?,
        };
        Ok(Self {
            bases,
            layers,
            built_from,
            patches,
            stale: vec![false; m],
            dim,
        })
    }
}

fn compute_global(a: &LinearizedOperator, meas: &MeasurementSet, dim: usize) -> Result<CoarseSpace, GrpsError> {
    let m = meas.num_measurements();
    let solver = SaddleSolver::new(&a.matrix, &meas.matrix).map_err(|source| GrpsError::Basis { index: 0, source })?;
    let zero = vec![0.0; dim];
    let bases = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut g = vec![0.0; m];
            g[i] = 1.0;
            solver
                .solve(&zero, &g, BASIS_TOL)
                .map(|(x, _)| SparseVector::from_dense(&x))
                .map_err(|source| GrpsError::Basis { index: i, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CoarseSpace {
        bases,
        layers: None,
        built_from: vec![a.fingerprint; m],
        patches: vec![None; m],
        stale: vec![false; m],
        dim,
    })
}

/// Builds the coarse space for operator `a`; `layers = None` gives the
/// global basis.
pub fn compute_basis(
    a: &LinearizedOperator,
    meas: &MeasurementSet,
    space: &FemSpace,
    layers: Option<usize>,
) -> Result<CoarseSpace, GrpsError> {
    let dim = space.dim();
    if a.matrix.nrows() != dim || meas.matrix.ncols() != dim {
        return Err(GrpsError::DimensionMismatch {
            expected: dim,
            found: a.matrix.nrows(),
        });
    }
    let Some(l) = layers else {
        return compute_global(a, meas, dim);
    };
    let m = meas.num_measurements();
    let patches: Vec<PatchData> = (0..m).map(|i| patch_data(space, i, l)).collect::<Result<_, _>>()?;
    let bases = patches
        .par_iter()
        .enumerate()
        .map(|(i, p)| local_basis(&a.matrix, meas, p, i).map_err(|source| GrpsError::Basis { index: i, source }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CoarseSpace {
        bases,
        layers: Some(l),
        built_from: vec![a.fingerprint; m],
        patches: patches.into_iter().map(Some).collect(),
        stale: vec![false; m],
        dim,
    })
}

/// `w_I = Σ_i (∫_{T_i} w) φ_i`.
pub fn interpolate(w: &[f64], cs: &CoarseSpace, meas: &MeasurementSet) -> Result<Vec<f64>, GrpsError> {
    if w.len() != cs.dim {
        return Err(GrpsError::DimensionMismatch {
            expected: cs.dim,
            found: w.len(),
        });
    }
    Ok(cs.apply_rt(&meas.apply(w)))
}

/// Galerkin solve of `A w = rhs` in the span of the basis, returned as a
/// fine vector.
pub fn coarse_solve(a: &LinearizedOperator, rhs: &[f64], cs: &CoarseSpace) -> Result<Vec<f64>, GrpsError> {
    if rhs.len() != cs.dim {
        return Err(GrpsError::DimensionMismatch {
            expected: cs.dim,
            found: rhs.len(),
        });
    }
    if rhs.iter().all(|&x| x == 0.0) {
        return Ok(vec![0.0; cs.dim]);
    }
    let k = cs.coarse_matrix(&a.matrix);
    let chol = nalgebra::Cholesky::new(k).ok_or(GrpsError::SingularCoarse)?;
    let b = nalgebra::DVector::from_vec(cs.apply_r(rhs));
    let c = chol.solve(&b);
    if c.iter().any(|x| !x.is_finite()) {
        return Err(GrpsError::SingularCoarse);
    }
    Ok(cs.apply_rt(c.as_slice()))
}

/// `φᵀ A_incr φ` for a basis vector `φ`.
pub fn update_indicator(a_incr: &LinearizedOperator, basis: &SparseVector) -> f64 {
    let a = &a_incr.matrix;
    let mut pos = std::collections::HashMap::with_capacity(basis.nnz());
    for (k, &r) in basis.indices.iter().enumerate() {
        pos.insert(r, k);
    }
    let mut total = 0.0;
    for (&r, &vr) in basis.indices.iter().zip(&basis.values) {
        let (cols, vals) = a.row(r);
        for (c, v) in cols.iter().zip(vals) {
            if let Some(&k) = pos.get(c) {
                total += vr * v * basis.values[k];
            }
        }
    }
    total
}

/// Stable name for a cached space of `layers` built for operator `op_fp` on
/// mesh `mesh_fp`.
pub fn cache_file_name(mesh_fp: u64, op_fp: u64, layers: Option<usize>) -> String {
    let mut h = DefaultHasher::new();
    (mesh_fp, op_fp, layers).hash(&mut h);
    format!("basis-{:016x}.txt", h.finish())
}

/// Node-to-cell incidence used by tests and diagnostics.
pub fn cells_of_node(meas: &MeasurementSet, dof: usize) -> &[usize] {
    &meas.node_cells[dof]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{sample_on_mesh, CoefficientField};
    use crate::fem::{FemState, LinMode, Problem};
    use crate::mesh::{build_coarse_mesh, refine};
    use crate::nfunc::NFunction;
    use crate::sparsela::{dot, solve_spd, DEFAULT_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn setup(nc: usize, j: usize, field: CoefficientField, p: f64) -> (Problem, MeasurementSet) {
        let mesh = Arc::new(refine(&build_coarse_mesh(nc, nc, 1.0, 1.0).unwrap(), j));
        let sp = Arc::new(FemSpace::new(mesh).unwrap());
        let k = sample_on_mesh(&field, sp.mesh()).unwrap();
        let load = sp.load_vector(|x, y| (PI * x).sin() * (PI * y).sin());
        let pb = Problem::new(sp.clone(), &k, NFunction::default_regularized(p).unwrap(), load).unwrap();
        let meas = build_measurements(&sp).unwrap();
        (pb, meas)
    }

    fn a_norm_sq(a: &CsrMatrix, w: &[f64]) -> f64 {
        dot(&a.matvec(w), w)
    }

    #[test]
    fn single_cell_measurements_by_hand() {
        let (pb, meas) = setup(1, 1, CoefficientField::constant(1.0).unwrap(), 2.0);
        assert_eq!(meas.matrix.nrows(), 2);
        assert_eq!(meas.matrix.ncols(), 1);
        // the centre node touches three children of area 1/8 in each cell
        for i in 0..2 {
            assert!((meas.matrix.get(i, 0) - 0.125).abs() < 1e-16);
        }
        assert_eq!(pb.space().dim(), 1);
    }

    #[test]
    fn measurement_support_matches_geometry() {
        let (pb, meas) = setup(2, 2, CoefficientField::Mstrig, 2.0);
        let sp = pb.space();
        let coarse = sp.mesh().coarse_mesh();
        let mut total = vec![0.0; meas.num_measurements()];
        for (d, &v) in sp.free_nodes().iter().enumerate() {
            let p = sp.mesh().vertices()[v];
            let mut want = Vec::new();
            for (c, tri) in coarse.triangles().iter().enumerate() {
                let q = tri.map(|k| coarse.vertices()[k]);
                let det = (q[1][0] - q[0][0]) * (q[2][1] - q[0][1]) - (q[2][0] - q[0][0]) * (q[1][1] - q[0][1]);
                let l1 = ((p[0] - q[0][0]) * (q[2][1] - q[0][1]) - (q[2][0] - q[0][0]) * (p[1] - q[0][1])) / det;
                let l2 = ((q[1][0] - q[0][0]) * (p[1] - q[0][1]) - (p[0] - q[0][0]) * (q[1][1] - q[0][1])) / det;
                if l1 >= -1e-12 && l2 >= -1e-12 && l1 + l2 <= 1.0 + 1e-12 {
                    want.push(c);
                }
            }
            let got: Vec<usize> = (0..meas.num_measurements()).filter(|&i| meas.matrix.get(i, d) != 0.0).collect();
            assert_eq!(got, want, "node {v}");
            assert_eq!(cells_of_node(&meas, d), &want[..]);
            for i in got {
                total[i] += meas.matrix.get(i, d);
            }
        }
        let h2 = 0.5 * 0.5 * 0.5;
        for t in total {
            assert!(t < h2 && t > 0.0);
        }
    }

    #[test]
    fn global_basis_is_biorthogonal_and_reproduced() {
        let (pb, meas) = setup(2, 2, CoefficientField::Mstrig, 2.0);
        let a = pb.linearize(&FemState::zero(pb.space()), LinMode::Pgd);
        let cs = compute_basis(&a, &meas, pb.space(), None).unwrap();
        for i in 0..cs.num_bases() {
            let phi = cs.basis_dense(i);
            let m = meas.apply(&phi);
            for (j, v) in m.iter().enumerate() {
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
            let back = interpolate(&phi, &cs, &meas).unwrap();
            for (x, y) in back.iter().zip(&phi) {
                assert!((x - y).abs() < 1e-8 * phi.iter().fold(0.0f64, |s, v| s.max(v.abs())));
            }
        }
        let zero = vec![0.0; pb.space().dim()];
        assert!(interpolate(&zero, &cs, &meas).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn global_basis_matches_dense_kkt() {
        let (pb, meas) = setup(2, 2, CoefficientField::constant(1.0).unwrap(), 2.0);
        let a = pb.linearize(&FemState::zero(pb.space()), LinMode::Pgd);
        let cs = compute_basis(&a, &meas, pb.space(), None).unwrap();
        let n = pb.space().dim();
        let m = meas.num_measurements();
        let mut kkt = DMatrix::zeros(n + m, n + m);
        let ad = a.matrix.to_dense();
        let bd = meas.matrix.to_dense();
        kkt.view_mut((0, 0), (n, n)).copy_from(&ad);
        kkt.view_mut((0, n), (n, m)).copy_from(&bd.transpose());
        kkt.view_mut((n, 0), (m, n)).copy_from(&bd);
        let lu = kkt.lu();
        for i in 0..m {
            let mut rhs = nalgebra::DVector::zeros(n + m);
            rhs[n + i] = 1.0;
            let sol = lu.solve(&rhs).unwrap();
            let phi = cs.basis_dense(i);
            let scale = sol.rows(0, n).amax();
            for k in 0..n {
                assert!((phi[k] - sol[k]).abs() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn optimal_recovery_split() {
        let (pb, meas) = setup(4, 2, CoefficientField::Mstrig, 2.0);
        let a = pb.linearize(&FemState::zero(pb.space()), LinMode::Pgd);
        let cs = compute_basis(&a, &meas, pb.space(), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let w: Vec<f64> = (0..pb.space().dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wi = interpolate(&w, &cs, &meas).unwrap();
            let rest: Vec<f64> = w.iter().zip(&wi).map(|(a, b)| a - b).collect();
            let lhs = a_norm_sq(&a.matrix, &w);
            let rhs = a_norm_sq(&a.matrix, &wi) + a_norm_sq(&a.matrix, &rest);
            assert!((lhs - rhs).abs() <= 1e-8 * lhs);
        }
    }

    #[test]
    fn local_basis_respects_patch() {
        let (pb, meas) = setup(4, 2, CoefficientField::Mstrig, 5.0);
        let a = pb.linearize(&FemState::zero(pb.space()), LinMode::Pgd);
        let cs = compute_basis(&a, &meas, pb.space(), Some(1)).unwrap();
        for i in 0..cs.num_bases() {
            let patch = cs.patches[i].as_ref().unwrap();
            assert!(cs.bases[i].indices.iter().all(|d| patch.dofs.binary_search(d).is_ok()));
            let m = meas.apply(&cs.basis_dense(i));
            for &j in &patch.cells {
                assert!((m[j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn truncation_error_decays() {
        let (pb, meas) = setup(4, 2, CoefficientField::Mstrig, 2.0);
        let a = pb.linearize(&FemState::zero(pb.space()), LinMode::Pgd);
        let global = compute_basis(&a, &meas, pb.space(), None).unwrap();
        let mut errs = Vec::new();
        for l in 1..=3 {
            let local = compute_basis(&a, &meas, pb.space(), Some(l)).unwrap();
            let worst = (0..global.num_bases())
                .map(|i| {
                    let d: Vec<f64> = global.basis_dense(i).iter().zip(local.basis_dense(i)).map(|(x, y)| x - y).collect();
                    a_norm_sq(&a.matrix, &d).sqrt()
                })
                .fold(0.0f64, f64::max);
            errs.push(worst);
        }
        assert!(errs[1] < 0.7 * errs[0] && errs[2] < 0.7 * errs[1], "{errs:?}");
    }

    #[test]
    fn parallel_and_sequential_bases_agree() {
        let (pb, meas) = setup(4, 2, CoefficientField::Mstrig, 5.0);
        let a = pb.linearize(&FemState::zero(pb.space()), LinMode::Newton);
        let cs = compute_basis(&a, &meas, pb.space(), Some(2)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let seq = pool.install(|| compute_basis(&a, &meas, pb.space(), Some(2)).unwrap());
        assert_eq!(cs, seq);
        let mut upd = cs.clone();
        let rev: Vec<usize> = (0..cs.num_bases()).rev().collect();
        upd.update(&a, &meas, &rev).unwrap();
        assert_eq!(upd, cs);
    }

    #[test]
    fn coarse_matrix_is_spd() {
        let (pb, meas) = setup(4, 2, CoefficientField::Mstrig, 5.0);
        let a = pb.linearize(&FemState::zero(pb.space()), LinMode::Pgd);
        let cs = compute_basis(&a, &meas, pb.space(), Some(2)).unwrap();
        let k = cs.coarse_matrix(&a.matrix);
        assert!(k.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn coarse_solve_degenerate_cases() {
        let (pb, meas) = setup(2, 2, CoefficientField::Mstrig, 2.0);
        let sp = pb.space();
        let a = pb.linearize(&FemState::zero(sp), LinMode::Pgd);
        let cs = compute_basis(&a, &meas, sp, Some(1)).unwrap();
        assert!(coarse_solve(&a, &vec![0.0; sp.dim()], &cs).unwrap().iter().all(|&x| x == 0.0));

        let n = sp.dim();
        let unit = (0..n)
            .map(|i| SparseVector {
                indices: vec![i],
                values: vec![1.0],
            })
            .collect();
        let full = CoarseSpace::from_bases(unit, n);
        let w = coarse_solve(&a, pb.load(), &full).unwrap();
        let want = solve_spd(&a.matrix, pb.load(), DEFAULT_TOL).unwrap();
        for (x, y) in w.iter().zip(&want) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn indicator_examples() {
        let (pb, meas) = setup(4, 2, CoefficientField::Mstrig, 2.0);
        let sp = pb.space();
        let a = pb.linearize(&FemState::zero(sp), LinMode::Pgd);
        let cs = compute_basis(&a, &meas, sp, Some(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let incr = pb.state((0..sp.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let a_incr = pb.linearize(&incr, LinMode::Pgd);
        let k = pb.kappa_stiffness();
        for i in [0, 7, 31] {
            let phi = cs.basis_dense(i);
            let want = a_norm_sq(&k, &phi);
            assert!((update_indicator(&a_incr, &cs.bases[i]) - want).abs() <= 1e-12 * want);
        }
        let empty = SparseVector {
            indices: vec![],
            values: vec![],
        };
        assert_eq!(update_indicator(&a_incr, &empty), 0.0);

        let pb5 = pb.with_nfunction(NFunction::default_regularized(5.0).unwrap());
        let a0 = pb5.linearize(&FemState::zero(sp), LinMode::Pgd);
        let phi = cs.basis_dense(3);
        let want = 1e-6 * a_norm_sq(&k, &phi);
        assert!((update_indicator(&a0, &cs.bases[3]) - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn cache_reload_is_exact() {
        let (pb, meas) = setup(2, 2, CoefficientField::Mstrig, 5.0);
        let sp = pb.space();
        let a = pb.linearize(&FemState::zero(sp), LinMode::Newton);
        let dir = tempfile::tempdir().unwrap();
        for layers in [None, Some(1)] {
            let cs = compute_basis(&a, &meas, sp, layers).unwrap();
            let path = dir.path().join(cache_file_name(sp.mesh().fingerprint(), a.fingerprint, layers));
            cs.save(&path, sp.mesh().fingerprint()).unwrap();
            assert_eq!(CoarseSpace::load(&path, sp).unwrap(), cs);
        }
        let other = setup(2, 1, CoefficientField::Mstrig, 5.0).0;
        let path = dir.path().join(cache_file_name(sp.mesh().fingerprint(), a.fingerprint, None));
        assert!(matches!(CoarseSpace::load(&path, other.space()), Err(GrpsError::Cache(_))));
    }

    #[test]
    fn default_layer_rule() {
        assert_eq!(default_layers(0.5), 2);
        assert_eq!(default_layers(0.25), 2);
        assert_eq!(default_layers(0.125), 3);
        assert_eq!(default_layers(1.0 / 32.0), 5);
    }
}
