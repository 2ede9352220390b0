//! P1 finite elements for the energy `J(u) = ∫ κ φ(|∇u|) − ∫ f u` with
//! homogeneous Dirichlet data.
//!
//! Vectors live on the free (non-boundary) nodes in increasing node order.
//! Gradients and coefficients are constant per triangle, so every flux
//! integral is evaluated exactly; the load is the mass-matrix pairing of the
//! nodal interpolant of `f`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use thiserror::Error;

use crate::coeff::ElementCoefficients;
use crate::mesh::Mesh;
use crate::nfunc::NFunction;
use crate::sparsela::{dot, CholeskyFactor, CsrMatrix, SparseError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("mesh has no free nodes")]
    NoFreeNodes,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("coefficients were sampled on a different mesh")]
    MeshMismatch,
    #[error(transparent)]
    Linear(#[from] SparseError),
}

const NONE: usize = usize::MAX;

/// Which linearization of the energy to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinMode {
    /// Plain Laplacian, independent of the state and of `κ`.
    Gd,
    /// Secant-weighted operator `∫ κ φ′(|∇u|)/|∇u| ∇w·∇v`.
    Pgd,
    /// Second variation of the energy.
    Newton,
}

impl LinMode {
    pub fn name(self) -> &'static str {
        match self {
            LinMode::Gd => "gd",
            LinMode::Pgd => "pgd",
            LinMode::Newton => "newton",
        }
    }
}

/// Discrete space data that does not depend on a state: DOF numbering,
/// element geometry, the sparsity pattern, the mass matrix and the Laplacian.
#[derive(Debug)]
pub struct FemSpace {
    mesh: Arc<Mesh>,
    dof_of_node: Vec<usize>,
    free_nodes: Vec<usize>,
    areas: Vec<f64>,
    hat_grads: Vec<[[f64; 2]; 3]>,
    pattern: CsrMatrix,
    /// For each triangle, the value slot of entry `(a, b)` at `3a + b`.
    slots: Vec<[usize; 9]>,
    mass: CsrMatrix,
    mass_factor: CholeskyFactor,
    laplacian: CsrMatrix,
}

/// Element mass matrix `∫_T λ_a λ_b`.
pub fn element_mass(area: f64) -> [[f64; 3]; 3] {
    let d = area / 6.0;
    let o = area / 12.0;
    [[d, o, o], [o, d, o], [o, o, d]]
}

/// Element matrix `area·(w ∇λ_a·∇λ_b + c (g·∇λ_a)(g·∇λ_b))`.
pub fn element_matrix(grads: &[[f64; 2]; 3], area: f64, w: f64, c: f64, g: [f64; 2]) -> [[f64; 3]; 3] {
    let mut k = [[0.0; 3]; 3];
    let proj: [f64; 3] = std::array::from_fn(|a| g[0] * grads[a][0] + g[1] * grads[a][1]);
    for a in 0..3 {
        for b in 0..3 {
            let gg = grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1];
            k[a][b] = area * (w * gg + c * proj[a] * proj[b]);
        }
    }
    k
}

fn hat_gradients(p: [[f64; 2]; 3]) -> ([[f64; 2]; 3], f64) {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let mut g = [[0.0; 2]; 3];
    for a in 0..3 {
        let b = p[(a + 1) % 3];
        let c = p[(a + 2) % 3];
        g[a] = [(b[1] - c[1]) / det, (c[0] - b[0]) / det];
    }
    (g, 0.5 * det.abs())
}

/// Consistent mass matrix over all nodes of `mesh`, boundary included.
pub fn assemble_mass_full(mesh: &Mesh) -> CsrMatrix {
    let mut trip = Vec::with_capacity(9 * mesh.num_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let m = element_mass(mesh.signed_area(t).abs());
        for a in 0..3 {
            for b in 0..3 {
                trip.push((tri[a], tri[b], m[a][b]));
            }
        }
    }
    let n = mesh.num_vertices();
    CsrMatrix::from_triplets(n, n, &trip)
}

/// Consistent mass matrix over the free nodes of `mesh`.
pub fn assemble_mass(mesh: &Mesh) -> CsrMatrix {
    let free: Vec<usize> = (0..mesh.num_vertices()).filter(|&v| !mesh.is_boundary(v)).collect();
    assemble_mass_full(mesh).submatrix(&free, &free)
}

/// `sqrt(rᵀ M⁻¹ r)`, the dual norm of `r` with respect to the `M` inner product.
pub fn residual_l2h_norm(r: &[f64], mass: &CsrMatrix, tol: f64) -> Result<f64, SparseError> {
    if r.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let z = crate::sparsela::solve_spd(mass, r, tol)?;
    Ok(dot(r, &z).max(0.0).sqrt())
}

impl FemSpace {
    pub fn new(mesh: Arc<Mesh>) -> Result<Self, FemError> {
        let nv = mesh.num_vertices();
        let mut dof_of_node = vec![NONE; nv];
        let mut free_nodes = Vec::new();
        for v in 0..nv {
            if !mesh.is_boundary(v) {
                dof_of_node[v] = free_nodes.len();
                free_nodes.push(v);
            }
        }
        if free_nodes.is_empty() {
            return Err(FemError::NoFreeNodes);
        }
        let n = free_nodes.len();
        let nt = mesh.num_triangles();
        let mut areas = Vec::with_capacity(nt);
        let mut hat_grads = Vec::with_capacity(nt);
        let mut trip = Vec::with_capacity(9 * nt);
        for tri in mesh.triangles() {
            let pts = tri.map(|v| mesh.vertices()[v]);
            let (g, area) = hat_gradients(pts);
            areas.push(area);
            hat_grads.push(g);
            for &a in tri {
                for &b in tri {
                    let (da, db) = (dof_of_node[a], dof_of_node[b]);
                    if da != NONE && db != NONE {
                        trip.push((da, db, 0.0));
                    }
                }
            }
        }
        let pattern = CsrMatrix::from_triplets(n, n, &trip);
        let slots = mesh
            .triangles()
            .iter()
            .map(|tri| {
                let mut s = [NONE; 9];
                for a in 0..3 {
                    for b in 0..3 {
                        let (da, db) = (dof_of_node[tri[a]], dof_of_node[tri[b]]);
                        if da != NONE && db != NONE {
                            s[3 * a + b] = slot(&pattern, da, db);
                        }
                    }
                }
                s
            })
            .collect();
        let mut space = Self {
            mesh,
            dof_of_node,
            free_nodes,
            areas,
            hat_grads,
            pattern: pattern.clone(),
            slots,
            mass: pattern.clone(),
            mass_factor: CholeskyFactor::new(&CsrMatrix::identity(1))?,
            laplacian: pattern,
        };
        space.mass = space.scatter(|t| element_mass(space.areas[t]));
        space.mass_factor = CholeskyFactor::new(&space.mass)?;
        let ones = vec![1.0; nt];
        space.laplacian = space.assemble_weighted(&ones, None);
        Ok(space)
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    /// Number of free nodes.
    pub fn dim(&self) -> usize {
        self.free_nodes.len()
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free_nodes
    }

    /// Free-node index of mesh node `v`, `None` on the boundary.
    pub fn dof(&self, v: usize) -> Option<usize> {
        let d = self.dof_of_node[v];
        (d != NONE).then_some(d)
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn hat_grads(&self) -> &[[[f64; 2]; 3]] {
        &self.hat_grads
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn mass_factor(&self) -> &CholeskyFactor {
        &self.mass_factor
    }

    pub fn laplacian(&self) -> &CsrMatrix {
        &self.laplacian
    }

    /// Expands a free-node vector to all mesh nodes with zeros on the boundary.
    pub fn to_full(&self, u: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.mesh.num_vertices()];
        for (d, &v) in self.free_nodes.iter().enumerate() {
            full[v] = u[d];
        }
        full
    }

    /// Nodal interpolant of `f` restricted to the free nodes.
    pub fn interpolate_fn<F: Fn(f64, f64) -> f64>(&self, f: F) -> Vec<f64> {
        self.free_nodes
            .iter()
            .map(|&v| {
                let [x, y] = self.mesh.vertices()[v];
                f(x, y)
            })
            .collect()
    }

    /// Load vector `∫ f_h λ_i` for the nodal interpolant `f_h` of `f`,
    /// boundary values of `f` included.
    pub fn load_vector<F: Fn(f64, f64) -> f64>(&self, f: F) -> Vec<f64> {
        let fv: Vec<f64> = self.mesh.vertices().iter().map(|&[x, y]| f(x, y)).collect();
        let mut load = vec![0.0; self.dim()];
        for (t, tri) in self.mesh.triangles().iter().enumerate() {
            let m = element_mass(self.areas[t]);
            for a in 0..3 {
                let da = self.dof_of_node[tri[a]];
                if da == NONE {
                    continue;
                }
                load[da] += (0..3).map(|b| m[a][b] * fv[tri[b]]).sum::<f64>();
            }
        }
        load
    }

    /// Per-triangle gradient of the free-node vector `u`.
    pub fn gradients(&self, u: &[f64]) -> Vec<[f64; 2]> {
        self.mesh
            .triangles()
            .iter()
            .zip(&self.hat_grads)
            .map(|(tri, g)| {
                let mut out = [0.0; 2];
                for a in 0..3 {
                    let d = self.dof_of_node[tri[a]];
                    if d != NONE {
                        out[0] += u[d] * g[a][0];
                        out[1] += u[d] * g[a][1];
                    }
                }
                out
            })
            .collect()
    }

    fn scatter<F: Fn(usize) -> [[f64; 3]; 3]>(&self, element: F) -> CsrMatrix {
        let mut m = self.pattern.clone();
        let vals = m.values_mut();
        for (t, s) in self.slots.iter().enumerate() {
            let k = element(t);
            for a in 0..3 {
                for b in 0..3 {
                    let pos = s[3 * a + b];
                    if pos != NONE {
                        vals[pos] += k[a][b];
                    }
                }
            }
        }
        m
    }

    /// `Σ_T ∫_T w_T ∇λ_a·∇λ_b + c_T (g_T·∇λ_a)(g_T·∇λ_b)` over free nodes.
    pub fn assemble_weighted(&self, weights: &[f64], rank_one: Option<(&[f64], &[[f64; 2]])>) -> CsrMatrix {
        self.scatter(|t| {
            let (c, g) = match rank_one {
                Some((c, g)) => (c[t], g[t]),
                None => (0.0, [0.0; 2]),
            };
            element_matrix(&self.hat_grads[t], self.areas[t], weights[t], c, g)
        })
    }

    /// `Σ_T area_T w_T |g_T|²`.
    pub fn weighted_gradient_norm_sq(&self, grads: &[[f64; 2]], weights: &[f64]) -> f64 {
        grads
            .iter()
            .zip(weights)
            .zip(&self.areas)
            .map(|((g, w), a)| a * w * (g[0] * g[0] + g[1] * g[1]))
            .sum()
    }

    /// `sqrt(rᵀ M⁻¹ r)` with the cached mass factorization.
    pub fn residual_l2h(&self, r: &[f64]) -> f64 {
        if r.iter().all(|&x| x == 0.0) {
            return 0.0;
        }
        let z = self.mass_factor.solve(r);
        dot(r, &z).max(0.0).sqrt()
    }

    /// `(‖∇(u−v)‖_{L²}, ‖∇(u−v)‖_{L^p})`.
    pub fn error_norms(&self, u: &[f64], v: &[f64], p: f64) -> (f64, f64) {
        let d: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
        let g = self.gradients(&d);
        let mut h1 = 0.0;
        let mut wp = 0.0;
        for (gt, a) in g.iter().zip(&self.areas) {
            let s = gt[0].hypot(gt[1]);
            h1 += a * s * s;
            wp += a * s.powf(p);
        }
        (h1.sqrt(), wp.powf(1.0 / p))
    }
}

fn slot(m: &CsrMatrix, row: usize, col: usize) -> usize {
    let start = m.indptr()[row];
    let cols = &m.indices()[start..m.indptr()[row + 1]];
    start + cols.binary_search(&col).expect("pattern entry")
}

/// A state `u` on the free nodes with its cached element gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FemState {
    u: Vec<f64>,
    grads: Vec<[f64; 2]>,
    norms: Vec<f64>,
}

impl FemState {
    pub fn new(space: &FemSpace, u: Vec<f64>) -> Result<Self, FemError> {
        if u.len() != space.dim() {
            return Err(FemError::DimensionMismatch {
                expected: space.dim(),
                found: u.len(),
            });
        }
        let grads = space.gradients(&u);
        let norms = grads.iter().map(|g| g[0].hypot(g[1])).collect();
        Ok(Self { u, grads, norms })
    }

    pub fn zero(space: &FemSpace) -> Self {
        Self::new(space, vec![0.0; space.dim()]).expect("matching dimension")
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.u
    }

    pub fn grads(&self) -> &[[f64; 2]] {
        &self.grads
    }

    /// `|∇u|` per triangle.
    pub fn grad_norms(&self) -> &[f64] {
        &self.norms
    }

    /// `u + alpha·w` as a new state.
    pub fn step(&self, space: &FemSpace, alpha: f64, w: &[f64]) -> Self {
        let u = self.u.iter().zip(w).map(|(a, b)| a + alpha * b).collect();
        Self::new(space, u).expect("matching dimension")
    }
}

/// A linearized operator over the free nodes, tagged with the state it was
/// built at.
#[derive(Debug, Clone)]
pub struct LinearizedOperator {
    pub mode: LinMode,
    pub matrix: CsrMatrix,
    pub fingerprint: u64,
}

/// The energy functional on a fixed space: coefficients, N-function and load.
#[derive(Debug, Clone)]
pub struct Problem {
    space: Arc<FemSpace>,
    kappa: Vec<f64>,
    nf: NFunction,
    load: Vec<f64>,
}

impl Problem {
    pub fn new(space: Arc<FemSpace>, coeffs: &ElementCoefficients, nf: NFunction, load: Vec<f64>) -> Result<Self, FemError> {
        if coeffs.mesh_id != space.mesh().fingerprint() {
            return Err(FemError::MeshMismatch);
        }
        if load.len() != space.dim() {
            return Err(FemError::DimensionMismatch {
                expected: space.dim(),
                found: load.len(),
            });
        }
        Ok(Self {
            space,
            kappa: coeffs.values.clone(),
            nf,
            load,
        })
    }

    pub fn with_nfunction(&self, nf: NFunction) -> Self {
        Self { nf, ..self.clone() }
    }

    pub fn space(&self) -> &FemSpace {
        &self.space
    }

    pub fn space_arc(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn nf(&self) -> &NFunction {
        &self.nf
    }

    pub fn load(&self) -> &[f64] {
        &self.load
    }

    pub fn state(&self, u: Vec<f64>) -> Result<FemState, FemError> {
        FemState::new(&self.space, u)
    }

    /// `J(u) = Σ_T area κ φ(|∇u|) − fᵀMu`.
    pub fn energy(&self, s: &FemState) -> f64 {
        let flux: f64 = s
            .norms
            .iter()
            .zip(&self.kappa)
            .zip(&self.space.areas)
            .map(|((&t, k), a)| a * k * self.nf.phi(t))
            .sum();
        flux - dot(&self.load, &s.u)
    }

    /// `J′(u)` tested against every free hat.
    pub fn residual(&self, s: &FemState) -> Vec<f64> {
        let mut r: Vec<f64> = self.load.iter().map(|x| -x).collect();
        let tris = self.space.mesh.triangles();
        for (t, tri) in tris.iter().enumerate() {
            let w = self.kappa[t] * self.nf.secant(s.norms[t]) * self.space.areas[t];
            if w == 0.0 {
                continue;
            }
            let g = s.grads[t];
            let hg = &self.space.hat_grads[t];
            for a in 0..3 {
                let d = self.space.dof_of_node[tri[a]];
                if d != NONE {
                    r[d] += w * (g[0] * hg[a][0] + g[1] * hg[a][1]);
                }
            }
        }
        r
    }

    /// Per-triangle secant weights `κ φ′(|∇u|)/|∇u|`.
    pub fn secant_weights(&self, s: &FemState) -> Vec<f64> {
        s.norms.iter().zip(&self.kappa).map(|(&t, k)| k * self.nf.secant(t)).collect()
    }

    pub fn linearize(&self, s: &FemState, mode: LinMode) -> LinearizedOperator {
        let weights = match mode {
            LinMode::Gd => vec![1.0; self.kappa.len()],
            _ => self.secant_weights(s),
        };
        let matrix = match mode {
            LinMode::Gd => self.space.laplacian.clone(),
            LinMode::Pgd => self.space.assemble_weighted(&weights, None),
            LinMode::Newton => {
                let c: Vec<f64> = s
                    .norms
                    .iter()
                    .zip(&self.kappa)
                    .map(|(&t, k)| k * self.nf.newton_weight(t))
                    .collect();
                let fp = operator_fingerprint(mode, &self.nf, &weights, Some(&c));
                return LinearizedOperator {
                    mode,
                    matrix: self.space.assemble_weighted(&weights, Some((&c, &s.grads))),
                    fingerprint: fp,
                };
            }
        };
        LinearizedOperator {
            mode,
            fingerprint: operator_fingerprint(mode, &self.nf, &weights, None),
            matrix,
        }
    }

    /// `κ`-weighted stiffness matrix, the operator of the linear problem.
    pub fn kappa_stiffness(&self) -> CsrMatrix {
        self.space.assemble_weighted(&self.kappa, None)
    }

    /// `∫ κ φ″(|∇u|+|∇w|)|∇w|²`.
    pub fn quasi_norm(&self, s: &FemState, w: &[f64]) -> f64 {
        self.quasi_norm_grads(s.grads(), &self.space.gradients(w))
    }

    pub fn quasi_norm_grads(&self, gu: &[[f64; 2]], gw: &[[f64; 2]]) -> f64 {
        gu.iter()
            .zip(gw)
            .enumerate()
            .map(|(t, (a, b))| {
                let nw2 = b[0] * b[0] + b[1] * b[1];
                if nw2 == 0.0 {
                    return 0.0;
                }
                let x = a[0].hypot(a[1]) + nw2.sqrt();
                self.space.areas[t] * self.kappa[t] * self.nf.ddphi(x) * nw2
            })
            .sum()
    }

    /// `J(u) − J(v) − J′(v)(u − v)`.
    pub fn bregman(&self, u: &FemState, v: &FemState) -> f64 {
        let r = self.residual(v);
        let d: f64 = r.iter().zip(u.u()).zip(v.u()).map(|((r, a), b)| r * (a - b)).sum();
        self.energy(u) - self.energy(v) - d
    }
}

/// Hash of the mode, N-function parameters and per-element weights rounded
/// to `1e−12`.
pub fn operator_fingerprint(mode: LinMode, nf: &NFunction, weights: &[f64], extra: Option<&[f64]>) -> u64 {
    let mut h = DefaultHasher::new();
    mode.hash(&mut h);
    nf.kind().name().hash(&mut h);
    for x in [nf.p(), nf.eps_minus(), nf.eps_plus()] {
        x.to_bits().hash(&mut h);
    }
    let q = |x: f64| ((x / 1e-12).round()).to_bits();
    for &w in weights {
        q(w).hash(&mut h);
    }
    if let Some(e) = extra {
        for &w in e {
            q(w).hash(&mut h);
        }
    }
    h.finish()
}
