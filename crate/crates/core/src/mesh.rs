//! Structured triangulations of a rectangle.
//!
//! A coarse mesh splits an `Nc_x × Nc_y` grid of cells into two triangles per
//! cell along the (1,1) diagonal. Uniform red refinement of that mesh is again
//! a structured mesh of the same shape with twice as many cells per axis, so
//! nodes are kept in row-major grid order at every level. Each refined mesh
//! remembers the level-0 mesh it came from and the coarse ancestor of each of
//! its triangles, which is what the coarse-patch machinery needs.

use std::collections::HashMap;
use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("coarse element index {index} out of range (mesh has {count} coarse elements)")]
    IndexOutOfRange { index: usize, count: usize },
}

/// The rectangle `[0, lx] × [0, ly]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub lx: f64,
    pub ly: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }
}

/// Cell counts of a structured grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    domain: Rect,
    grid: Option<GridDims>,
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<bool>,
    level: usize,
    /// Level-0 ancestor of every triangle; `None` for a coarse mesh.
    parent: Option<Vec<usize>>,
    coarse: Option<Arc<Mesh>>,
}

/// Builds the level-0 mesh of `ncx × ncy` cells on `[0, lx] × [0, ly]`.
pub fn build_coarse_mesh(ncx: usize, ncy: usize, lx: f64, ly: f64) -> Result<Mesh, MeshError> {
    if ncx == 0 || ncy == 0 {
        return Err(MeshError::InvalidArgument(format!(
            "cell counts must be positive, got {ncx}×{ncy}"
        )));
    }
    if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
        return Err(MeshError::InvalidArgument(format!(
            "domain lengths must be positive and finite, got {lx}×{ly}"
        )));
    }
    let dims = GridDims { nx: ncx, ny: ncy };
    let domain = Rect { lx, ly };
    let (vertices, boundary) = grid_vertices(domain, dims);
    let mut triangles = Vec::with_capacity(2 * ncx * ncy);
    let idx = |i: usize, j: usize| j * (ncx + 1) + i;
    for j in 0..ncy {
        for i in 0..ncx {
            let v00 = idx(i, j);
            let v10 = idx(i + 1, j);
            let v11 = idx(i + 1, j + 1);
            let v01 = idx(i, j + 1);
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    Ok(Mesh {
        domain,
        grid: Some(dims),
        vertices,
        triangles,
        boundary,
        level: 0,
        parent: None,
        coarse: None,
    })
}

fn grid_vertices(domain: Rect, dims: GridDims) -> (Vec<[f64; 2]>, Vec<bool>) {
    let mut vertices = Vec::with_capacity((dims.nx + 1) * (dims.ny + 1));
    let mut boundary = Vec::with_capacity(vertices.capacity());
    for j in 0..=dims.ny {
        for i in 0..=dims.nx {
            vertices.push([
                domain.lx * i as f64 / dims.nx as f64,
                domain.ly * j as f64 / dims.ny as f64,
            ]);
            boundary.push(i == 0 || j == 0 || i == dims.nx || j == dims.ny);
        }
    }
    (vertices, boundary)
}

/// Refines `mesh` uniformly `levels` times, splitting every triangle into four
/// congruent children through its edge midpoints.
pub fn refine(mesh: &Mesh, levels: usize) -> Mesh {
    let mut current = mesh.clone();
    for _ in 0..levels {
        current = refine_once(&current);
    }
    current
}

fn refine_once(mesh: &Mesh) -> Mesh {
    let mut vertices = mesh.vertices.clone();
    let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
    let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<[f64; 2]>| -> usize {
        let key = (a.min(b), a.max(b));
        *midpoints.entry(key).or_insert_with(|| {
            let (pa, pb) = (vertices[a], vertices[b]);
            vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
            vertices.len() - 1
        })
    };

    let mut triangles = Vec::with_capacity(4 * mesh.triangles.len());
    let mut parent = Vec::with_capacity(4 * mesh.triangles.len());
    for (t, &[a, b, c]) in mesh.triangles.iter().enumerate() {
        let ab = midpoint(a, b, &mut vertices);
        let bc = midpoint(b, c, &mut vertices);
        let ca = midpoint(c, a, &mut vertices);
        let ancestor = mesh.parent.as_ref().map_or(t, |p| p[t]);
        for child in [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]] {
            triangles.push(child);
            parent.push(ancestor);
        }
    }

    let coarse = match &mesh.coarse {
        Some(c) => Arc::clone(c),
        None => Arc::new(mesh.clone()),
    };

    match mesh.grid {
        Some(dims) => {
            // Renumber row-major on the doubled grid and snap coordinates.
            let fine = GridDims {
                nx: 2 * dims.nx,
                ny: 2 * dims.ny,
            };
            let hx = mesh.domain.lx / fine.nx as f64;
            let hy = mesh.domain.ly / fine.ny as f64;
            let renumber: Vec<usize> = vertices
                .iter()
                .map(|p| {
                    let i = (p[0] / hx).round() as usize;
                    let j = (p[1] / hy).round() as usize;
                    j * (fine.nx + 1) + i
                })
                .collect();
            let (grid_vertices, boundary) = grid_vertices(mesh.domain, fine);
            debug_assert_eq!(grid_vertices.len(), vertices.len());
            for tri in triangles.iter_mut() {
                for v in tri.iter_mut() {
                    *v = renumber[*v];
                }
            }
            Mesh {
                domain: mesh.domain,
                grid: Some(fine),
                vertices: grid_vertices,
                triangles,
                boundary,
                level: mesh.level + 1,
                parent: Some(parent),
                coarse: Some(coarse),
            }
        }
        None => {
            let mut boundary = mesh.boundary.clone();
            boundary.resize(vertices.len(), false);
            for (&(a, b), &m) in &midpoints {
                boundary[m] = mesh.boundary[a] && mesh.boundary[b];
            }
            Mesh {
                domain: mesh.domain,
                grid: None,
                vertices,
                triangles,
                boundary,
                level: mesh.level + 1,
                parent: Some(parent),
                coarse: Some(coarse),
            }
        }
    }
}

impl Mesh {
    pub fn domain(&self) -> Rect {
        self.domain
    }

    pub fn grid(&self) -> Option<GridDims> {
        self.grid
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.vertices.len()).filter(|&v| self.boundary[v]).collect()
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// Level-0 ancestor of every triangle, `None` for a coarse mesh.
    pub fn parents(&self) -> Option<&[usize]> {
        self.parent.as_deref()
    }

    /// Level-0 ancestor of triangle `t` (itself on a coarse mesh).
    pub fn coarse_parent(&self, t: usize) -> usize {
        self.parent.as_ref().map_or(t, |p| p[t])
    }

    /// The level-0 mesh this mesh was refined from (itself at level 0).
    pub fn coarse_mesh(&self) -> &Mesh {
        self.coarse.as_deref().unwrap_or(self)
    }

    pub fn num_coarse_triangles(&self) -> usize {
        self.coarse_mesh().num_triangles()
    }

    /// Fine edge length along the x axis.
    pub fn hx(&self) -> f64 {
        match self.grid {
            Some(d) => self.domain.lx / d.nx as f64,
            None => f64::NAN,
        }
    }

    /// Coarse edge length along the x axis.
    pub fn coarse_hx(&self) -> f64 {
        self.coarse_mesh().hx()
    }

    /// Signed area, positive for counter-clockwise triangles.
    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    pub fn barycenter(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        [
            (pa[0] + pb[0] + pc[0]) / 3.0,
            (pa[1] + pb[1] + pc[1]) / 3.0,
        ]
    }

    /// Stable identifier of the mesh shape, used to tag derived data.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.domain.lx.to_bits().hash(&mut h);
        self.domain.ly.to_bits().hash(&mut h);
        self.grid.map(|d| (d.nx, d.ny)).hash(&mut h);
        self.level.hash(&mut h);
        self.vertices.len().hash(&mut h);
        self.triangles.hash(&mut h);
        self.coarse_mesh().num_triangles().hash(&mut h);
        h.finish()
    }

    /// Plain-text dump: one `v x y` line per vertex, then one `t a b c` line
    /// per triangle. Debugging aid only.
    pub fn write_dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (v, p) in self.vertices.iter().enumerate() {
            writeln!(w, "v {} {} {}", p[0], p[1], u8::from(self.boundary[v]))?;
        }
        for t in &self.triangles {
            writeln!(w, "t {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

/// An `ℓ`-layer patch of coarse triangles around a central coarse triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center: usize,
    pub layers: usize,
    /// Coarse triangles of the patch, sorted.
    pub elements: Vec<usize>,
    /// Fine triangles whose coarse ancestor lies in the patch, sorted.
    pub fine_elements: Vec<usize>,
    /// Fine nodes in the open patch that are not on the domain boundary, sorted.
    pub interior_fine_nodes: Vec<usize>,
}

/// Grows `Ω_i^0 = T_i` by `layers` rounds of vertex-sharing neighbours.
pub fn build_patch(mesh: &Mesh, center: usize, layers: usize) -> Result<Patch, MeshError> {
    let coarse = mesh.coarse_mesh();
    let count = coarse.num_triangles();
    if center >= count {
        return Err(MeshError::IndexOutOfRange {
            index: center,
            count,
        });
    }

    let mut vertex_tris: Vec<Vec<usize>> = vec![Vec::new(); coarse.num_vertices()];
    for (t, tri) in coarse.triangles.iter().enumerate() {
        for &v in tri {
            vertex_tris[v].push(t);
        }
    }

    let mut in_patch = vec![false; count];
    in_patch[center] = true;
    let mut elements = vec![center];
    for _ in 0..layers {
        let mut grown = elements.clone();
        for &t in &elements {
            for &v in &coarse.triangles[t] {
                for &s in &vertex_tris[v] {
                    if !in_patch[s] {
                        in_patch[s] = true;
                        grown.push(s);
                    }
                }
            }
        }
        if grown.len() == elements.len() {
            break;
        }
        elements = grown;
    }
    elements.sort_unstable();

    let fine_elements: Vec<usize> = (0..mesh.num_triangles())
        .filter(|&t| in_patch[mesh.coarse_parent(t)])
        .collect();

    // A node is inside the open patch when every triangle touching it is in the patch.
    let mut total = vec![0u32; mesh.num_vertices()];
    for tri in &mesh.triangles {
        for &v in tri {
            total[v] += 1;
        }
    }
    let mut inside = vec![0u32; mesh.num_vertices()];
    for &t in &fine_elements {
        for &v in &mesh.triangles[t] {
            inside[v] += 1;
        }
    }
    let interior_fine_nodes = (0..mesh.num_vertices())
        .filter(|&v| inside[v] > 0 && inside[v] == total[v] && !mesh.boundary[v])
        .collect();

    Ok(Patch {
        center,
        layers,
        elements,
        fine_elements,
        interior_fine_nodes,
    })
}

/// Extracts the fine triangles of `patch` as a standalone mesh. Returns the
/// submesh and the map from submesh node index to `mesh` node index. Nodes
/// not strictly inside the patch are flagged as boundary.
pub fn extract_submesh(mesh: &Mesh, patch: &Patch) -> (Mesh, Vec<usize>) {
    let mut nodes: Vec<usize> = patch
        .fine_elements
        .iter()
        .flat_map(|&t| mesh.triangles[t])
        .collect();
    nodes.sort_unstable();
    nodes.dedup();

    let mut local = vec![usize::MAX; mesh.num_vertices()];
    for (k, &v) in nodes.iter().enumerate() {
        local[v] = k;
    }
    let mut interior = vec![false; mesh.num_vertices()];
    for &v in &patch.interior_fine_nodes {
        interior[v] = true;
    }

    let vertices = nodes.iter().map(|&v| mesh.vertices[v]).collect();
    let boundary = nodes.iter().map(|&v| !interior[v]).collect();
    let triangles = patch
        .fine_elements
        .iter()
        .map(|&t| {
            let [a, b, c] = mesh.triangles[t];
            [local[a], local[b], local[c]]
        })
        .collect();
    let parent = patch
        .fine_elements
        .iter()
        .map(|&t| mesh.coarse_parent(t))
        .collect();
    let full = nodes.len() == mesh.num_vertices() && patch.fine_elements.len() == mesh.num_triangles();

    let sub = Mesh {
        domain: mesh.domain,
        grid: if full { mesh.grid } else { None },
        vertices,
        triangles,
        boundary,
        level: mesh.level,
        parent: if mesh.level == 0 { None } else { Some(parent) },
        coarse: mesh.coarse.clone(),
    };
    (sub, nodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total_area(m: &Mesh) -> f64 {
        (0..m.num_triangles()).map(|t| m.signed_area(t)).sum()
    }

    #[test]
    fn coarse_counts() {
        let m = build_coarse_mesh(2, 2, 1.0, 1.0).unwrap();
        assert_eq!(m.num_triangles(), 8);
        assert_eq!(m.num_vertices(), 9);
        let m = build_coarse_mesh(1, 1, 1.0, 1.0).unwrap();
        assert_eq!(m.num_triangles(), 2);
        assert_eq!(m.num_vertices(), 4);
    }

    #[test]
    fn rectangular_domain_has_far_corner() {
        let m = build_coarse_mesh(10, 3, 2.2, 0.6).unwrap();
        assert_eq!(m.num_triangles(), 60);
        assert!(m.vertices().iter().any(|p| p[0] == 2.2 && p[1] == 0.6));
    }

    #[test]
    fn invalid_arguments() {
        assert!(build_coarse_mesh(0, 2, 1.0, 1.0).is_err());
        assert!(build_coarse_mesh(2, 2, 0.0, 1.0).is_err());
        assert!(build_coarse_mesh(2, 2, 1.0, -1.0).is_err());
    }

    #[test]
    fn refinement_counts_and_identity() {
        let m = build_coarse_mesh(1, 1, 1.0, 1.0).unwrap();
        assert_eq!(refine(&m, 2).num_triangles(), 32);
        let m = build_coarse_mesh(2, 2, 1.0, 1.0).unwrap();
        let same = refine(&m, 0);
        assert_eq!(same.triangles(), m.triangles());
        assert_eq!(same.vertices(), m.vertices());
    }

    #[test]
    fn refined_edge_length() {
        let m = refine(&build_coarse_mesh(4, 4, 1.0, 1.0).unwrap(), 5);
        assert_eq!(m.hx(), 2f64.powi(-7));
        assert_eq!(m.grid(), Some(GridDims { nx: 128, ny: 128 }));
    }

    #[test]
    fn refinement_matches_structured_grid() {
        // Refining Nc=2 twice gives the same node set and element set as Nc=8.
        let a = refine(&build_coarse_mesh(2, 2, 1.0, 1.0).unwrap(), 2);
        let b = build_coarse_mesh(8, 8, 1.0, 1.0).unwrap();
        assert_eq!(a.vertices(), b.vertices());
        assert_eq!(a.boundary_flags(), b.boundary_flags());
        let norm = |m: &Mesh| {
            let mut v: Vec<[usize; 3]> = m
                .triangles()
                .iter()
                .map(|t| {
                    let mut t = *t;
                    t.sort_unstable();
                    t
                })
                .collect();
            v.sort_unstable();
            v
        };
        assert_eq!(norm(&a), norm(&b));
    }

    #[test]
    fn orientation_area_and_parents() {
        let c = build_coarse_mesh(3, 2, 1.5, 0.7).unwrap();
        for level in 0..4 {
            let m = refine(&c, level);
            assert_eq!(m.num_triangles(), 2 * 3 * 2 * 4usize.pow(level as u32));
            for t in 0..m.num_triangles() {
                assert!(m.signed_area(t) > 0.0);
            }
            let area = total_area(&m);
            assert!((area - 1.5 * 0.7).abs() <= 1e-12 * 1.05);
            let mut by_parent = vec![0.0; c.num_triangles()];
            for t in 0..m.num_triangles() {
                by_parent[m.coarse_parent(t)] += m.signed_area(t);
            }
            for (k, a) in by_parent.iter().enumerate() {
                let want = c.signed_area(k);
                assert!((a - want).abs() <= 1e-12 * want);
            }
        }
    }

    #[test]
    fn boundary_nodes_are_on_the_rectangle_edge() {
        let m = refine(&build_coarse_mesh(2, 3, 2.0, 3.0).unwrap(), 2);
        for (v, p) in m.vertices().iter().enumerate() {
            let on = p[0] == 0.0 || p[1] == 0.0 || p[0] == 2.0 || p[1] == 3.0;
            assert_eq!(on, m.is_boundary(v), "vertex {v} at {p:?}");
        }
    }

    fn brute_force_patch(coarse: &Mesh, center: usize, layers: usize) -> Vec<usize> {
        let mut set = vec![center];
        for _ in 0..layers {
            let mut next = Vec::new();
            for t in 0..coarse.num_triangles() {
                let touches = set.iter().any(|&s| {
                    coarse.triangles()[t]
                        .iter()
                        .any(|v| coarse.triangles()[s].contains(v))
                });
                if touches {
                    next.push(t);
                }
            }
            set = next;
        }
        set.sort_unstable();
        set
    }

    #[test]
    fn patch_matches_brute_force() {
        let fine = refine(&build_coarse_mesh(4, 4, 1.0, 1.0).unwrap(), 1);
        let coarse = fine.coarse_mesh();
        for center in [0, 9, 10, 13, 31] {
            for layers in 0..4 {
                let p = build_patch(&fine, center, layers).unwrap();
                assert_eq!(p.elements, brute_force_patch(coarse, center, layers));
            }
        }
        assert_eq!(build_patch(&fine, 10, 0).unwrap().elements, vec![10]);
    }

    #[test]
    fn patch_saturates_small_grid() {
        let fine = refine(&build_coarse_mesh(2, 2, 1.0, 1.0).unwrap(), 1);
        for i in 0..8 {
            let p = build_patch(&fine, i, 3).unwrap();
            assert_eq!(p.elements, (0..8).collect::<Vec<_>>());
            assert_eq!(p.fine_elements.len(), fine.num_triangles());
        }
    }

    #[test]
    fn patch_is_monotone_in_layers() {
        let fine = refine(&build_coarse_mesh(5, 4, 1.0, 1.0).unwrap(), 1);
        let mut prev = build_patch(&fine, 17, 0).unwrap();
        for layers in 1..8 {
            let p = build_patch(&fine, 17, layers).unwrap();
            assert!(prev.elements.iter().all(|e| p.elements.contains(e)));
            assert!(prev
                .interior_fine_nodes
                .iter()
                .all(|v| p.interior_fine_nodes.contains(v)));
            prev = p;
        }
        let sat = build_patch(&fine, 17, 20).unwrap();
        assert_eq!(sat.elements.len(), 40);
        assert_eq!(build_patch(&fine, 17, 21).unwrap().elements, sat.elements);
    }

    #[test]
    fn patch_index_out_of_range() {
        let m = build_coarse_mesh(2, 2, 1.0, 1.0).unwrap();
        assert_eq!(
            build_patch(&m, 8, 1),
            Err(MeshError::IndexOutOfRange { index: 8, count: 8 })
        );
    }

    #[test]
    fn full_patch_submesh_is_identity() {
        let fine = refine(&build_coarse_mesh(2, 2, 1.0, 1.0).unwrap(), 2);
        let p = build_patch(&fine, 0, 5).unwrap();
        let (sub, map) = extract_submesh(&fine, &p);
        assert_eq!(map, (0..fine.num_vertices()).collect::<Vec<_>>());
        assert_eq!(sub.triangles(), fine.triangles());
        assert_eq!(sub.boundary_flags(), fine.boundary_flags());
    }

    #[test]
    fn interior_patch_submesh_node_count() {
        let fine = refine(&build_coarse_mesh(4, 4, 1.0, 1.0).unwrap(), 1);
        let p = build_patch(&fine, 10, 1).unwrap();
        let mut nodes = std::collections::BTreeSet::new();
        for &t in &p.fine_elements {
            nodes.extend(fine.triangles()[t]);
        }
        let (sub, map) = extract_submesh(&fine, &p);
        assert_eq!(sub.num_vertices(), nodes.len());
        assert_eq!(map, nodes.into_iter().collect::<Vec<_>>());
        for t in 0..sub.num_triangles() {
            assert!(sub.signed_area(t) > 0.0);
        }
    }

    #[test]
    fn corner_triangle_submesh_flags() {
        // Coarse triangle 0 of a 2×2 grid on [0,1]²: (0,0), (0.5,0), (0.5,0.5).
        let fine = refine(&build_coarse_mesh(2, 2, 1.0, 1.0).unwrap(), 2);
        let p = build_patch(&fine, 0, 0).unwrap();
        let (sub, map) = extract_submesh(&fine, &p);
        for (k, &v) in map.iter().enumerate() {
            let [x, y] = fine.vertices()[v];
            let on_patch_edge = y == 0.0 || x == 0.5 || (x - y).abs() < 1e-14;
            assert_eq!(sub.is_boundary(k), on_patch_edge, "node at ({x},{y})");
        }
        // J=2 gives exactly three strictly interior nodes in a coarse triangle.
        assert_eq!(p.interior_fine_nodes.len(), 3);
    }

    #[test]
    fn dump_has_one_line_per_record() {
        let m = build_coarse_mesh(1, 1, 1.0, 1.0).unwrap();
        let mut buf = Vec::new();
        m.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4 + 2);
    }
}
