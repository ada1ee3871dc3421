//! Convex state polytopes and scaled Kuhn (Freudenthal) triangulations.
//!
//! The mesh is the standard triangulation of the integer lattice scaled by
//! `rho`: every lattice hypercube splits into `n!` simplexes, one per
//! coordinate-sorted path from the cube's low corner to its high corner.
//! Only simplexes whose vertices all lie inside the state polytope are
//! retained. The lattice is anchored at the origin, so the origin is always
//! a mesh vertex and is stored at local index 0 of every simplex containing
//! it.

use std::collections::HashMap;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Numerical slack for halfspace containment tests.
const CONTAINMENT_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("no simplex of the scaled lattice fits inside the polytope (rho = {rho})")]
    EmptyTriangulation { rho: f64 },
    #[error("retained mesh does not contain the origin in its interior")]
    OriginNotInterior,
    #[error("point lies outside the triangulated domain")]
    OutOfDomain,
    #[error("polytope is degenerate or unbounded: {0}")]
    DegeneratePolytope(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("operation unsupported in dimension {0}")]
    UnsupportedDimension(usize),
}

/// A bounded convex polytope with the origin strictly inside, stored in both
/// halfspace form (`normal . x <= offset`, unit normals) and vertex form.
#[derive(Debug, Clone)]
pub struct Polytope {
    dim: usize,
    halfspaces: Vec<(DVector<f64>, f64)>,
    vertices: Vec<DVector<f64>>,
}

impl Polytope {
    /// Interval `[lo, hi]` with `lo < 0 < hi`.
    pub fn interval(lo: f64, hi: f64) -> Result<Self, GeometryError> {
        if !(lo < 0.0 && 0.0 < hi) {
            return Err(GeometryError::DegeneratePolytope(format!(
                "interval [{lo}, {hi}] must contain 0 strictly"
            )));
        }
        Ok(Self {
            dim: 1,
            halfspaces: vec![
                (DVector::from_element(1, 1.0), hi),
                (DVector::from_element(1, -1.0), -lo),
            ],
            vertices: vec![DVector::from_element(1, lo), DVector::from_element(1, hi)],
        })
    }

    /// Axis-aligned box `prod [lo_k, hi_k]` containing the origin strictly.
    pub fn bounding_box_poly(lo: &[f64], hi: &[f64]) -> Result<Self, GeometryError> {
        let n = lo.len();
        if n != hi.len() {
            return Err(GeometryError::DimensionMismatch {
                expected: n,
                got: hi.len(),
            });
        }
        if n == 1 {
            return Self::interval(lo[0], hi[0]);
        }
        let mut halfspaces = Vec::with_capacity(2 * n);
        for k in 0..n {
            if !(lo[k] < 0.0 && 0.0 < hi[k]) {
                return Err(GeometryError::DegeneratePolytope(format!(
                    "box axis {k} [{}, {}] must contain 0 strictly",
                    lo[k], hi[k]
                )));
            }
            let mut e = DVector::zeros(n);
            e[k] = 1.0;
            halfspaces.push((e.clone(), hi[k]));
            halfspaces.push((-e, -lo[k]));
        }
        let mut vertices = Vec::with_capacity(1 << n);
        for mask in 0..(1usize << n) {
            let v = DVector::from_fn(n, |k, _| if mask >> k & 1 == 1 { hi[k] } else { lo[k] });
            vertices.push(v);
        }
        if n == 2 {
            vertices = order_ccw(vertices);
        }
        Ok(Self {
            dim: n,
            halfspaces,
            vertices,
        })
    }

    /// Planar polytope from its vertex list (any order, hull is taken).
    pub fn from_vertices_2d(points: &[[f64; 2]]) -> Result<Self, GeometryError> {
        if points.len() < 3 {
            return Err(GeometryError::DegeneratePolytope(
                "need at least three vertices".into(),
            ));
        }
        let hull = convex_hull_2d(points);
        if hull.len() < 3 {
            return Err(GeometryError::DegeneratePolytope(
                "vertices are collinear".into(),
            ));
        }
        let mut halfspaces = Vec::with_capacity(hull.len());
        for i in 0..hull.len() {
            let a = &hull[i];
            let b = &hull[(i + 1) % hull.len()];
            // Outward normal of the CCW edge a -> b.
            let normal = DVector::from_vec(vec![b[1] - a[1], a[0] - b[0]]);
            let norm = normal.norm();
            if norm < 1e-14 {
                return Err(GeometryError::DegeneratePolytope(
                    "duplicate hull vertices".into(),
                ));
            }
            let normal = normal / norm;
            let offset = normal[0] * a[0] + normal[1] * a[1];
            if offset <= 0.0 {
                return Err(GeometryError::DegeneratePolytope(
                    "origin is not strictly inside".into(),
                ));
            }
            halfspaces.push((normal, offset));
        }
        let vertices = hull
            .iter()
            .map(|p| DVector::from_vec(vec![p[0], p[1]]))
            .collect();
        Ok(Self {
            dim: 2,
            halfspaces,
            vertices,
        })
    }

    /// Polytope from halfspace rows `normal . x <= offset`. Rows are
    /// normalized to unit normals; the input must describe a bounded set with
    /// the origin strictly inside.
    pub fn from_halfspaces(
        rows: Vec<(Vec<f64>, f64)>,
    ) -> Result<Self, GeometryError> {
        let n = rows
            .first()
            .map(|(a, _)| a.len())
            .ok_or_else(|| GeometryError::DegeneratePolytope("no halfspaces".into()))?;
        let mut halfspaces = Vec::with_capacity(rows.len());
        for (a, b) in rows {
            if a.len() != n {
                return Err(GeometryError::DimensionMismatch {
                    expected: n,
                    got: a.len(),
                });
            }
            let a = DVector::from_vec(a);
            let norm = a.norm();
            if norm < 1e-14 {
                return Err(GeometryError::DegeneratePolytope("zero normal row".into()));
            }
            let offset = b / norm;
            if offset <= 0.0 {
                return Err(GeometryError::DegeneratePolytope(
                    "origin is not strictly inside (offset <= 0 after normalization)".into(),
                ));
            }
            halfspaces.push((a / norm, offset));
        }
        // Candidate vertices: intersections of n-subsets of boundary planes.
        let m = halfspaces.len();
        if m < n + 1 {
            return Err(GeometryError::DegeneratePolytope(
                "too few halfspaces to bound a polytope".into(),
            ));
        }
        let mut vertices: Vec<DVector<f64>> = Vec::new();
        for subset in (0..m).combinations(n) {
            let a = DMatrix::from_fn(n, n, |r, c| halfspaces[subset[r]].0[c]);
            let b = DVector::from_fn(n, |r, _| halfspaces[subset[r]].1);
            let lu = a.lu();
            if let Some(x) = lu.solve(&b) {
                if x.iter().all(|v| v.is_finite())
                    && halfspaces
                        .iter()
                        .all(|(aa, bb)| aa.dot(&x) <= bb + 1e-9)
                    && !vertices.iter().any(|v| (v - &x).norm() < 1e-9)
                {
                    vertices.push(x);
                }
            }
        }
        if vertices.len() < n + 1 {
            return Err(GeometryError::DegeneratePolytope(
                "halfspace intersection has too few vertices".into(),
            ));
        }
        if n == 2 {
            let pts: Vec<[f64; 2]> = vertices.iter().map(|v| [v[0], v[1]]).collect();
            vertices = order_ccw(pts.iter().map(|p| DVector::from_vec(vec![p[0], p[1]])).collect());
        }
        // Boundedness: the unit normals must positively span R^n. Check that
        // no candidate recession direction (sampled from vertex directions
        // and coordinate axes) satisfies A d <= 0.
        for dir in recession_probes(n, &vertices) {
            if halfspaces.iter().all(|(a, _)| a.dot(&dir) <= 1e-12) {
                return Err(GeometryError::DegeneratePolytope(
                    "polytope is unbounded".into(),
                ));
            }
        }
        Ok(Self {
            dim: n,
            halfspaces,
            vertices,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn halfspaces(&self) -> &[(DVector<f64>, f64)] {
        &self.halfspaces
    }

    pub fn vertices(&self) -> &[DVector<f64>] {
        &self.vertices
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.halfspaces.iter().all(|(a, b)| a.dot(x) <= b + tol)
    }

    /// Componentwise bounding box of the vertex set.
    pub fn bounding_box(&self) -> (DVector<f64>, DVector<f64>) {
        let mut lo = self.vertices[0].clone();
        let mut hi = self.vertices[0].clone();
        for v in &self.vertices[1..] {
            for k in 0..self.dim {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// Enclosed volume by centroid-fan decomposition (n <= 3).
    pub fn volume(&self) -> Result<f64, GeometryError> {
        match self.dim {
            1 => {
                let lo = self.vertices.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
                let hi = self.vertices.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
                Ok(hi - lo)
            }
            2 => {
                // Shoelace over the CCW-ordered vertex ring.
                let k = self.vertices.len();
                let mut acc = 0.0;
                for i in 0..k {
                    let a = &self.vertices[i];
                    let b = &self.vertices[(i + 1) % k];
                    acc += a[0] * b[1] - b[0] * a[1];
                }
                Ok(acc.abs() / 2.0)
            }
            3 => self.volume_3d(),
            n => Err(GeometryError::UnsupportedDimension(n)),
        }
    }

    fn volume_3d(&self) -> Result<f64, GeometryError> {
        let centroid = self
            .vertices
            .iter()
            .fold(DVector::zeros(3), |acc, v| acc + v)
            / self.vertices.len() as f64;
        let mut total = 0.0;
        for (normal, offset) in &self.halfspaces {
            // Vertices on this facet.
            let on: Vec<&DVector<f64>> = self
                .vertices
                .iter()
                .filter(|v| (normal.dot(v) - offset).abs() < 1e-9)
                .collect();
            if on.len() < 3 {
                continue;
            }
            // Order facet vertices by angle in the facet plane.
            let fc = on.iter().fold(DVector::zeros(3), |acc, v| acc + *v) / on.len() as f64;
            let u = {
                let cand = if normal[0].abs() < 0.9 {
                    DVector::from_vec(vec![1.0, 0.0, 0.0])
                } else {
                    DVector::from_vec(vec![0.0, 1.0, 0.0])
                };
                let proj = &cand - normal * normal.dot(&cand);
                proj.normalize()
            };
            let w = DVector::from_vec(vec![
                normal[1] * u[2] - normal[2] * u[1],
                normal[2] * u[0] - normal[0] * u[2],
                normal[0] * u[1] - normal[1] * u[0],
            ]);
            let mut ordered: Vec<&DVector<f64>> = on.clone();
            ordered.sort_by(|p, q| {
                let pa = f64::atan2(w.dot(&(*p - &fc)), u.dot(&(*p - &fc)));
                let qa = f64::atan2(w.dot(&(*q - &fc)), u.dot(&(*q - &fc)));
                pa.partial_cmp(&qa).unwrap()
            });
            for i in 0..ordered.len() {
                let a = ordered[i];
                let b = ordered[(i + 1) % ordered.len()];
                let m = DMatrix::from_fn(3, 3, |r, c| {
                    [a, b, &fc][c][r] - centroid[r]
                });
                total += m.determinant().abs() / 6.0;
            }
        }
        Ok(total)
    }
}

/// One mesh cell: `n + 1` affinely independent vertices, the shape matrix
/// `X_i` whose row `j - 1` is `x_{i,j} - x_{i,0}`, its inverse, and the
/// interpolation-error geometry coefficients `c_{i,j}`.
#[derive(Debug, Clone)]
pub struct Simplex {
    pub vertex_ids: Vec<usize>,
    pub shape: DMatrix<f64>,
    pub shape_inv: DMatrix<f64>,
    pub c_coeffs: Vec<f64>,
}

impl Simplex {
    fn build(vertex_ids: Vec<usize>, points: &[DVector<f64>]) -> Result<Self, GeometryError> {
        let n = points[0].len();
        debug_assert_eq!(vertex_ids.len(), n + 1);
        let anchor = &points[vertex_ids[0]];
        let shape = DMatrix::from_fn(n, n, |r, c| points[vertex_ids[r + 1]][c] - anchor[c]);
        let det = shape.determinant();
        if det.abs() < 1e-12 {
            return Err(GeometryError::DegeneratePolytope(
                "degenerate simplex (affinely dependent vertices)".into(),
            ));
        }
        let shape_inv = shape
            .clone()
            .try_inverse()
            .ok_or_else(|| GeometryError::DegeneratePolytope("singular shape matrix".into()))?;
        let dists: Vec<f64> = vertex_ids
            .iter()
            .map(|&id| (&points[id] - anchor).norm())
            .collect();
        let max_dist = dists.iter().cloned().fold(0.0, f64::max);
        let c_coeffs = dists
            .iter()
            .map(|&d| n as f64 / 2.0 * d * (max_dist + d))
            .collect();
        Ok(Self {
            vertex_ids,
            shape,
            shape_inv,
            c_coeffs,
        })
    }

    pub fn dim(&self) -> usize {
        self.shape.nrows()
    }

    /// `|det X_i| / n!`
    pub fn volume(&self) -> f64 {
        let n = self.dim();
        self.shape.determinant().abs() / factorial(n)
    }
}

/// A scaled Kuhn triangulation clipped to a state polytope.
#[derive(Debug, Clone)]
pub struct Triangulation {
    dim: usize,
    rho: f64,
    vertices: Vec<DVector<f64>>,
    lattice_keys: Vec<Vec<i64>>,
    simplexes: Vec<Simplex>,
    origin_vertex: Option<usize>,
    vertex_incidence: Vec<Vec<usize>>,
    /// Lattice cell -> simplex ids; `None` for hand-built meshes, which fall
    /// back to a linear scan in `locate`.
    cells: Option<HashMap<Vec<i64>, Vec<usize>>>,
    boundary_vertex: Vec<bool>,
    /// Per simplex: (face-adjacent simplex, shared face vertex ids).
    neighbors: Vec<Vec<(usize, Vec<usize>)>>,
}

/// Serializable snapshot of a triangulation (JSON artifact schema).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriangulationExport {
    pub dim: usize,
    pub rho: f64,
    pub vertices: Vec<Vec<f64>>,
    pub simplexes: Vec<Vec<usize>>,
}

impl Triangulation {
    /// Builds the Kuhn triangulation of the `rho`-scaled integer lattice
    /// restricted to the simplexes entirely contained in `x_set`.
    pub fn build(x_set: &Polytope, rho: f64) -> Result<Self, GeometryError> {
        assert!(rho > 0.0, "rho must be positive");
        let n = x_set.dim();
        let (lo, hi) = x_set.bounding_box();
        let lo_cell: Vec<i64> = (0..n).map(|k| (lo[k] / rho).floor() as i64 - 1).collect();
        let hi_cell: Vec<i64> = (0..n).map(|k| (hi[k] / rho).ceil() as i64 + 1).collect();

        let perms: Vec<Vec<usize>> = (0..n).permutations(n).collect();
        let mut inside_memo: HashMap<Vec<i64>, bool> = HashMap::new();
        let mut vertex_ids: HashMap<Vec<i64>, usize> = HashMap::new();
        let mut vertices: Vec<DVector<f64>> = Vec::new();
        let mut lattice_keys: Vec<Vec<i64>> = Vec::new();
        let mut simplexes_raw: Vec<(Vec<i64>, Vec<Vec<i64>>)> = Vec::new();

        let inside = |key: &Vec<i64>, memo: &mut HashMap<Vec<i64>, bool>| -> bool {
            if let Some(&v) = memo.get(key) {
                return v;
            }
            let p = DVector::from_fn(n, |k, _| key[k] as f64 * rho);
            let v = x_set.contains(&p, CONTAINMENT_TOL);
            memo.insert(key.clone(), v);
            v
        };

        // Sweep cells in lexicographic order for a deterministic mesh.
        let mut cell = lo_cell.clone();
        loop {
            for perm in &perms {
                let mut path = Vec::with_capacity(n + 1);
                let mut v = cell.clone();
                path.push(v.clone());
                for &axis in perm {
                    v[axis] += 1;
                    path.push(v.clone());
                }
                if path.iter().all(|key| inside(key, &mut inside_memo)) {
                    simplexes_raw.push((cell.clone(), path));
                }
            }
            // Advance the odometer.
            let mut k = 0;
            loop {
                if k == n {
                    break;
                }
                cell[k] += 1;
                if cell[k] <= hi_cell[k] {
                    break;
                }
                cell[k] = lo_cell[k];
                k += 1;
            }
            if k == n {
                break;
            }
        }

        if simplexes_raw.is_empty() {
            return Err(GeometryError::EmptyTriangulation { rho });
        }

        let origin_key = vec![0i64; n];
        let mut simplexes = Vec::with_capacity(simplexes_raw.len());
        let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for (cell_key, mut path) in simplexes_raw {
            // Anchor at the vertex closest to the origin (the anchor carries
            // no interpolation-error coefficient, and the error budget is
            // tightest where the Lyapunov function is small). This also
            // realizes the origin-at-index-0 convention, since the origin is
            // the unique norm-zero lattice point.
            let pos = (0..path.len())
                .min_by(|&a, &b| {
                    let na: i64 = path[a].iter().map(|k| k * k).sum();
                    let nb: i64 = path[b].iter().map(|k| k * k).sum();
                    na.cmp(&nb).then_with(|| path[a].cmp(&path[b]))
                })
                .unwrap();
            if pos != 0 {
                let o = path.remove(pos);
                path.insert(0, o);
            }
            let ids: Vec<usize> = path
                .iter()
                .map(|key| {
                    *vertex_ids.entry(key.clone()).or_insert_with(|| {
                        vertices.push(DVector::from_fn(n, |k, _| key[k] as f64 * rho));
                        lattice_keys.push(key.clone());
                        vertices.len() - 1
                    })
                })
                .collect();
            let idx = simplexes.len();
            simplexes.push(Simplex::build(ids, &vertices)?);
            cells.entry(cell_key).or_default().push(idx);
        }

        let origin_vertex = *vertex_ids
            .get(&origin_key)
            .ok_or(GeometryError::OriginNotInterior)?;

        let vertex_incidence = incidence(&simplexes, vertices.len());

        // Origin interiority: all (n+1)! lattice simplexes around the origin
        // must have been retained (each incident cell corner with offset set
        // S contributes |S|!(n-|S|)! monotone paths through the origin).
        let expected = factorial(n + 1) as usize;
        if vertex_incidence[origin_vertex].len() != expected {
            return Err(GeometryError::OriginNotInterior);
        }

        let (boundary_vertex, neighbors) = face_census(&simplexes, vertices.len())?;

        Ok(Self {
            dim: n,
            rho,
            vertices,
            lattice_keys,
            simplexes,
            origin_vertex: Some(origin_vertex),
            vertex_incidence,
            cells: Some(cells),
            boundary_vertex,
            neighbors,
        })
    }

    /// Assembles a triangulation from explicit vertices and simplex vertex-id
    /// lists. Intended for tests and imported meshes; origin conventions are
    /// honored when the origin is present but not required.
    pub fn from_parts(
        rho: f64,
        vertices: Vec<DVector<f64>>,
        simplex_ids: Vec<Vec<usize>>,
    ) -> Result<Self, GeometryError> {
        let n = vertices
            .first()
            .map(DVector::len)
            .ok_or_else(|| GeometryError::DegeneratePolytope("no vertices".into()))?;
        let origin_vertex = vertices.iter().position(|v| v.norm() == 0.0);
        let mut simplexes = Vec::with_capacity(simplex_ids.len());
        for mut ids in simplex_ids {
            if ids.len() != n + 1 {
                return Err(GeometryError::DimensionMismatch {
                    expected: n + 1,
                    got: ids.len(),
                });
            }
            if let Some(o) = origin_vertex {
                if let Some(pos) = ids.iter().position(|&v| v == o) {
                    if pos != 0 {
                        ids.remove(pos);
                        ids.insert(0, o);
                    }
                }
            }
            simplexes.push(Simplex::build(ids, &vertices)?);
        }
        let vertex_incidence = incidence(&simplexes, vertices.len());
        let (boundary_vertex, neighbors) = face_census(&simplexes, vertices.len())?;
        let lattice_keys = vec![Vec::new(); vertices.len()];
        Ok(Self {
            dim: n,
            rho,
            vertices,
            lattice_keys,
            simplexes,
            origin_vertex,
            vertex_incidence,
            cells: None,
            boundary_vertex,
            neighbors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn vertices(&self) -> &[DVector<f64>] {
        &self.vertices
    }

    pub fn vertex(&self, id: usize) -> &DVector<f64> {
        &self.vertices[id]
    }

    pub fn simplexes(&self) -> &[Simplex] {
        &self.simplexes
    }

    pub fn simplex(&self, idx: usize) -> &Simplex {
        &self.simplexes[idx]
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_simplexes(&self) -> usize {
        self.simplexes.len()
    }

    pub fn origin_vertex(&self) -> Option<usize> {
        self.origin_vertex
    }

    /// Integer lattice key of a vertex (empty for hand-built meshes).
    pub fn lattice_key(&self, vertex: usize) -> &[i64] {
        &self.lattice_keys[vertex]
    }

    pub fn is_boundary_vertex(&self, id: usize) -> bool {
        self.boundary_vertex[id]
    }

    pub fn boundary_vertices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.vertices.len()).filter(|&v| self.boundary_vertex[v])
    }

    pub fn incident_simplexes(&self, vertex: usize) -> &[usize] {
        &self.vertex_incidence[vertex]
    }

    pub fn face_neighbors(&self, simplex: usize) -> &[(usize, Vec<usize>)] {
        &self.neighbors[simplex]
    }

    /// Total mesh volume, `sum_i |det X_i| / n!`.
    pub fn volume(&self) -> f64 {
        self.simplexes.iter().map(Simplex::volume).sum()
    }

    /// `vol(T) / vol(X)`.
    pub fn coverage_ratio(&self, x_set: &Polytope) -> Result<f64, GeometryError> {
        Ok(self.volume() / x_set.volume()?)
    }

    /// All simplexes containing `x` with their barycentric weights.
    ///
    /// Interior points return exactly one entry; points on shared faces
    /// return every incident simplex. An empty candidate set means `x` left
    /// the triangulated domain.
    pub fn locate(&self, x: &DVector<f64>) -> Result<Vec<(usize, DVector<f64>)>, GeometryError> {
        if x.len() != self.dim {
            return Err(GeometryError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let mut hits: Vec<(usize, DVector<f64>)> = Vec::new();
        match &self.cells {
            Some(cells) => {
                let mut axis_cells: Vec<Vec<i64>> = Vec::with_capacity(self.dim);
                for k in 0..self.dim {
                    let t = x[k] / self.rho;
                    let base = t.floor() as i64;
                    let frac = t - t.floor();
                    let eps = 1e-9 * (1.0 + t.abs());
                    let mut cands = vec![base];
                    if frac < eps {
                        cands.push(base - 1);
                    }
                    if frac > 1.0 - eps {
                        cands.push(base + 1);
                    }
                    axis_cells.push(cands);
                }
                for cell in axis_cells.iter().multi_cartesian_product() {
                    let key: Vec<i64> = cell.into_iter().copied().collect();
                    let Some(simplex_ids) = cells.get(&key) else {
                        continue;
                    };
                    for &i in simplex_ids {
                        if let Some(alpha) = self.barycentric_in(i, x) {
                            hits.push((i, alpha));
                        }
                    }
                }
            }
            None => {
                for i in 0..self.simplexes.len() {
                    if let Some(alpha) = self.barycentric_in(i, x) {
                        hits.push((i, alpha));
                    }
                }
            }
        }
        hits.sort_by_key(|(i, _)| *i);
        hits.dedup_by_key(|(i, _)| *i);
        if hits.is_empty() {
            return Err(GeometryError::OutOfDomain);
        }
        Ok(hits)
    }

    /// Barycentric coordinates of `x` in simplex `i`, or `None` if outside.
    pub fn barycentric_in(&self, i: usize, x: &DVector<f64>) -> Option<DVector<f64>> {
        let s = &self.simplexes[i];
        let anchor = &self.vertices[s.vertex_ids[0]];
        let rel = x - anchor;
        let tail = s.shape_inv.transpose() * rel;
        let a0 = 1.0 - tail.sum();
        if a0 < -1e-12 || tail.iter().any(|&a| a < -1e-12) {
            return None;
        }
        let mut alpha = DVector::zeros(self.dim + 1);
        alpha[0] = a0;
        for j in 0..self.dim {
            alpha[j + 1] = tail[j];
        }
        Some(alpha)
    }

    pub fn export(&self) -> TriangulationExport {
        TriangulationExport {
            dim: self.dim,
            rho: self.rho,
            vertices: self.vertices.iter().map(|v| v.as_slice().to_vec()).collect(),
            simplexes: self
                .simplexes
                .iter()
                .map(|s| s.vertex_ids.clone())
                .collect(),
        }
    }

    /// Stable hex fingerprint of the mesh geometry. Only round-trip-stable
    /// data enters the hash (vertex coordinate bit patterns and simplex
    /// vertex ids), so an exported and reloaded mesh fingerprints
    /// identically.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.dim.to_le_bytes());
        hasher.update(self.rho.to_bits().to_le_bytes());
        for v in &self.vertices {
            for &c in v.as_slice() {
                hasher.update(c.to_bits().to_le_bytes());
            }
        }
        for s in &self.simplexes {
            for &v in &s.vertex_ids {
                hasher.update((v as u64).to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Boundary vertex set of a sub-collection of simplexes: vertices lying on a
/// facet owned by exactly one member simplex.
pub fn subset_boundary_vertices(tri: &Triangulation, members: &[usize]) -> Vec<usize> {
    let mut face_count: HashMap<Vec<usize>, usize> = HashMap::new();
    for &i in members {
        let ids = &tri.simplex(i).vertex_ids;
        for skip in 0..ids.len() {
            let mut face: Vec<usize> = ids
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != skip)
                .map(|(_, &v)| v)
                .collect();
            face.sort_unstable();
            *face_count.entry(face).or_default() += 1;
        }
    }
    let mut out: Vec<usize> = face_count
        .into_iter()
        .filter(|(_, c)| *c == 1)
        .flat_map(|(face, _)| face)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product::<f64>().max(1.0)
}

fn incidence(simplexes: &[Simplex], num_vertices: usize) -> Vec<Vec<usize>> {
    let mut vertex_incidence = vec![Vec::new(); num_vertices];
    for (i, s) in simplexes.iter().enumerate() {
        for &v in &s.vertex_ids {
            vertex_incidence[v].push(i);
        }
    }
    vertex_incidence
}

/// Facet census: boundary-vertex flags plus the face-adjacency lists.
#[allow(clippy::type_complexity)]
fn face_census(
    simplexes: &[Simplex],
    num_vertices: usize,
) -> Result<(Vec<bool>, Vec<Vec<(usize, Vec<usize>)>>), GeometryError> {
    let mut face_owners: HashMap<Vec<usize>, Vec<usize>> = HashMap::new();
    for (i, s) in simplexes.iter().enumerate() {
        for skip in 0..s.vertex_ids.len() {
            let mut face: Vec<usize> = s
                .vertex_ids
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != skip)
                .map(|(_, &v)| v)
                .collect();
            face.sort_unstable();
            face_owners.entry(face).or_default().push(i);
        }
    }
    let mut boundary_vertex = vec![false; num_vertices];
    let mut neighbors = vec![Vec::new(); simplexes.len()];
    for (face, owners) in &face_owners {
        match owners.as_slice() {
            [_] => {
                for &v in face {
                    boundary_vertex[v] = true;
                }
            }
            [a, b] => {
                neighbors[*a].push((*b, face.clone()));
                neighbors[*b].push((*a, face.clone()));
            }
            _ => {
                return Err(GeometryError::DegeneratePolytope(
                    "facet shared by more than two simplexes".into(),
                ))
            }
        }
    }
    for list in &mut neighbors {
        list.sort_by_key(|(i, _)| *i);
    }
    Ok((boundary_vertex, neighbors))
}

fn order_ccw(mut points: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    let c: DVector<f64> =
        points.iter().fold(DVector::zeros(2), |acc, p| acc + p) / points.len() as f64;
    points.sort_by(|a, b| {
        let ta = f64::atan2(a[1] - c[1], a[0] - c[0]);
        let tb = f64::atan2(b[1] - c[1], b[0] - c[0]);
        ta.partial_cmp(&tb).unwrap()
    });
    points
}

fn convex_hull_2d(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Deterministic probe directions for the unboundedness test.
fn recession_probes(n: usize, vertices: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut probes = Vec::new();
    for k in 0..n {
        let mut e = DVector::zeros(n);
        e[k] = 1.0;
        probes.push(e.clone());
        probes.push(-e);
    }
    for v in vertices {
        let norm = v.norm();
        if norm > 1e-9 {
            probes.push(v / norm);
        }
    }
    probes
}
