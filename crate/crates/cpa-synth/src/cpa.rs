//! CPA interpolation of vertex data: evaluation, per-simplex gradients, and
//! sublevel-set extraction.
//!
//! A CPA field is determined by one value per mesh vertex. On simplex `i`
//! with shape matrix `X_i` the field is `x . grad_i + offset_i`, where
//! `grad_i = X_i^{-1} wbar_i` and `wbar_i` stacks the vertex-value
//! differences against the anchor vertex.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{subset_boundary_vertices, GeometryError, Triangulation};

#[derive(Debug, Error)]
pub enum CpaError {
    #[error("expected one value per vertex ({expected}), got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("sublevel radius is not positive (r = {0}); some boundary vertex value is <= 0")]
    DegenerateSet(f64),
}

/// A scalar CPA field: vertex values plus per-simplex affine data.
#[derive(Debug, Clone)]
pub struct CpaScalarField {
    values: Vec<f64>,
    gradients: Vec<DVector<f64>>,
    offsets: Vec<f64>,
}

impl CpaScalarField {
    /// Interpolates `values` (one per mesh vertex) on `tri`.
    pub fn interpolate(tri: &Triangulation, values: &[f64]) -> Result<Self, CpaError> {
        if values.len() != tri.num_vertices() {
            return Err(CpaError::DimensionMismatch {
                expected: tri.num_vertices(),
                got: values.len(),
            });
        }
        let n = tri.dim();
        let mut gradients = Vec::with_capacity(tri.num_simplexes());
        let mut offsets = Vec::with_capacity(tri.num_simplexes());
        for s in tri.simplexes() {
            let anchor_value = values[s.vertex_ids[0]];
            let wbar = DVector::from_fn(n, |j, _| values[s.vertex_ids[j + 1]] - anchor_value);
            let grad = &s.shape_inv * wbar;
            let anchor = tri.vertex(s.vertex_ids[0]);
            offsets.push(anchor_value - anchor.dot(&grad));
            gradients.push(grad);
        }
        Ok(Self {
            values: values.to_vec(),
            gradients,
            offsets,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at_vertex(&self, vertex: usize) -> f64 {
        self.values[vertex]
    }

    pub fn gradient(&self, simplex: usize) -> &DVector<f64> {
        &self.gradients[simplex]
    }

    pub fn offset(&self, simplex: usize) -> f64 {
        self.offsets[simplex]
    }

    /// Field value at `x`. Face ties are averaged; the incident simplexes
    /// agree by continuity anyway.
    pub fn evaluate(&self, tri: &Triangulation, x: &DVector<f64>) -> Result<f64, CpaError> {
        let hits = tri.locate(x)?;
        let mut acc = 0.0;
        for (i, alpha) in &hits {
            let ids = &tri.simplex(*i).vertex_ids;
            let mut v = 0.0;
            for (j, &vid) in ids.iter().enumerate() {
                v += alpha[j] * self.values[vid];
            }
            acc += v;
        }
        Ok(acc / hits.len() as f64)
    }

    /// Largest safe sublevel set `{V <= r}` with
    /// `r = shrink * min(V on boundary vertices)`, restricted to the origin's
    /// connected component.
    pub fn sublevel_set(&self, tri: &Triangulation, shrink: f64) -> Result<SublevelSet, CpaError> {
        let members: Vec<usize> = (0..tri.num_simplexes()).collect();
        self.sublevel_set_within(tri, &members, shrink)
    }

    /// Same as [`sublevel_set`](Self::sublevel_set) but restricted to a
    /// sub-collection of simplexes (the certificate fallback path).
    pub fn sublevel_set_within(
        &self,
        tri: &Triangulation,
        domain: &[usize],
        shrink: f64,
    ) -> Result<SublevelSet, CpaError> {
        assert!(shrink > 0.0 && shrink < 1.0, "shrink must be in (0, 1)");
        let whole = domain.len() == tri.num_simplexes();
        let boundary: Vec<usize> = if whole {
            tri.boundary_vertices().collect()
        } else {
            subset_boundary_vertices(tri, domain)
        };
        let min_boundary = boundary
            .iter()
            .map(|&v| self.values[v])
            .fold(f64::INFINITY, f64::min);
        let r = shrink * min_boundary;
        if !(r > 0.0) {
            return Err(CpaError::DegenerateSet(r));
        }

        // Flood fill from the origin simplexes across faces whose minimum
        // vertex value stays within the level; the field is affine on every
        // face, so the face minimum sits at a face vertex.
        let origin = tri
            .origin_vertex()
            .ok_or(GeometryError::OriginNotInterior)?;
        let mut in_domain = vec![false; tri.num_simplexes()];
        for &i in domain {
            in_domain[i] = true;
        }
        let reaches = |i: usize| -> bool {
            tri.simplex(i)
                .vertex_ids
                .iter()
                .any(|&v| self.values[v] <= r)
        };
        let mut member = vec![false; tri.num_simplexes()];
        let mut stack: Vec<usize> = tri
            .incident_simplexes(origin)
            .iter()
            .copied()
            .filter(|&i| in_domain[i] && reaches(i))
            .collect();
        for &i in &stack {
            member[i] = true;
        }
        while let Some(i) = stack.pop() {
            for (j, face) in tri.face_neighbors(i) {
                if member[*j] || !in_domain[*j] || !reaches(*j) {
                    continue;
                }
                let face_min = face
                    .iter()
                    .map(|&v| self.values[v])
                    .fold(f64::INFINITY, f64::min);
                if face_min <= r {
                    member[*j] = true;
                    stack.push(*j);
                }
            }
        }
        let members: Vec<usize> = (0..tri.num_simplexes()).filter(|&i| member[i]).collect();

        let boundary_segments = if tri.dim() == 2 {
            self.level_segments(tri, &members, r)
        } else {
            Vec::new()
        };

        Ok(SublevelSet {
            radius: r,
            members,
            boundary_segments,
        })
    }

    /// Level-line segments `{V = r}` clipped to the member triangles (n = 2).
    fn level_segments(&self, tri: &Triangulation, members: &[usize], r: f64) -> Vec<[f64; 4]> {
        let mut segments = Vec::new();
        for &i in members {
            let ids = &tri.simplex(i).vertex_ids;
            let mut crossings: Vec<[f64; 2]> = Vec::new();
            for a in 0..3 {
                for b in (a + 1)..3 {
                    let (va, vb) = (self.values[ids[a]], self.values[ids[b]]);
                    if (va - r) * (vb - r) < 0.0 {
                        let t = (r - va) / (vb - va);
                        let pa = tri.vertex(ids[a]);
                        let pb = tri.vertex(ids[b]);
                        crossings
                            .push([pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])]);
                    }
                }
            }
            if crossings.len() == 2 {
                segments.push([
                    crossings[0][0],
                    crossings[0][1],
                    crossings[1][0],
                    crossings[1][1],
                ]);
            }
        }
        segments
    }
}

/// A vector-valued CPA field, one scalar component per input channel.
#[derive(Debug, Clone)]
pub struct CpaVectorField {
    components: Vec<CpaScalarField>,
}

impl CpaVectorField {
    /// `values[s]` holds the vertex values of component `s`.
    pub fn interpolate(tri: &Triangulation, values: &[Vec<f64>]) -> Result<Self, CpaError> {
        let components = values
            .iter()
            .map(|v| CpaScalarField::interpolate(tri, v))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { components })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn component(&self, s: usize) -> &CpaScalarField {
        &self.components[s]
    }

    pub fn components(&self) -> &[CpaScalarField] {
        &self.components
    }

    /// Input vector stored at vertex `v`.
    pub fn at_vertex(&self, v: usize) -> DVector<f64> {
        DVector::from_fn(self.components.len(), |s, _| {
            self.components[s].values[v]
        })
    }

    /// Vector value at `x`; all components share one point location.
    pub fn evaluate(
        &self,
        tri: &Triangulation,
        x: &DVector<f64>,
    ) -> Result<DVector<f64>, CpaError> {
        let hits = tri.locate(x)?;
        let m = self.components.len();
        let mut acc = DVector::zeros(m);
        for (i, alpha) in &hits {
            let ids = &tri.simplex(*i).vertex_ids;
            for s in 0..m {
                let mut v = 0.0;
                for (j, &vid) in ids.iter().enumerate() {
                    v += alpha[j] * self.components[s].values[vid];
                }
                acc[s] += v;
            }
        }
        Ok(acc / hits.len() as f64)
    }

    /// Largest gradient-component magnitude over all channels of simplex `i`
    /// (the tightest valid `z_i`).
    pub fn gradient_bound(&self, i: usize) -> f64 {
        self.components
            .iter()
            .map(|c| c.gradients[i].amax())
            .fold(0.0, f64::max)
    }
}

/// A certified invariant region `{V <= r}`: the level radius, the member
/// simplexes (clipped by the level), and a plot-ready boundary polyline for
/// n = 2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SublevelSet {
    pub radius: f64,
    pub members: Vec<usize>,
    /// Segments `[x0, y0, x1, y1]` of the level line (n = 2 only).
    pub boundary_segments: Vec<[f64; 4]>,
}

impl SublevelSet {
    /// Membership test: `x` must lie in a member simplex with `V(x) < r`
    /// (strict) or `V(x) <= r` (closed).
    pub fn contains(
        &self,
        tri: &Triangulation,
        field: &CpaScalarField,
        x: &DVector<f64>,
        strict: bool,
    ) -> bool {
        let Ok(hits) = tri.locate(x) else {
            return false;
        };
        if !hits
            .iter()
            .any(|(i, _)| self.members.binary_search(i).is_ok())
        {
            return false;
        }
        let Ok(v) = field.evaluate(tri, x) else {
            return false;
        };
        if strict {
            v < self.radius
        } else {
            v <= self.radius
        }
    }
}
