//! Quad-mesh topology over keypoints, planes, and segment/face intersection.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// One quad face. Vertices are listed in cyclic order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    pub vertices: [usize; 4],
    /// Penalize non-right angles between adjacent edges.
    pub rectangular: bool,
    /// Penalize the face normal deviating from the ground normal.
    pub ground_parallel: bool,
}

impl Face {
    pub fn new(vertices: [usize; 4]) -> Self {
        Self {
            vertices,
            rectangular: false,
            ground_parallel: false,
        }
    }

    pub fn rectangular(mut self) -> Self {
        self.rectangular = true;
        self
    }

    pub fn ground_parallel(mut self) -> Self {
        self.ground_parallel = true;
        self
    }

    pub fn contains(&self, v: usize) -> bool {
        self.vertices.contains(&v)
    }

    /// The four cyclic edges `(v0,v1), (v1,v2), (v2,v3), (v3,v0)`.
    pub fn edges(&self) -> [(usize, usize); 4] {
        let v = self.vertices;
        [(v[0], v[1]), (v[1], v[2]), (v[2], v[3]), (v[3], v[0])]
    }
}

/// Quad mesh over `vertex_count` keypoints with derived edge adjacency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuadMesh {
    vertex_count: usize,
    faces: Vec<Face>,
    neighbors: Vec<Vec<usize>>,
}

impl QuadMesh {
    pub fn new(vertex_count: usize, faces: Vec<Face>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (fi, f) in faces.iter().enumerate() {
            for &v in &f.vertices {
                if v >= vertex_count {
                    return Err(Error::Schema(format!(
                        "face {fi} references vertex {v} but only {vertex_count} vertices exist"
                    )));
                }
            }
            let distinct: BTreeSet<usize> = f.vertices.iter().copied().collect();
            if distinct.len() != 4 {
                return Err(Error::Schema(format!("face {fi} repeats a vertex: {:?}", f.vertices)));
            }
            if !seen.insert(f.vertices) {
                return Err(Error::Schema(format!("face {fi} duplicates an earlier face {:?}", f.vertices)));
            }
        }
        let mut nbr = vec![BTreeSet::new(); vertex_count];
        for f in &faces {
            for (a, b) in f.edges() {
                nbr[a].insert(b);
                nbr[b].insert(a);
            }
        }
        Ok(Self {
            vertex_count,
            faces,
            neighbors: nbr.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    /// Sorted neighbor list of vertex `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, ns) in self.neighbors.iter().enumerate() {
            out.extend(ns.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    /// Fails if any vertex has no neighbor (Laplacian term undefined).
    pub fn check_connected_vertices(&self) -> Result<()> {
        if let Some(i) = self.neighbors.iter().position(|n| n.is_empty()) {
            return Err(Error::InvalidConfig(format!("vertex {i} belongs to no face")));
        }
        Ok(())
    }

    /// Same mesh with vertex `i` renamed to `perm[i]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        let faces = self
            .faces
            .iter()
            .map(|f| Face {
                vertices: f.vertices.map(|v| perm[v]),
                ..*f
            })
            .collect();
        Self::new(self.vertex_count, faces)
    }
}

/// Plane `nᵀX + d = 0`. `n` is unit length once optimized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub n: Vec3,
    pub d: f64,
}

impl Plane {
    pub fn new(n: Vec3, d: f64) -> Self {
        Self { n, d }
    }

    /// Least-squares plane through `points`. The normal sign is chosen so its
    /// largest-magnitude component is positive.
    pub fn fit(points: &[Vec3]) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::DegenerateInput("plane fit needs at least 3 points".into()));
        }
        let c = points.iter().sum::<Vec3>() / points.len() as f64;
        let mut cov = nalgebra::Matrix3::zeros();
        for p in points {
            let q = p - c;
            cov += q * q.transpose();
        }
        let eig = cov.symmetric_eigen();
        let (imin, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let mut n: Vec3 = eig.eigenvectors.column(imin).into_owned();
        let imax = n.iamax();
        if n[imax] < 0.0 {
            n = -n;
        }
        Ok(Self { n, d: -n.dot(&c) })
    }

    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        self.n.dot(x) + self.d
    }
}

/// Parameter `s ∈ (eps, 1-eps)` where segment `p → q` crosses triangle `abc`.
pub fn segment_triangle_intersection(p: &Vec3, q: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3, eps: f64) -> Option<f64> {
    let dir = q - p;
    let e1 = b - a;
    let e2 = c - a;
    let h = dir.cross(&e2);
    let det = e1.dot(&h);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = p - a;
    let u = inv * s.dot(&h);
    if !(-1e-12..=1.0 + 1e-12).contains(&u) {
        return None;
    }
    let qv = s.cross(&e1);
    let v = inv * dir.dot(&qv);
    if v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    let t = inv * e2.dot(&qv);
    (t > eps && t < 1.0 - eps).then_some(t)
}

/// Whether segment `p → q` passes through the quad (split along `v0–v2`).
pub fn segment_hits_quad(p: &Vec3, q: &Vec3, quad: [&Vec3; 4], eps: f64) -> bool {
    segment_triangle_intersection(p, q, quad[0], quad[1], quad[2], eps).is_some()
        || segment_triangle_intersection(p, q, quad[0], quad[2], quad[3], eps).is_some()
}

/// Whether the straight segment from `eye` to vertex `i` is blocked by any face
/// of `mesh` that does not contain `i`.
pub fn vertex_occluded(eye: &Vec3, points: &[Vec3], mesh: &QuadMesh, i: usize) -> bool {
    let target = &points[i];
    mesh.faces().iter().filter(|f| !f.contains(i)).any(|f| {
        let v = f.vertices;
        segment_hits_quad(eye, target, [&points[v[0]], &points[v[1]], &points[v[2]], &points[v[3]]], 1e-9)
    })
}
