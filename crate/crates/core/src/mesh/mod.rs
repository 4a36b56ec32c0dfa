//! Structured P1 triangulations and the fields living on them.
//!
//! Every mesh is a logically rectangular grid of `nx × ny` cells, each cell
//! split into two triangles. Vertex `(i, j)` has index `j * (nx + 1) + i` and
//! cell `(i, j)` owns triangles `2 * (j * nx + i)` and `2 * (j * nx + i) + 1`.
//! Keeping this indexing for every domain kind lets window averages be taken
//! in index space (see [`crate::weights`]).

mod field;
mod io;
mod reflect;

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::Point;

pub use field::{gradient, weighted_lp_norm, weighted_lp_power, Layout, PiecewiseField};
pub use io::{read_field, read_mesh, write_field, write_mesh};
pub use reflect::{reflect_extend, BandFields, ExtendedFields};

/// `x₂ = a(x₁)` boundary chart together with its derivative.
#[derive(Clone)]
pub struct BoundaryGraph {
    a: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    da: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Half-width of the chart interval; samples are taken on `[0, 2α]`.
    pub alpha: f64,
    /// Thickness of the band below the graph.
    pub beta: f64,
    /// Reference radius of the local ball.
    pub r0: f64,
}

impl BoundaryGraph {
    pub fn new(
        a: impl Fn(f64) -> f64 + Send + Sync + 'static,
        da: impl Fn(f64) -> f64 + Send + Sync + 'static,
        alpha: f64,
        beta: f64,
        r0: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && r0 > 0.0) {
            return invalid("graph band parameters must be positive");
        }
        let graph = Self {
            a: Arc::new(a),
            da: Arc::new(da),
            alpha,
            beta,
            r0,
        };
        for k in 0..=256 {
            let s = 2.0 * alpha * k as f64 / 256.0;
            if !graph.value(s).is_finite() || !graph.slope(s).is_finite() {
                return Err(Error::Degenerate(format!("graph or slope not finite at x1 = {s}")));
            }
        }
        Ok(graph)
    }

    /// Flat graph `a ≡ level`.
    pub fn flat(level: f64, beta: f64) -> Result<Self> {
        Self::new(move |_| level, |_| 0.0, 0.5, beta, beta)
    }

    pub fn value(&self, x1: f64) -> f64 {
        (self.a)(x1)
    }

    pub fn slope(&self, x1: f64) -> f64 {
        (self.da)(x1)
    }

    /// The reflection `T(x₁, x₂) = (x₁, 2a(x₁) − x₂)`; it is its own inverse.
    pub fn reflect(&self, x: Point) -> Point {
        [x[0], 2.0 * self.value(x[0]) - x[1]]
    }

    /// Jacobian of [`Self::reflect`], row-major `[[1, 0], [2a′, −1]]`.
    pub fn jacobian(&self, x: Point) -> [[f64; 2]; 2] {
        [[1.0, 0.0], [2.0 * self.slope(x[0]), -1.0]]
    }
}

impl fmt::Debug for BoundaryGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoundaryGraph")
            .field("alpha", &self.alpha)
            .field("beta", &self.beta)
            .field("r0", &self.r0)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
pub enum DomainKind {
    UnitSquare,
    /// The band `{a(x₁) − β < x₂ < a(x₁)}` below a graph.
    GraphBand(BoundaryGraph),
    /// A band together with its mirror image across the graph.
    Reflected(BoundaryGraph),
    /// Geometry read back from a dump; no analytic description.
    Loaded,
}

impl DomainKind {
    pub fn name(&self) -> &'static str {
        match self {
            DomainKind::UnitSquare => "unit_square",
            DomainKind::GraphBand(_) => "graph_domain",
            DomainKind::Reflected(_) => "reflected_graph_domain",
            DomainKind::Loaded => "loaded",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TriMesh {
    m: usize,
    nx: usize,
    ny: usize,
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<bool>,
    domain: DomainKind,
    areas: Vec<f64>,
    centroids: Vec<Point>,
    basis_grads: Vec<[[f64; 2]; 3]>,
}

impl TriMesh {
    pub(crate) fn from_parts(
        m: usize,
        nx: usize,
        ny: usize,
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary: Vec<bool>,
        domain: DomainKind,
    ) -> Result<Self> {
        if vertices.len() != (nx + 1) * (ny + 1) || triangles.len() != 2 * nx * ny {
            return Err(Error::Degenerate("vertex or triangle count does not match the grid".into()));
        }
        if boundary.len() != vertices.len() {
            return Err(Error::Degenerate("boundary flag count mismatch".into()));
        }
        let mut areas = Vec::with_capacity(triangles.len());
        let mut centroids = Vec::with_capacity(triangles.len());
        let mut basis_grads = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            let [p0, p1, p2] = tri.map(|v| vertices[v]);
            let e1 = [p1[0] - p0[0], p1[1] - p0[1]];
            let e2 = [p2[0] - p0[0], p2[1] - p0[1]];
            let det = e1[0] * e2[1] - e1[1] * e2[0];
            if !(det > 0.0) {
                return Err(Error::Degenerate(format!("triangle {t} has signed area {}", 0.5 * det)));
            }
            // rows of E^{-T} applied to the reference gradients (-1,-1), (1,0), (0,1)
            let g1 = [e2[1] / det, -e2[0] / det];
            let g2 = [-e1[1] / det, e1[0] / det];
            let g0 = [-g1[0] - g2[0], -g1[1] - g2[1]];
            areas.push(0.5 * det);
            centroids.push([
                (p0[0] + p1[0] + p2[0]) / 3.0,
                (p0[1] + p1[1] + p2[1]) / 3.0,
            ]);
            basis_grads.push([g0, g1, g2]);
        }
        Ok(Self {
            m,
            nx,
            ny,
            vertices,
            triangles,
            boundary,
            domain,
            areas,
            centroids,
            basis_grads,
        })
    }

    /// Resolution `M`; the grid spacing in index space is `h = 1/M`.
    pub fn resolution(&self) -> usize {
        self.m
    }

    pub fn h(&self) -> f64 {
        1.0 / self.m as f64
    }

    /// Cells in the `x₁` and `x₂` index directions.
    pub fn cells(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn vertex(&self, v: usize) -> Point {
        self.vertices[v]
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn triangle(&self, t: usize) -> [usize; 3] {
        self.triangles[t]
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn domain(&self) -> &DomainKind {
        &self.domain
    }

    pub fn area(&self, t: usize) -> f64 {
        self.areas[t]
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn centroid(&self, t: usize) -> Point {
        self.centroids[t]
    }

    pub fn centroids(&self) -> &[Point] {
        &self.centroids
    }

    /// Constant gradients of the three nodal basis functions on triangle `t`.
    pub fn basis_gradients(&self, t: usize) -> &[[f64; 2]; 3] {
        &self.basis_grads[t]
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn vertex_index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    /// Grid coordinates `(i, j)` of vertex `v`.
    pub fn vertex_ij(&self, v: usize) -> (usize, usize) {
        (v % (self.nx + 1), v / (self.nx + 1))
    }

    /// The two triangles of cell `(i, j)`.
    pub fn cell_triangles(&self, i: usize, j: usize) -> [usize; 2] {
        let c = 2 * (j * self.nx + i);
        [c, c + 1]
    }

    /// Diameter of the domain in index-space cells, `√(nx² + ny²)`.
    pub fn diameter_cells(&self) -> f64 {
        ((self.nx * self.nx + self.ny * self.ny) as f64).sqrt()
    }

    pub fn interior_vertices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_vertices()).filter(move |&v| !self.boundary[v])
    }

    /// Verifies that every interior edge is shared by exactly two triangles and
    /// every other edge joins two boundary vertices.
    pub fn check_adjacency(&self) -> Result<()> {
        use std::collections::HashMap;
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        for (&(a, b), &c) in &count {
            match c {
                2 => {}
                1 if self.boundary[a] && self.boundary[b] => {}
                _ => {
                    return Err(Error::Degenerate(format!(
                        "edge ({a}, {b}) is shared by {c} triangles"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Triangle containing `x` and the barycentric weights of `x` in it.
    pub fn locate(&self, x: Point) -> Result<(usize, [f64; 3])> {
        let outside = Error::OutsideDomain { x: x[0], y: x[1] };
        if let DomainKind::UnitSquare = self.domain {
            if !(0.0..=1.0).contains(&x[0]) || !(0.0..=1.0).contains(&x[1]) {
                return Err(outside);
            }
            let m = self.m as f64;
            let i = ((x[0] * m).floor() as usize).min(self.nx - 1);
            let j = ((x[1] * m).floor() as usize).min(self.ny - 1);
            let [lower, upper] = self.cell_triangles(i, j);
            let (s, t) = (x[0] * m - i as f64, x[1] * m - j as f64);
            let tri = if t <= s { lower } else { upper };
            return Ok((tri, self.barycentric(tri, x)));
        }
        let tol = 1e-12;
        for t in 0..self.num_triangles() {
            let w = self.barycentric(t, x);
            if w.iter().all(|&c| c >= -tol) {
                return Ok((t, w));
            }
        }
        Err(outside)
    }

    pub fn barycentric(&self, t: usize, x: Point) -> [f64; 3] {
        let [v0, v1, v2] = self.triangles[t];
        let (p0, p1, p2) = (self.vertices[v0], self.vertices[v1], self.vertices[v2]);
        let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0]);
        let l1 = ((x[0] - p0[0]) * (p2[1] - p0[1]) - (x[1] - p0[1]) * (p2[0] - p0[0])) / det;
        let l2 = ((p1[0] - p0[0]) * (x[1] - p0[1]) - (p1[1] - p0[1]) * (x[0] - p0[0])) / det;
        [1.0 - l1 - l2, l1, l2]
    }
}

fn structured_triangles(nx: usize, ny: usize) -> Vec<[usize; 3]> {
    let vid = |i: usize, j: usize| j * (nx + 1) + i;
    let mut tris = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            // both halves of the cell share the (i,j)-(i+1,j+1) diagonal
            tris.push([vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)]);
            tris.push([vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)]);
        }
    }
    tris
}

fn edge_flags(nx: usize, ny: usize) -> Vec<bool> {
    let mut flags = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            flags.push(i == 0 || j == 0 || i == nx || j == ny);
        }
    }
    flags
}

/// Structured triangulation of `[0, 1]²` with `M × M` cells.
pub fn build_unit_square_mesh(m: usize) -> Result<TriMesh> {
    if m < 2 {
        return invalid(format!("mesh resolution must be at least 2, got {m}"));
    }
    let h = 1.0 / m as f64;
    let mut vertices = Vec::with_capacity((m + 1) * (m + 1));
    for j in 0..=m {
        for i in 0..=m {
            vertices.push([i as f64 * h, j as f64 * h]);
        }
    }
    TriMesh::from_parts(
        m,
        m,
        m,
        vertices,
        structured_triangles(m, m),
        edge_flags(m, m),
        DomainKind::UnitSquare,
    )
}

/// The band below `graph`, meshed by mapping the unit-square grid through
/// `(s, t) ↦ (2α s, a(2α s) − β + t β)`.
pub fn build_graph_mesh(m: usize, graph: &BoundaryGraph) -> Result<TriMesh> {
    if m < 2 {
        return invalid(format!("mesh resolution must be at least 2, got {m}"));
    }
    let h = 1.0 / m as f64;
    let width = 2.0 * graph.alpha;
    let mut vertices = Vec::with_capacity((m + 1) * (m + 1));
    for j in 0..=m {
        for i in 0..=m {
            let x1 = width * i as f64 * h;
            vertices.push([x1, graph.value(x1) - graph.beta + j as f64 * h * graph.beta]);
        }
    }
    TriMesh::from_parts(
        m,
        m,
        m,
        vertices,
        structured_triangles(m, m),
        edge_flags(m, m),
        DomainKind::GraphBand(graph.clone()),
    )
}

/// Vertices on the graph itself (top row of a band mesh).
pub fn graph_row(mesh: &TriMesh) -> Vec<usize> {
    let (nx, ny) = mesh.cells();
    (0..=nx).map(|i| mesh.vertex_index(i, ny)).collect()
}
