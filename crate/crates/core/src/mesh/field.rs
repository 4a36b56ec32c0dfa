use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::Point;

/// Storage layout of a [`PiecewiseField`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `N` values per vertex (P1 nodal values).
    VertexScalar,
    /// `N` values per triangle.
    TriangleScalar,
    /// An `N × 2` block per triangle, stored `[μ][i]` (component, direction).
    TriangleVector,
    /// A `(2N) × (2N)` block per triangle, stored `[(μ,i)][(ν,j)]`.
    TriangleTensor,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::VertexScalar => "vertex_scalar",
            Layout::TriangleScalar => "triangle_scalar",
            Layout::TriangleVector => "triangle_vector",
            Layout::TriangleTensor => "triangle_tensor",
        }
    }

    pub fn from_name(s: &str) -> Option<Layout> {
        match s {
            "vertex_scalar" => Some(Layout::VertexScalar),
            "triangle_scalar" => Some(Layout::TriangleScalar),
            "triangle_vector" => Some(Layout::TriangleVector),
            "triangle_tensor" => Some(Layout::TriangleTensor),
            _ => None,
        }
    }

    pub fn block_len(self, n_comp: usize) -> usize {
        match self {
            Layout::VertexScalar | Layout::TriangleScalar => n_comp,
            Layout::TriangleVector => 2 * n_comp,
            Layout::TriangleTensor => 4 * n_comp * n_comp,
        }
    }

    pub fn entity_count(self, mesh: &TriMesh) -> usize {
        match self {
            Layout::VertexScalar => mesh.num_vertices(),
            _ => mesh.num_triangles(),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dense per-vertex or per-triangle data on a mesh.
#[derive(Clone)]
pub struct PiecewiseField {
    mesh: Arc<TriMesh>,
    n_comp: usize,
    layout: Layout,
    values: Vec<f64>,
}

impl fmt::Debug for PiecewiseField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PiecewiseField")
            .field("layout", &self.layout)
            .field("n_comp", &self.n_comp)
            .field("resolution", &self.mesh.resolution())
            .field("len", &self.values.len())
            .finish()
    }
}

impl PiecewiseField {
    pub fn new(mesh: Arc<TriMesh>, layout: Layout, n_comp: usize, values: Vec<f64>) -> Result<Self> {
        if n_comp == 0 {
            return Err(Error::FieldShape("component count must be positive".into()));
        }
        let expected = layout.entity_count(&mesh) * layout.block_len(n_comp);
        if values.len() != expected {
            return Err(Error::FieldShape(format!(
                "{layout} field with N={n_comp} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::FieldShape(format!("non-finite entry at position {k}")));
        }
        Ok(Self {
            mesh,
            n_comp,
            layout,
            values,
        })
    }

    pub fn zeros(mesh: Arc<TriMesh>, layout: Layout, n_comp: usize) -> Self {
        let len = layout.entity_count(&mesh) * layout.block_len(n_comp);
        Self {
            mesh,
            n_comp,
            layout,
            values: vec![0.0; len],
        }
    }

    /// Fills each entity block from `f(position, block)`, using vertex
    /// positions for vertex layouts and centroids otherwise.
    pub fn from_fn(
        mesh: Arc<TriMesh>,
        layout: Layout,
        n_comp: usize,
        f: impl Fn(Point, &mut [f64]),
    ) -> Result<Self> {
        let mut field = Self::zeros(mesh, layout, n_comp);
        let block = layout.block_len(n_comp);
        let mesh = field.mesh.clone();
        for (e, chunk) in field.values.chunks_mut(block).enumerate() {
            let x = match layout {
                Layout::VertexScalar => mesh.vertex(e),
                _ => mesh.centroid(e),
            };
            f(x, chunk);
        }
        Self::new(field.mesh, layout, n_comp, field.values)
    }

    /// Scalar vertex field `u(x)`.
    pub fn vertex_scalar(mesh: Arc<TriMesh>, f: impl Fn(Point) -> f64) -> Result<Self> {
        Self::from_fn(mesh, Layout::VertexScalar, 1, |x, out| out[0] = f(x))
    }

    /// Scalar triangle field sampled at centroids.
    pub fn triangle_scalar(mesh: Arc<TriMesh>, f: impl Fn(Point) -> f64) -> Result<Self> {
        Self::from_fn(mesh, Layout::TriangleScalar, 1, |x, out| out[0] = f(x))
    }

    /// Single-component vector field sampled at centroids.
    pub fn triangle_vector(mesh: Arc<TriMesh>, f: impl Fn(Point) -> [f64; 2]) -> Result<Self> {
        Self::from_fn(mesh, Layout::TriangleVector, 1, |x, out| {
            let g = f(x);
            out[0] = g[0];
            out[1] = g[1];
        })
    }

    pub fn constant(mesh: Arc<TriMesh>, layout: Layout, n_comp: usize, block: &[f64]) -> Result<Self> {
        if block.len() != layout.block_len(n_comp) {
            return Err(Error::FieldShape("constant block has the wrong length".into()));
        }
        Self::from_fn(mesh, layout, n_comp, |_, out| out.copy_from_slice(block))
    }

    /// Identity tensor scaled by `c` on every triangle.
    pub fn scaled_identity(mesh: Arc<TriMesh>, n_comp: usize, c: f64) -> Self {
        let d = 2 * n_comp;
        let mut block = vec![0.0; d * d];
        for k in 0..d {
            block[k * d + k] = c;
        }
        Self::constant(mesh, Layout::TriangleTensor, n_comp, &block).expect("finite constant")
    }

    pub fn mesh(&self) -> &Arc<TriMesh> {
        &self.mesh
    }

    pub fn n_comp(&self) -> usize {
        self.n_comp
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn block_len(&self) -> usize {
        self.layout.block_len(self.n_comp)
    }

    pub fn entity_count(&self) -> usize {
        self.layout.entity_count(&self.mesh)
    }

    pub fn block(&self, e: usize) -> &[f64] {
        let b = self.block_len();
        &self.values[e * b..(e + 1) * b]
    }

    pub fn block_mut(&mut self, e: usize) -> &mut [f64] {
        let b = self.block_len();
        &mut self.values[e * b..(e + 1) * b]
    }

    /// Frobenius norm of every entity block.
    pub fn pointwise_norms(&self) -> Vec<f64> {
        self.values
            .chunks(self.block_len())
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn require_layout(&self, layout: Layout) -> Result<()> {
        if self.layout != layout {
            return Err(Error::Layout {
                expected: layout.name().into(),
                found: self.layout.name().into(),
            });
        }
        Ok(())
    }

    pub(crate) fn require_same_mesh(&self, other: &PiecewiseField) -> Result<()> {
        if !Arc::ptr_eq(&self.mesh, &other.mesh)
            && (self.mesh.num_vertices() != other.mesh.num_vertices()
                || self.mesh.num_triangles() != other.mesh.num_triangles())
        {
            return Err(Error::FieldShape("fields live on different meshes".into()));
        }
        Ok(())
    }

    /// Per-triangle magnitude: block norms for triangle layouts, the mean of
    /// the three vertex norms for vertex layouts.
    pub fn triangle_magnitudes(&self) -> Vec<f64> {
        match self.layout {
            Layout::VertexScalar => {
                let norms = self.pointwise_norms();
                self.mesh
                    .triangles()
                    .iter()
                    .map(|t| (norms[t[0]] + norms[t[1]] + norms[t[2]]) / 3.0)
                    .collect()
            }
            _ => self.pointwise_norms(),
        }
    }

    /// Vertex scalar to triangle scalar by averaging the three corners.
    pub fn to_triangle_mean(&self) -> Result<PiecewiseField> {
        self.require_layout(Layout::VertexScalar)?;
        let n = self.n_comp;
        let mut out = Vec::with_capacity(self.mesh.num_triangles() * n);
        for tri in self.mesh.triangles() {
            for c in 0..n {
                out.push(tri.iter().map(|&v| self.values[v * n + c]).sum::<f64>() / 3.0);
            }
        }
        PiecewiseField::new(self.mesh.clone(), Layout::TriangleScalar, n, out)
    }

    /// Entrywise map producing a field of the same shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<PiecewiseField> {
        PiecewiseField::new(
            self.mesh.clone(),
            self.layout,
            self.n_comp,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn scaled(&self, c: f64) -> PiecewiseField {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// `self − other` for fields of identical shape.
    pub fn difference(&self, other: &PiecewiseField) -> Result<PiecewiseField> {
        self.require_same_mesh(other)?;
        other.require_layout(self.layout)?;
        if other.n_comp != self.n_comp {
            return Err(Error::FieldShape("component counts differ".into()));
        }
        PiecewiseField::new(
            self.mesh.clone(),
            self.layout,
            self.n_comp,
            self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        )
    }
}

/// Per-triangle gradient of the P1 interpolant of a vertex field.
pub fn gradient(u: &PiecewiseField) -> Result<PiecewiseField> {
    u.require_layout(Layout::VertexScalar)?;
    let mesh = u.mesh().clone();
    let n = u.n_comp();
    let mut out = Vec::with_capacity(mesh.num_triangles() * 2 * n);
    for t in 0..mesh.num_triangles() {
        let tri = mesh.triangle(t);
        let g = mesh.basis_gradients(t);
        for c in 0..n {
            let mut d = [0.0; 2];
            for k in 0..3 {
                let val = u.values()[tri[k] * n + c];
                d[0] += val * g[k][0];
                d[1] += val * g[k][1];
            }
            out.extend_from_slice(&d);
        }
    }
    PiecewiseField::new(mesh, Layout::TriangleVector, n, out)
}

fn check_weight(weight: &PiecewiseField, g: &PiecewiseField) -> Result<()> {
    weight.require_layout(Layout::TriangleScalar)?;
    weight.require_same_mesh(g)?;
    if weight.n_comp() != 1 {
        return Err(Error::FieldShape("weights are single-component".into()));
    }
    if let Some((index, &value)) = weight.values().iter().enumerate().find(|(_, w)| !(**w > 0.0)) {
        return Err(Error::NonpositiveWeight { index, value });
    }
    Ok(())
}

/// `Σ_T |g_T|^p ω_T |T|`, the centroid-rule value of `∫ |g|^p ω`.
///
/// `g` may carry any triangle layout; block norms are Frobenius norms.
pub fn weighted_lp_power(g: &PiecewiseField, weight: &PiecewiseField, p: f64) -> Result<f64> {
    if !(p > 0.0) {
        return Err(Error::InvalidArgument(format!("exponent must be positive, got {p}")));
    }
    if g.layout() == Layout::VertexScalar {
        return Err(Error::Layout {
            expected: "a triangle layout".into(),
            found: g.layout().name().into(),
        });
    }
    check_weight(weight, g)?;
    let mesh = g.mesh();
    let norms = g.pointwise_norms();
    Ok(norms
        .iter()
        .zip(weight.values())
        .enumerate()
        .map(|(t, (n, w))| n.powf(p) * w * mesh.area(t))
        .sum())
}

/// `(∫ |g|^p ω)^{1/p}` with centroid quadrature.
pub fn weighted_lp_norm(g: &PiecewiseField, weight: &PiecewiseField, p: f64) -> Result<f64> {
    Ok(weighted_lp_power(g, weight, p)?.powf(1.0 / p))
}
