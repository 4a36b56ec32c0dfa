//! Odd reflection of band data across a boundary graph.
//!
//! With `T(x₁, x₂) = (x₁, 2a(x₁) − x₂)` and `J = DT`, the mirrored half of
//! the extended band carries
//!
//! ```text
//! ũ = −u∘T,   Ã̃ = J Ã Jᵀ∘T,   f̃ = −J f∘T,   ω̃ = ω∘T.
//! ```
//!
//! `J` depends on `x₁` only and `T` preserves `x₁`, so `J(x) = J(T x)` and
//! `J² = I`. The extended mesh mirrors the band grid row by row: vertex row
//! `r` of the band appears again as row `2M − r`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{BoundaryGraph, DomainKind, Layout, PiecewiseField, TriMesh};

/// Data on the band below the graph.
#[derive(Clone, Debug)]
pub struct BandFields {
    /// Vertex field vanishing on the graph row.
    pub u: PiecewiseField,
    /// Triangle vector field.
    pub f: PiecewiseField,
    /// Triangle tensor field.
    pub tensor: PiecewiseField,
    /// Triangle scalar weight.
    pub weight: PiecewiseField,
}

/// Fields on the band and its mirror image.
#[derive(Clone, Debug)]
pub struct ExtendedFields {
    pub mesh: Arc<TriMesh>,
    pub u: PiecewiseField,
    pub f: PiecewiseField,
    pub tensor: PiecewiseField,
    pub weight: PiecewiseField,
    /// Largest `||det J| − 1|` over the sampled centroids.
    pub max_det_defect: f64,
}

/// Relative tolerance for the zero-trace check on the graph row.
const TRACE_TOL: f64 = 1e-10;

pub fn reflect_extend(fields: &BandFields, graph: &BoundaryGraph) -> Result<ExtendedFields> {
    let band = fields.u.mesh().clone();
    if !matches!(band.domain(), DomainKind::GraphBand(_)) {
        return Err(Error::InvalidArgument("reflection needs a graph-band mesh".into()));
    }
    fields.u.require_layout(Layout::VertexScalar)?;
    fields.f.require_layout(Layout::TriangleVector)?;
    fields.tensor.require_layout(Layout::TriangleTensor)?;
    fields.weight.require_layout(Layout::TriangleScalar)?;
    for other in [&fields.f, &fields.tensor, &fields.weight] {
        fields.u.require_same_mesh(other)?;
    }
    let n = fields.u.n_comp();
    if fields.f.n_comp() != n || fields.tensor.n_comp() != n {
        return Err(Error::FieldShape("component counts differ".into()));
    }
    let (nx, ny) = band.cells();

    let scale = fields.u.max_abs().max(1.0);
    for i in 0..=nx {
        let v = band.vertex_index(i, ny);
        for c in 0..n {
            let value = fields.u.values()[v * n + c];
            if value.abs() > TRACE_TOL * scale {
                return Err(Error::NonzeroBoundary { vertex: v, value });
            }
        }
    }

    // vertices: band rows 0..=ny, then mirrored rows ny+1..=2ny
    let mirror_row = |r: usize| 2 * ny - r;
    let mut vertices = band.vertices().to_vec();
    let mut u_ext = fields.u.values().to_vec();
    for r in ny + 1..=2 * ny {
        for i in 0..=nx {
            let src = band.vertex_index(i, mirror_row(r));
            vertices.push(graph.reflect(band.vertex(src)));
            for c in 0..n {
                u_ext.push(-fields.u.values()[src * n + c]);
            }
        }
    }
    let vid = |i: usize, j: usize| j * (nx + 1) + i;
    let mut boundary = Vec::with_capacity(vertices.len());
    for j in 0..=2 * ny {
        for i in 0..=nx {
            boundary.push(i == 0 || i == nx || j == 0 || j == 2 * ny);
        }
    }

    let mut triangles = band.triangles().to_vec();
    let d = 2 * n;
    let mut f_ext = fields.f.values().to_vec();
    let mut a_ext = fields.tensor.values().to_vec();
    let mut w_ext = fields.weight.values().to_vec();
    let mut max_det_defect: f64 = 0.0;
    for jr in ny..2 * ny {
        let js = 2 * ny - 1 - jr;
        for i in 0..nx {
            for s in 0..2 {
                let t = 2 * (js * nx + i) + s;
                let tri = band.triangle(t);
                // map the source vertex (ii, jj) to (ii, 2ny − jj) and flip orientation
                let img = tri.map(|v| {
                    let (ii, jj) = band.vertex_ij(v);
                    vid(ii, mirror_row(jj))
                });
                triangles.push([img[0], img[2], img[1]]);

                let jac = graph.jacobian(band.centroid(t));
                let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
                if !det.is_finite() || det == 0.0 {
                    return Err(Error::Degenerate(format!("reflection Jacobian is singular on triangle {t}")));
                }
                max_det_defect = max_det_defect.max((det.abs() - 1.0).abs());

                let fb = fields.f.block(t);
                for mu in 0..n {
                    for a in 0..2 {
                        let mut acc = 0.0;
                        for k in 0..2 {
                            acc += jac[a][k] * fb[mu * 2 + k];
                        }
                        f_ext.push(-acc);
                    }
                }

                let ab = fields.tensor.block(t);
                for mu in 0..n {
                    for a in 0..2 {
                        for nu in 0..n {
                            for b in 0..2 {
                                let mut acc = 0.0;
                                for k in 0..2 {
                                    for l in 0..2 {
                                        acc += jac[a][k] * ab[(mu * 2 + k) * d + nu * 2 + l] * jac[b][l];
                                    }
                                }
                                a_ext.push(acc);
                            }
                        }
                    }
                }
                w_ext.push(fields.weight.values()[t]);
            }
        }
    }

    let mesh = Arc::new(TriMesh::from_parts(
        band.resolution(),
        nx,
        2 * ny,
        vertices,
        triangles,
        boundary,
        DomainKind::Reflected(graph.clone()),
    )?);
    Ok(ExtendedFields {
        u: PiecewiseField::new(mesh.clone(), Layout::VertexScalar, n, u_ext)?,
        f: PiecewiseField::new(mesh.clone(), Layout::TriangleVector, n, f_ext)?,
        tensor: PiecewiseField::new(mesh.clone(), Layout::TriangleTensor, n, a_ext)?,
        weight: PiecewiseField::new(mesh.clone(), Layout::TriangleScalar, 1, w_ext)?,
        mesh,
        max_det_defect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_graph_mesh, gradient};
    use std::f64::consts::PI;

    fn band_fields(mesh: Arc<TriMesh>, graph: &BoundaryGraph, diag: [f64; 2]) -> BandFields {
        let g2 = graph.clone();
        let u = PiecewiseField::vertex_scalar(mesh.clone(), move |x| {
            (g2.value(x[0]) - x[1]) * (PI * x[0]).sin()
        })
        .unwrap();
        let f = PiecewiseField::triangle_vector(mesh.clone(), |x| [x[0], x[1] * x[1]]).unwrap();
        let tensor = PiecewiseField::constant(
            mesh.clone(),
            Layout::TriangleTensor,
            1,
            &[diag[0], 0.0, 0.0, diag[1]],
        )
        .unwrap();
        let weight = PiecewiseField::triangle_scalar(mesh, |_| 3.0).unwrap();
        BandFields { u, f, tensor, weight }
    }

    #[test]
    fn flat_graph_is_odd_reflection() {
        let graph = BoundaryGraph::flat(0.5, 0.5).unwrap();
        let mesh = Arc::new(build_graph_mesh(8, &graph).unwrap());
        let fields = band_fields(mesh.clone(), &graph, [2.0, 5.0]);
        let ext = reflect_extend(&fields, &graph).unwrap();
        ext.mesh.check_adjacency().unwrap();
        assert_eq!(ext.max_det_defect, 0.0);
        // Ã̃ = Ã for J = diag(1, −1) and diagonal Ã
        for t in 0..ext.mesh.num_triangles() {
            assert_eq!(ext.tensor.block(t), &[2.0, 0.0, 0.0, 5.0]);
            assert_eq!(ext.weight.values()[t], 3.0);
        }
        // ũ(x₁, 1 − x₂) = −u(x₁, x₂)
        let (nx, ny) = mesh.cells();
        for j in 0..=ny {
            for i in 0..=nx {
                let v = mesh.vertex_index(i, j);
                let w = ext.mesh.vertex_index(i, 2 * ny - j);
                let (p, q) = (ext.mesh.vertex(v), ext.mesh.vertex(w));
                assert!((p[0] - q[0]).abs() < 1e-15 && (p[1] + q[1] - 1.0).abs() < 1e-14);
                assert_eq!(ext.u.values()[w], -ext.u.values()[v]);
            }
        }
    }

    #[test]
    fn rejects_nonzero_trace() {
        let graph = BoundaryGraph::flat(0.5, 0.5).unwrap();
        let mesh = Arc::new(build_graph_mesh(8, &graph).unwrap());
        let mut fields = band_fields(mesh, &graph, [1.0, 1.0]);
        fields.u = fields.u.map(|v| v + 1.0).unwrap();
        assert!(matches!(reflect_extend(&fields, &graph), Err(Error::NonzeroBoundary { .. })));
    }

    /// Max over interior test functions of |∫(Ã∇ũ − f̃)·∇φ| / ‖∇φ‖_{L¹}.
    fn extended_residual(ext: &ExtendedFields) -> f64 {
        let mesh = &ext.mesh;
        let grad = gradient(&ext.u).unwrap();
        let mut res = vec![0.0; mesh.num_vertices()];
        let mut l1 = vec![0.0; mesh.num_vertices()];
        for t in 0..mesh.num_triangles() {
            let a = ext.tensor.block(t);
            let g = grad.block(t);
            let f = ext.f.block(t);
            let flux = [a[0] * g[0] + a[1] * g[1] - f[0], a[2] * g[0] + a[3] * g[1] - f[1]];
            for (k, &v) in mesh.triangle(t).iter().enumerate() {
                let dphi = mesh.basis_gradients(t)[k];
                res[v] += mesh.area(t) * (flux[0] * dphi[0] + flux[1] * dphi[1]);
                l1[v] += mesh.area(t) * (dphi[0].hypot(dphi[1]));
            }
        }
        mesh.interior_vertices().map(|v| res[v].abs() / l1[v]).fold(0.0, f64::max)
    }

    #[test]
    fn curved_extension_residual_decays() {
        let graph = BoundaryGraph::new(
            |x| 0.5 + 0.1 * (2.0 * PI * x).sin(),
            |x| 0.2 * PI * (2.0 * PI * x).cos(),
            0.5,
            0.25,
            0.25,
        )
        .unwrap();
        let mut residuals = Vec::new();
        for m in [16usize, 32, 64] {
            let mesh = Arc::new(build_graph_mesh(m, &graph).unwrap());
            let g2 = graph.clone();
            let g3 = graph.clone();
            // u* = (a(x₁) − x₂) sin(πx₁) vanishes on the graph; f := Ã∇u* pointwise
            let u = PiecewiseField::vertex_scalar(mesh.clone(), move |x| (g2.value(x[0]) - x[1]) * (PI * x[0]).sin()).unwrap();
            let diag = |x: crate::Point| [1.0 + 0.5 * x[0], 2.0 + x[1]];
            let f = PiecewiseField::triangle_vector(mesh.clone(), move |x| {
                let s = (PI * x[0]).sin();
                let du = [
                    g3.slope(x[0]) * s + (g3.value(x[0]) - x[1]) * PI * (PI * x[0]).cos(),
                    -s,
                ];
                let d = diag(x);
                [d[0] * du[0], d[1] * du[1]]
            })
            .unwrap();
            let tensor = PiecewiseField::from_fn(mesh.clone(), Layout::TriangleTensor, 1, |x, out| {
                let d = diag(x);
                out.copy_from_slice(&[d[0], 0.0, 0.0, d[1]]);
            })
            .unwrap();
            let weight = PiecewiseField::triangle_scalar(mesh, |_| 1.0).unwrap();
            let ext = reflect_extend(&BandFields { u, f, tensor, weight }, &graph).unwrap();
            assert!(ext.max_det_defect < 1e-15);
            residuals.push(extended_residual(&ext));
        }
        assert!(residuals[1] < 0.75 * residuals[0], "{residuals:?}");
        assert!(residuals[2] < 0.75 * residuals[1], "{residuals:?}");
    }

    #[test]
    fn wrong_sign_extension_does_not_decay() {
        // sanity check of the residual probe: flipping f̃ leaves an O(1) defect
        let graph = BoundaryGraph::new(|x| 0.5 + 0.05 * x, |_| 0.05, 0.5, 0.25, 0.25).unwrap();
        let mesh = Arc::new(build_graph_mesh(32, &graph).unwrap());
        let g2 = graph.clone();
        let g3 = graph.clone();
        let u = PiecewiseField::vertex_scalar(mesh.clone(), move |x| (g2.value(x[0]) - x[1]) * (PI * x[0]).sin()).unwrap();
        let f = PiecewiseField::triangle_vector(mesh.clone(), move |x| {
            let s = (PI * x[0]).sin();
            [g3.slope(x[0]) * s + (g3.value(x[0]) - x[1]) * PI * (PI * x[0]).cos(), -s]
        })
        .unwrap();
        let tensor = PiecewiseField::scaled_identity(mesh.clone(), 1, 1.0);
        let weight = PiecewiseField::triangle_scalar(mesh.clone(), |_| 1.0).unwrap();
        let mut ext = reflect_extend(&BandFields { u, f, tensor, weight }, &graph).unwrap();
        let good = extended_residual(&ext);
        let nt = mesh.num_triangles();
        for v in &mut ext.f.values_mut()[2 * nt..] {
            *v = -*v;
        }
        let bad = extended_residual(&ext);
        assert!(bad > 10.0 * good, "good {good}, bad {bad}");
    }
}
