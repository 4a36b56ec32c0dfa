//! Lipschitz truncation of discrete `W^{1,1}_0` fields.
//!
//! The good set is `S = {v : M(|∇g|)(v) ≤ λ}` together with the boundary
//! vertices. On `S` the field is kept; every other vertex receives, per
//! component, the midpoint of the lower and upper McShane extensions of the
//! data on `S` with Lipschitz constant `cλ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mesh::{gradient, weighted_lp_power, Layout, PiecewiseField, TriMesh};
use crate::report::{EstimateReport, InequalityId};
use crate::weights::{maximal_function, WindowFamily};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationConfig {
    /// Initial Lipschitz factor `c0`.
    pub c0: f64,
    /// At most `2^max_doublings · c0` is tried before giving up.
    pub max_doublings: u32,
    /// Relative tolerance on the boundary data.
    pub boundary_tol: f64,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            c0: 1.0,
            max_doublings: 6,
            boundary_tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TruncationResult {
    pub g_lambda: PiecewiseField,
    pub lambda: f64,
    /// Per vertex: `M(|∇g|) ≤ λ` or on the boundary.
    pub good_set: Vec<bool>,
    /// The factor `c` after consistency doubling; the extension is `cλ`-Lipschitz.
    pub c_used: f64,
    /// Largest `|∇g^λ| / λ` over triangles with a bad vertex (0 if none).
    pub measured_gradient_bound: f64,
    /// Largest ratio between the gradient of a P1 function and its edge
    /// difference quotients, over the mesh (√2 on the structured square).
    pub geometric_factor: f64,
    /// The certified constant of the gradient bound: `c_used · geometric_factor · √N`.
    pub certified_constant: f64,
}

/// The JSON document stored next to a truncated field dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationSidecar {
    pub lambda: f64,
    pub c_used: f64,
    pub good_fraction: f64,
    pub measured_gradient_bound: f64,
}

impl TruncationResult {
    pub fn sidecar(&self) -> TruncationSidecar {
        let good = self.good_set.iter().filter(|&&b| b).count();
        TruncationSidecar {
            lambda: self.lambda,
            c_used: self.c_used,
            good_fraction: good as f64 / self.good_set.len() as f64,
            measured_gradient_bound: self.measured_gradient_bound,
        }
    }

    /// Triangles with at least one bad vertex.
    pub fn bad_triangles(&self) -> Vec<bool> {
        bad_triangles(self.g_lambda.mesh(), &self.good_set)
    }
}

fn bad_triangles(mesh: &TriMesh, good: &[bool]) -> Vec<bool> {
    mesh.triangles().iter().map(|t| t.iter().any(|&v| !good[v])).collect()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `max |G|` over `{G : |G·e| ≤ |e|}` for the three edges `e` of `t`.
///
/// The feasible set is a centrally symmetric polygon; its vertices are
/// intersections of two constraint lines.
pub fn triangle_geometric_factor(mesh: &TriMesh, t: usize) -> f64 {
    let [a, b, c] = mesh.triangle(t);
    let p = [mesh.vertex(a), mesh.vertex(b), mesh.vertex(c)];
    let dirs: Vec<[f64; 2]> = [(0, 1), (1, 2), (2, 0)]
        .iter()
        .map(|&(i, j)| {
            let e = [p[j][0] - p[i][0], p[j][1] - p[i][1]];
            let n = (e[0] * e[0] + e[1] * e[1]).sqrt();
            [e[0] / n, e[1] / n]
        })
        .collect();
    let mut best: f64 = 0.0;
    for i in 0..3 {
        for j in (i + 1)..3 {
            let det = dirs[i][0] * dirs[j][1] - dirs[i][1] * dirs[j][0];
            if det.abs() < 1e-14 {
                continue;
            }
            for si in [-1.0, 1.0] {
                for sj in [-1.0, 1.0] {
                    let g = [
                        (si * dirs[j][1] - sj * dirs[i][1]) / det,
                        (sj * dirs[i][0] - si * dirs[j][0]) / det,
                    ];
                    let feasible = dirs.iter().all(|d| (g[0] * d[0] + g[1] * d[1]).abs() <= 1.0 + 1e-12);
                    if feasible {
                        best = best.max((g[0] * g[0] + g[1] * g[1]).sqrt());
                    }
                }
            }
        }
    }
    best
}

/// Largest pairwise difference quotient of any component over `set`.
fn data_lipschitz(mesh: &TriMesh, g: &PiecewiseField, set: &[usize]) -> f64 {
    let n = g.n_comp();
    let vals = g.values();
    set.par_iter()
        .enumerate()
        .map(|(k, &x)| {
            let px = mesh.vertex(x);
            let mut worst: f64 = 0.0;
            for &y in &set[k + 1..] {
                let d = dist(px, mesh.vertex(y));
                for c in 0..n {
                    worst = worst.max((vals[x * n + c] - vals[y * n + c]).abs() / d);
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

/// Lipschitz truncation of the vertex field `g` at level `λ`.
pub fn lipschitz_truncate(g: &PiecewiseField, lambda: f64, config: &TruncationConfig) -> Result<TruncationResult> {
    g.require_layout(Layout::VertexScalar)?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return invalid(format!("truncation level must be positive, got {lambda}"));
    }
    if !(config.c0 > 0.0) {
        return invalid("initial Lipschitz factor must be positive");
    }
    let mesh = g.mesh().clone();
    let n = g.n_comp();
    let scale = g.max_abs().max(1.0);
    for v in 0..mesh.num_vertices() {
        if mesh.is_boundary(v) {
            if let Some(&value) = g.block(v).iter().find(|x| x.abs() > config.boundary_tol * scale) {
                return Err(Error::NonzeroBoundary { vertex: v, value });
            }
        }
    }
    let mg = maximal_function(&gradient(g)?, &WindowFamily::centered(&mesh))?;
    let good_set: Vec<bool> = (0..mesh.num_vertices())
        .map(|v| mesh.is_boundary(v) || mg.values()[v] <= lambda)
        .collect();
    let good: Vec<usize> = (0..mesh.num_vertices()).filter(|&v| good_set[v]).collect();
    let bad: Vec<usize> = (0..mesh.num_vertices()).filter(|&v| !good_set[v]).collect();

    // boundary values enter as exact zeros
    let mut data = g.values().to_vec();
    for v in 0..mesh.num_vertices() {
        if mesh.is_boundary(v) {
            data[v * n..(v + 1) * n].fill(0.0);
        }
    }
    let data = PiecewiseField::new(mesh.clone(), Layout::VertexScalar, n, data)?;

    let needed = if bad.is_empty() { 0.0 } else { data_lipschitz(&mesh, &data, &good) };
    let mut c = config.c0;
    let mut doublings = 0;
    while c * lambda < needed {
        if doublings == config.max_doublings {
            return Err(Error::Degenerate(format!(
                "data on the good set is {needed:.3e}-Lipschitz, beyond {c}·λ after {doublings} doublings"
            )));
        }
        c *= 2.0;
        doublings += 1;
    }
    let lip = c * lambda;

    let mut values = data.values().to_vec();
    let filled: Vec<(usize, Vec<f64>)> = bad
        .par_iter()
        .map(|&x| {
            let px = mesh.vertex(x);
            let mut lo = vec![f64::NEG_INFINITY; n];
            let mut hi = vec![f64::INFINITY; n];
            for &y in &good {
                let d = lip * dist(px, mesh.vertex(y));
                for k in 0..n {
                    let gy = data.values()[y * n + k];
                    lo[k] = lo[k].max(gy - d);
                    hi[k] = hi[k].min(gy + d);
                }
            }
            (x, lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect())
        })
        .collect();
    for (x, block) in filled {
        values[x * n..(x + 1) * n].copy_from_slice(&block);
    }
    let g_lambda = PiecewiseField::new(mesh.clone(), Layout::VertexScalar, n, values)?;

    let grad = gradient(&g_lambda)?;
    let norms = grad.pointwise_norms();
    let bad_t = bad_triangles(&mesh, &good_set);
    let measured = (0..mesh.num_triangles())
        .filter(|&t| bad_t[t])
        .map(|t| norms[t] / lambda)
        .fold(0.0, f64::max);
    let geometric_factor = (0..mesh.num_triangles())
        .into_par_iter()
        .map(|t| triangle_geometric_factor(&mesh, t))
        .reduce(|| 0.0, f64::max);
    Ok(TruncationResult {
        g_lambda,
        lambda,
        good_set,
        c_used: c,
        measured_gradient_bound: measured,
        geometric_factor,
        certified_constant: c * geometric_factor * (n as f64).sqrt(),
    })
}

/// Both weighted stability ratios of a truncation:
/// `‖∇g^λ‖^p_{p,ω} / ‖∇g‖^p_{p,ω}` and
/// `‖∇(g − g^λ)‖^p_{p,ω} / ∫_{bad} |∇g|^p ω`, where the bad region is the
/// union of triangles with a bad vertex.
pub fn verify_truncation_weighted(
    g: &PiecewiseField,
    lambda: f64,
    weight: &PiecewiseField,
    p: f64,
    config: &TruncationConfig,
) -> Result<(EstimateReport, EstimateReport)> {
    let tr = lipschitz_truncate(g, lambda, config)?;
    weighted_stability(g, &tr, weight, p)
}

/// The two ratios of [`verify_truncation_weighted`] for a truncation that
/// is already computed.
pub fn weighted_stability(
    g: &PiecewiseField,
    tr: &TruncationResult,
    weight: &PiecewiseField,
    p: f64,
) -> Result<(EstimateReport, EstimateReport)> {
    let grad = gradient(g)?;
    let grad_l = gradient(&tr.g_lambda)?;
    let lhs1 = weighted_lp_power(&grad_l, weight, p)?;
    let rhs1 = weighted_lp_power(&grad, weight, p)?;
    let lhs2 = weighted_lp_power(&grad.difference(&grad_l)?, weight, p)?;
    let bad = tr.bad_triangles();
    let mut masked = grad.clone();
    let block = masked.block_len();
    for (t, &b) in bad.iter().enumerate() {
        if !b {
            masked.values_mut()[t * block..(t + 1) * block].fill(0.0);
        }
    }
    let rhs2 = weighted_lp_power(&masked, weight, p)?;
    let decorate = |r: EstimateReport, part: &str| {
        r.with("part", part)
            .with("M", g.mesh().resolution())
            .with("p", p)
            .with("lambda", tr.lambda)
            .with("c_used", tr.c_used)
    };
    Ok((
        decorate(EstimateReport::new(InequalityId::ItmWeight, lhs1, rhs1), "stability"),
        decorate(EstimateReport::new(InequalityId::ItmWeight, lhs2, rhs2), "defect"),
    ))
}
