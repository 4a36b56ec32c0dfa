//! The `Ã`-linear solver, the comparison fixed point for `A`, right-hand
//! side truncation and point loads.
//!
//! All problems are posed in weak form with homogeneous Dirichlet data:
//! find `u` with `∫ A(x, ∇u)·∇φ = ⟨F, φ⟩` for every interior P1 basis
//! function `φ`, where `F` is either a flux `∫ f·∇φ` or a point evaluation.

mod sparse;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mesh::{gradient, weighted_lp_norm, Layout, PiecewiseField, TriMesh};
use crate::operators::OperatorSpec;
use crate::Point;

pub use sparse::{Csr, KrylovMethod, KrylovOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Relative tolerance: Krylov residual for linear solves, dual-norm
    /// residual for the nonlinear iteration.
    pub tol: f64,
    /// Nonlinear iteration cap.
    pub max_iters: usize,
    /// Initial damping of the comparison iteration.
    pub theta: f64,
    /// Relative tolerance of the inner linear solves of the iteration.
    pub inner_tol: f64,
    pub krylov_max_iters: usize,
    pub max_halvings: u32,
    /// Iterations without a 1% residual improvement before giving up.
    pub stagnation_window: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 200,
            theta: 1.0,
            inner_tol: 1e-12,
            krylov_max_iters: 20_000,
            max_halvings: 6,
            stagnation_window: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Krylov iterations for a linear solve; fixed-point updates otherwise.
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
    /// `‖∇(u^{m+1} − u^m)‖_{L²}` per update.
    pub fixed_point_history: Vec<f64>,
    /// Dual-norm residual before each update and at the end.
    pub residual_history: Vec<f64>,
    /// Damping in force at the end.
    pub theta: f64,
    pub halvings: u32,
    pub krylov_method: String,
    pub krylov_iterations: usize,
}

/// Nodal evaluation functional `φ ↦ φ(x₀)` in barycentric form.
#[derive(Clone, Debug, PartialEq)]
pub struct DiracLoad {
    pub point: Point,
    pub triangle: usize,
    /// `(vertex, φ_vertex(x₀))` for the three vertices of the triangle.
    pub weights: [(usize, f64); 3],
}

/// Locates `x₀` and returns the P1 point-evaluation weights there.
pub fn dirac_load(x0: Point, mesh: &TriMesh) -> Result<DiracLoad> {
    let (t, bary) = mesh.locate(x0)?;
    let tri = mesh.triangle(t);
    Ok(DiracLoad {
        point: x0,
        triangle: t,
        weights: [(tri[0], bary[0]), (tri[1], bary[1]), (tri[2], bary[2])],
    })
}

/// Right-hand side of the weak problem.
#[derive(Clone, Debug)]
pub enum Rhs {
    /// `⟨F, φ⟩ = ∫ f·∇φ` for a triangle-vector field `f`.
    Flux(PiecewiseField),
    /// `⟨F, φ⟩ = amplitude·φ(x₀)`, one amplitude per component.
    Dirac { load: DiracLoad, amplitude: Vec<f64> },
}

impl Rhs {
    pub fn dirac(mesh: &TriMesh, x0: Point, amplitude: Vec<f64>) -> Result<Self> {
        Ok(Self::Dirac {
            load: dirac_load(x0, mesh)?,
            amplitude,
        })
    }

    fn n_comp(&self) -> usize {
        match self {
            Self::Flux(f) => f.n_comp(),
            Self::Dirac { amplitude, .. } => amplitude.len(),
        }
    }
}

/// Interior vertices times components.
#[derive(Clone, Debug)]
pub struct DofMap {
    pub n_comp: usize,
    vertex_slot: Vec<Option<usize>>,
    interior: Vec<usize>,
}

impl DofMap {
    pub fn new(mesh: &TriMesh, n_comp: usize) -> Self {
        let mut vertex_slot = vec![None; mesh.num_vertices()];
        let mut interior = Vec::new();
        for v in 0..mesh.num_vertices() {
            if !mesh.is_boundary(v) {
                vertex_slot[v] = Some(interior.len());
                interior.push(v);
            }
        }
        Self {
            n_comp,
            vertex_slot,
            interior,
        }
    }

    pub fn len(&self) -> usize {
        self.interior.len() * self.n_comp
    }

    pub fn is_empty(&self) -> bool {
        self.interior.is_empty()
    }

    pub fn dof(&self, v: usize, c: usize) -> Option<usize> {
        self.vertex_slot[v].map(|s| s * self.n_comp + c)
    }

    pub fn to_field(&self, mesh: &Arc<TriMesh>, x: &[f64]) -> PiecewiseField {
        let n = self.n_comp;
        let mut values = vec![0.0; mesh.num_vertices() * n];
        for (s, &v) in self.interior.iter().enumerate() {
            values[v * n..(v + 1) * n].copy_from_slice(&x[s * n..(s + 1) * n]);
        }
        PiecewiseField::new(mesh.clone(), Layout::VertexScalar, n, values).expect("finite solution")
    }

    pub fn from_field(&self, u: &PiecewiseField) -> Vec<f64> {
        let n = self.n_comp;
        let mut x = vec![0.0; self.len()];
        for (s, &v) in self.interior.iter().enumerate() {
            x[s * n..(s + 1) * n].copy_from_slice(u.block(v));
        }
        x
    }
}

/// Assembled `Ã`-system with eliminated boundary vertices.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub stiffness: Csr,
    pub load: Vec<f64>,
    pub dofs: DofMap,
    pub symmetric: bool,
}

fn check_elliptic(tensor: &PiecewiseField) -> Result<bool> {
    tensor.require_layout(Layout::TriangleTensor)?;
    let d = 2 * tensor.n_comp();
    let mut symmetric = true;
    for t in 0..tensor.entity_count() {
        let a = tensor.block(t);
        // Cholesky of the symmetric part
        let mut l = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..=r {
                let s_rc = 0.5 * (a[r * d + c] + a[c * d + r]);
                let mut s = s_rc;
                for k in 0..c {
                    s -= l[r * d + k] * l[c * d + k];
                }
                if r == c {
                    if !(s > 0.0) {
                        return invalid(format!("Ã is not elliptic on triangle {t}"));
                    }
                    l[r * d + r] = s.sqrt();
                } else {
                    l[r * d + c] = s / l[c * d + c];
                }
                if (a[r * d + c] - a[c * d + r]).abs() > 1e-14 * (a[r * d + c].abs() + a[c * d + r].abs()) {
                    symmetric = false;
                }
            }
        }
    }
    Ok(symmetric)
}

/// `K[(a,μ),(b,ν)] = Σ_T |T| Σ_{ij} Ã_{(μ,i),(ν,j)} ∂_j φ_b ∂_i φ_a`.
pub fn assemble_stiffness(tensor: &PiecewiseField, dofs: &DofMap) -> Csr {
    let mesh = tensor.mesh();
    let n = tensor.n_comp();
    let d = 2 * n;
    let triplets: Vec<(usize, usize, f64)> = (0..mesh.num_triangles())
        .into_par_iter()
        .flat_map_iter(|t| {
            let tri = mesh.triangle(t);
            let g = mesh.basis_gradients(t);
            let area = mesh.area(t);
            let a = tensor.block(t);
            let mut local = Vec::with_capacity(9 * n * n);
            for ka in 0..3 {
                for mu in 0..n {
                    let Some(row) = dofs.dof(tri[ka], mu) else { continue };
                    for kb in 0..3 {
                        for nu in 0..n {
                            let Some(col) = dofs.dof(tri[kb], nu) else { continue };
                            let mut s = 0.0;
                            for i in 0..2 {
                                for j in 0..2 {
                                    s += a[(2 * mu + i) * d + 2 * nu + j] * g[kb][j] * g[ka][i];
                                }
                            }
                            local.push((row, col, area * s));
                        }
                    }
                }
            }
            local
        })
        .collect();
    Csr::from_triplets(dofs.len(), triplets)
}

/// `∫ F·∇φ` for a triangle-vector flux `F`.
pub fn assemble_flux(flux: &PiecewiseField, dofs: &DofMap) -> Vec<f64> {
    let mesh = flux.mesh();
    let n = flux.n_comp();
    let mut out = vec![0.0; dofs.len()];
    for t in 0..mesh.num_triangles() {
        let tri = mesh.triangle(t);
        let g = mesh.basis_gradients(t);
        let area = mesh.area(t);
        let f = flux.block(t);
        for k in 0..3 {
            for mu in 0..n {
                if let Some(row) = dofs.dof(tri[k], mu) {
                    out[row] += area * (f[2 * mu] * g[k][0] + f[2 * mu + 1] * g[k][1]);
                }
            }
        }
    }
    out
}

fn assemble_load(rhs: &Rhs, mesh: &TriMesh, dofs: &DofMap) -> Result<Vec<f64>> {
    match rhs {
        Rhs::Flux(f) => {
            f.require_layout(Layout::TriangleVector)?;
            if f.mesh().num_triangles() != mesh.num_triangles() {
                return Err(Error::FieldShape("right-hand side lives on another mesh".into()));
            }
            Ok(assemble_flux(f, dofs))
        }
        Rhs::Dirac { load, amplitude } => {
            let mut out = vec![0.0; dofs.len()];
            for &(v, w) in &load.weights {
                for (mu, a) in amplitude.iter().enumerate() {
                    if let Some(row) = dofs.dof(v, mu) {
                        out[row] += w * a;
                    }
                }
            }
            Ok(out)
        }
    }
}

pub fn assemble_system(tensor: &PiecewiseField, rhs: &Rhs) -> Result<LinearSystem> {
    let symmetric = check_elliptic(tensor)?;
    if rhs.n_comp() != tensor.n_comp() {
        return Err(Error::FieldShape(format!(
            "right-hand side has {} components, tensor has {}",
            rhs.n_comp(),
            tensor.n_comp()
        )));
    }
    let mesh = tensor.mesh();
    let dofs = DofMap::new(mesh, tensor.n_comp());
    Ok(LinearSystem {
        stiffness: assemble_stiffness(tensor, &dofs),
        load: assemble_load(rhs, mesh, &dofs)?,
        dofs,
        symmetric,
    })
}

fn method_for(symmetric: bool) -> KrylovMethod {
    if symmetric {
        KrylovMethod::Cg
    } else {
        KrylovMethod::BiCgStab
    }
}

/// Discrete solution of `∫ Ã∇u·∇φ = ⟨F, φ⟩`.
pub fn solve_linear(tensor: &PiecewiseField, rhs: &Rhs, config: &SolverConfig) -> Result<(PiecewiseField, SolveReport)> {
    let sys = assemble_system(tensor, rhs)?;
    let method = method_for(sys.symmetric);
    let mut x = vec![0.0; sys.dofs.len()];
    let out = sparse::solve(&sys.stiffness, &sys.load, &mut x, method, config.tol, config.krylov_max_iters)?;
    let u = sys.dofs.to_field(tensor.mesh(), &x);
    Ok((
        u,
        SolveReport {
            iterations: out.iterations,
            relative_residual: out.relative_residual,
            converged: true,
            theta: 1.0,
            krylov_method: method.name().into(),
            krylov_iterations: out.iterations,
            ..Default::default()
        },
    ))
}

/// Starting point of the nonlinear iteration.
#[derive(Clone, Debug)]
pub enum InitialGuess {
    Zero,
    /// Uniform random interior values in `[−amplitude, amplitude]`.
    Random { seed: u64, amplitude: f64 },
    Field(PiecewiseField),
}

fn energy_norm(k: &Csr, x: &[f64]) -> f64 {
    sparse::dot(x, &k.mul(x)).max(0.0).sqrt()
}

fn gradient_l2(dofs: &DofMap, mesh: &Arc<TriMesh>, x: &[f64]) -> f64 {
    let g = gradient(&dofs.to_field(mesh, x)).expect("vertex field");
    g.pointwise_norms()
        .iter()
        .enumerate()
        .map(|(t, n)| n * n * mesh.area(t))
        .sum::<f64>()
        .sqrt()
}

/// Comparison fixed point: with `K` the `Ã`-stiffness matrix,
/// `u ← u + θ K⁻¹(⟨F, φ⟩ − ∫ A(x, ∇u)·∇φ)`.
///
/// Convergence is declared when the residual, measured in the `K⁻¹` norm
/// relative to `1 + ‖K⁻¹F‖_K`, falls to `config.tol`. `θ` is halved (at
/// most `max_halvings` times) whenever an increment is larger than the one
/// before, or when two consecutive corrections make an obtuse angle
/// (cosine below `−1/2` in the `K` inner product).
pub fn solve_nonlinear(
    spec: &OperatorSpec,
    rhs: &Rhs,
    mesh: &Arc<TriMesh>,
    config: &SolverConfig,
    initial: &InitialGuess,
) -> Result<(PiecewiseField, SolveReport)> {
    if !(config.theta > 0.0 && config.theta <= 1.0) {
        return invalid(format!("damping must lie in (0, 1], got {}", config.theta));
    }
    let tensor = spec.target_field(mesh);
    let sys = assemble_system(&tensor, rhs)?;
    let method = method_for(sys.symmetric);
    let dofs = &sys.dofs;
    let k = &sys.stiffness;
    let inner = |r: &[f64], report: &mut SolveReport| -> Result<Vec<f64>> {
        let mut d = vec![0.0; r.len()];
        let out = sparse::solve(k, r, &mut d, method, config.inner_tol, config.krylov_max_iters)?;
        report.krylov_iterations += out.iterations;
        Ok(d)
    };
    let mut report = SolveReport {
        theta: config.theta,
        krylov_method: method.name().into(),
        ..Default::default()
    };
    let scale = 1.0 + energy_norm(k, &inner(&sys.load, &mut report)?);
    let mut u = match initial {
        InitialGuess::Zero => vec![0.0; dofs.len()],
        InitialGuess::Random { seed, amplitude } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..dofs.len()).map(|_| rng.gen_range(-amplitude..=*amplitude)).collect()
        }
        InitialGuess::Field(f) => {
            if f.layout() != Layout::VertexScalar || f.n_comp() != spec.n_comp || f.entity_count() != mesh.num_vertices() {
                return Err(Error::FieldShape("initial guess does not match the problem".into()));
            }
            dofs.from_field(f)
        }
    };
    let mut theta = config.theta;
    let mut prev_increment = f64::INFINITY;
    let mut prev_d: Option<Vec<f64>> = None;
    let mut best = f64::INFINITY;
    let mut best_at = 0;
    for m in 0..=config.max_iters {
        let flux = spec.apply_field(&gradient(&dofs.to_field(mesh, &u))?)?;
        let au = assemble_flux(&flux, dofs);
        let r: Vec<f64> = sys.load.iter().zip(&au).map(|(b, a)| b - a).collect();
        let d = inner(&r, &mut report)?;
        let residual = energy_norm(k, &d) / scale;
        report.residual_history.push(residual);
        report.relative_residual = residual;
        report.iterations = m;
        report.theta = theta;
        if residual <= config.tol {
            report.converged = true;
            return Ok((dofs.to_field(mesh, &u), report));
        }
        if m == config.max_iters {
            break;
        }
        if residual < 0.99 * best {
            best = residual;
            best_at = m;
        } else if m - best_at >= config.stagnation_window {
            return Err(Error::NonlinearSolver {
                reason: "stagnation".into(),
                iterations: m,
                residual,
                report: Box::new(report),
            });
        }
        let mut increment = theta * gradient_l2(dofs, mesh, &d);
        // consecutive corrections pointing against each other signal overshoot
        let kd = k.mul(&d);
        let overshoot = prev_d.as_ref().is_some_and(|p: &Vec<f64>| {
            let c = sparse::dot(p, &kd);
            c < -0.5 * energy_norm(k, p) * sparse::dot(&d, &kd).max(0.0).sqrt()
        });
        if overshoot && report.halvings < config.max_halvings {
            theta *= 0.5;
            report.halvings += 1;
            increment *= 0.5;
        }
        while increment > prev_increment && report.halvings < config.max_halvings {
            theta *= 0.5;
            report.halvings += 1;
            increment *= 0.5;
        }
        for (ui, di) in u.iter_mut().zip(&d) {
            *ui += theta * di;
        }
        report.fixed_point_history.push(increment);
        prev_increment = increment;
        prev_d = Some(d);
    }
    let residual = report.relative_residual;
    Err(Error::NonlinearSolver {
        reason: "iteration limit".into(),
        iterations: config.max_iters,
        residual,
        report: Box::new(report),
    })
}

/// The nonlinear residual `⟨F, φ⟩ − ∫ A(x, ∇u)·∇φ` in the same relative
/// dual norm as [`solve_nonlinear`], assembled vertex by vertex (a separate
/// code path from the triangle loop used by the solver).
pub fn independent_residual(spec: &OperatorSpec, rhs: &Rhs, u: &PiecewiseField, config: &SolverConfig) -> Result<f64> {
    let mesh = u.mesh().clone();
    let n = spec.n_comp;
    let mut star: Vec<Vec<(usize, usize)>> = vec![Vec::new(); mesh.num_vertices()];
    for t in 0..mesh.num_triangles() {
        for (k, &v) in mesh.triangle(t).iter().enumerate() {
            star[v].push((t, k));
        }
    }
    let tensor = spec.target_field(&mesh);
    let sys = assemble_system(&tensor, rhs)?;
    let dofs = &sys.dofs;
    let mut r = sys.load.clone();
    for v in 0..mesh.num_vertices() {
        for &(t, k) in &star[v] {
            let tri = mesh.triangle(t);
            let g = mesh.basis_gradients(t);
            let mut eta = vec![0.0; 2 * n];
            for mu in 0..n {
                for (kk, &w) in tri.iter().enumerate() {
                    let val = u.values()[w * n + mu];
                    eta[2 * mu] += val * g[kk][0];
                    eta[2 * mu + 1] += val * g[kk][1];
                }
            }
            let a = spec.eval_vec(mesh.centroid(t), &eta);
            for mu in 0..n {
                if let Some(row) = dofs.dof(v, mu) {
                    r[row] -= mesh.area(t) * (a[2 * mu] * g[k][0] + a[2 * mu + 1] * g[k][1]);
                }
            }
        }
    }
    let method = method_for(sys.symmetric);
    let mut d = vec![0.0; r.len()];
    sparse::solve(&sys.stiffness, &r, &mut d, method, config.inner_tol, config.krylov_max_iters)?;
    let mut b = vec![0.0; r.len()];
    sparse::solve(&sys.stiffness, &sys.load, &mut b, method, config.inner_tol, config.krylov_max_iters)?;
    Ok(energy_norm(&sys.stiffness, &d) / (1.0 + energy_norm(&sys.stiffness, &b)))
}

/// `f χ_{|f| < k}` per triangle.
pub fn truncate_rhs(f: &PiecewiseField, k: f64) -> Result<PiecewiseField> {
    if !(k > 0.0) {
        return invalid(format!("truncation level must be positive, got {k}"));
    }
    if f.layout() == Layout::VertexScalar {
        return Err(Error::Layout {
            expected: "a triangle layout".into(),
            found: f.layout().name().into(),
        });
    }
    let norms = f.pointwise_norms();
    let mut out = f.clone();
    for (t, n) in norms.iter().enumerate() {
        if *n >= k {
            out.block_mut(t).fill(0.0);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RouteResult {
    pub u_final: PiecewiseField,
    pub members: Vec<PiecewiseField>,
    pub reports: Vec<SolveReport>,
    /// `‖∇(u^k − u_final)‖_{L^{q₀}}` per schedule entry.
    pub distances: Vec<f64>,
}

/// Solves with `f^k` for every `k` of the increasing `schedule`, then with
/// the full `f`. Each solve starts from the previous solution.
pub fn approximation_route(
    spec: &OperatorSpec,
    f: &PiecewiseField,
    schedule: &[f64],
    q0: f64,
    config: &SolverConfig,
    initial: &InitialGuess,
) -> Result<RouteResult> {
    if schedule.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("truncation schedule must be increasing");
    }
    let mesh = f.mesh().clone();
    let mut start = initial.clone();
    let mut members = Vec::with_capacity(schedule.len());
    let mut reports = Vec::with_capacity(schedule.len() + 1);
    for (index, &k) in schedule.iter().enumerate() {
        let fk = truncate_rhs(f, k)?;
        let (u, rep) = solve_nonlinear(spec, &Rhs::Flux(fk), &mesh, config, &start).map_err(|e| Error::Route {
            index,
            source: Box::new(e),
        })?;
        start = InitialGuess::Field(u.clone());
        members.push(u);
        reports.push(rep);
    }
    let (u_final, rep) = solve_nonlinear(spec, &Rhs::Flux(f.clone()), &mesh, config, &start).map_err(|e| Error::Route {
        index: schedule.len(),
        source: Box::new(e),
    })?;
    reports.push(rep);
    let one = PiecewiseField::constant(mesh.clone(), Layout::TriangleScalar, 1, &[1.0])?;
    let gf = gradient(&u_final)?;
    let distances = members
        .iter()
        .map(|u| weighted_lp_norm(&gradient(u)?.difference(&gf)?, &one, q0))
        .collect::<Result<Vec<_>>>()?;
    Ok(RouteResult {
        u_final,
        members,
        reports,
        distances,
    })
}

/// `(Σ_T Σ_q |T|/3 |∇u_T − G(x_q)|²)^{1/2}` with the edge-midpoint rule,
/// where `G` writes the exact gradient block (length `2N`).
pub fn h1_seminorm_error(u: &PiecewiseField, exact: impl Fn(Point, &mut [f64]) + Sync) -> Result<f64> {
    let grad = gradient(u)?;
    let mesh = u.mesh();
    let d = grad.block_len();
    let total: f64 = (0..mesh.num_triangles())
        .into_par_iter()
        .map(|t| {
            let [a, b, c] = mesh.triangle(t);
            let (pa, pb, pc) = (mesh.vertex(a), mesh.vertex(b), mesh.vertex(c));
            let mid = |p: Point, q: Point| [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
            let mut g = vec![0.0; d];
            let mut s = 0.0;
            for x in [mid(pa, pb), mid(pb, pc), mid(pc, pa)] {
                exact(x, &mut g);
                s += grad.block(t).iter().zip(&g).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
            }
            s * mesh.area(t) / 3.0
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests;
