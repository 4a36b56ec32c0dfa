//! Experiment harness: data and weight recipes, the estimate checks,
//! biting sets and the div–curl pairing experiment.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mesh::{build_unit_square_mesh, gradient, weighted_lp_power, Layout, PiecewiseField, TriMesh};
use crate::operators::{build_operator, OperatorKind};
use crate::report::{loglog_slope, EstimateReport, InequalityId};
use crate::solvers::{solve_linear, solve_nonlinear, InitialGuess, Rhs, SolveReport, SolverConfig};
use crate::weights::{ap_constant, weight_from_maximal, ApConfig, ApReport, WindowFamily};
use crate::Point;

fn default_center() -> Point {
    [0.5, 0.5]
}

fn default_spike_radius() -> f64 {
    0.25
}

fn default_rough_cells() -> usize {
    8
}

/// Single-component fluxes `f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "recipe", rename_all = "snake_case", deny_unknown_fields)]
pub enum FluxRecipe {
    Zero {},
    /// `∇(sin πx₁ sin πx₂)`.
    Smooth {},
    /// `(x₁, 1) + H χ_D (1, 0)`, `D` the disc of the given radius about
    /// `(½, ½)`. Radius 0 selects the single cell with lower-left corner
    /// nearest `(½, ½)`.
    Spike {
        height: f64,
        #[serde(default = "default_spike_radius")]
        radius: f64,
    },
    /// Uniform values in `[−1, 1]²`, constant on the cells of a fixed
    /// `cells × cells` grid, so the same function on every fine mesh.
    RoughRandom {
        seed: u64,
        #[serde(default = "default_rough_cells")]
        cells: usize,
    },
}

impl FluxRecipe {
    pub fn descriptor(&self) -> String {
        serde_json::to_string(self).expect("recipe serializes")
    }

    pub fn build(&self, mesh: &Arc<TriMesh>) -> Result<PiecewiseField> {
        match *self {
            Self::Zero {} => Ok(PiecewiseField::zeros(mesh.clone(), Layout::TriangleVector, 1)),
            Self::Smooth {} => PiecewiseField::triangle_vector(mesh.clone(), |x| {
                [
                    PI * (PI * x[0]).cos() * (PI * x[1]).sin(),
                    PI * (PI * x[0]).sin() * (PI * x[1]).cos(),
                ]
            }),
            Self::Spike { height, radius } => {
                if !(height.is_finite() && radius >= 0.0) {
                    return invalid(format!("spike needs finite height and radius ≥ 0, got {height}, {radius}"));
                }
                let m = mesh.resolution() as f64;
                let cell = (0.5 * m).floor();
                PiecewiseField::triangle_vector(mesh.clone(), |x| {
                    let inside = if radius == 0.0 {
                        (x[0] * m).floor() == cell && (x[1] * m).floor() == cell
                    } else {
                        (x[0] - 0.5).hypot(x[1] - 0.5) < radius
                    };
                    [x[0] + if inside { height } else { 0.0 }, 1.0]
                })
            }
            Self::RoughRandom { seed, cells } => {
                if cells == 0 {
                    return invalid("rough field needs at least one cell");
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let table: Vec<[f64; 2]> = (0..cells * cells)
                    .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                    .collect();
                let c = cells as f64;
                PiecewiseField::triangle_vector(mesh.clone(), |x| {
                    let i = ((x[0] * c) as usize).min(cells - 1);
                    let j = ((x[1] * c) as usize).min(cells - 1);
                    table[j * cells + i]
                })
            }
        }
    }
}

/// Positive triangle weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "recipe", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightRecipe {
    Unit {},
    /// `|x − c|^α`.
    Power {
        alpha: f64,
        #[serde(default = "default_center")]
        center: Point,
    },
    /// `(1 + M|f|)^{exponent}` for a flux recipe `f`.
    Maximal { flux: FluxRecipe, exponent: f64 },
}

impl WeightRecipe {
    pub fn descriptor(&self) -> String {
        serde_json::to_string(self).expect("recipe serializes")
    }

    pub fn build(&self, mesh: &Arc<TriMesh>) -> Result<PiecewiseField> {
        match self {
            Self::Unit {} => PiecewiseField::constant(mesh.clone(), Layout::TriangleScalar, 1, &[1.0]),
            Self::Power { alpha, center } => {
                PiecewiseField::triangle_scalar(mesh.clone(), |x| (x[0] - center[0]).hypot(x[1] - center[1]).powf(*alpha))
            }
            Self::Maximal { flux, exponent } => weight_from_maximal(&flux.build(mesh)?, *exponent),
        }
    }
}

/// A_p data of a weight on the centred window family.
pub fn measured_ap(weight: &PiecewiseField, p: f64) -> Result<ApReport> {
    ap_constant(weight, p, &WindowFamily::centered(weight.mesh()), &ApConfig::default())
}

fn unit_weight(mesh: &Arc<TriMesh>) -> PiecewiseField {
    PiecewiseField::constant(mesh.clone(), Layout::TriangleScalar, 1, &[1.0]).expect("finite constant")
}

/// `count` seeded random scalar vertex fields vanishing on the boundary:
/// a few sine modes plus one steep localized bump each. The fields are
/// analytic, so the same seed gives the same function on every mesh.
pub fn random_corpus(mesh: &Arc<TriMesh>, count: usize, seed: u64) -> Result<Vec<PiecewiseField>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let modes: Vec<(f64, f64, f64)> = (0..4)
                .map(|_| {
                    let a = rng.gen_range(1..=4) as f64;
                    let b = rng.gen_range(1..=4) as f64;
                    (a, b, rng.gen_range(-1.0..1.0) / (a + b))
                })
                .collect();
            let c = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
            let width = rng.gen_range(0.05..0.15);
            let height = rng.gen_range(-1.0..1.0);
            let mut g = PiecewiseField::vertex_scalar(mesh.clone(), |x| {
                let smooth: f64 = modes
                    .iter()
                    .map(|(a, b, amp)| amp * (a * PI * x[0]).sin() * (b * PI * x[1]).sin())
                    .sum();
                let s = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (width * width);
                smooth + if s < 1.0 { height * (1.0 - s).powi(2) } else { 0.0 }
            })?;
            for v in 0..mesh.num_vertices() {
                if mesh.is_boundary(v) {
                    g.values_mut()[v] = 0.0;
                }
            }
            Ok(g)
        })
        .collect()
}

/// Sweep for the weighted linear estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSweep {
    /// Must be a linear registry operator.
    pub operator: OperatorKind,
    pub fluxes: Vec<FluxRecipe>,
    pub weights: Vec<WeightRecipe>,
    pub p: f64,
    pub ladder: Vec<usize>,
}

/// `∫|∇v|^p ω` against `∫|f|^p ω` for every `(f, ω, M)`, in that nesting
/// order, where `v` solves the linear problem with flux `f`.
pub fn verify_linear_weighted(sweep: &LinearSweep, config: &SolverConfig) -> Result<Vec<EstimateReport>> {
    if !sweep.operator.is_linear() {
        return invalid(format!("{} is not a linear operator", sweep.operator.label()));
    }
    if sweep.ladder.is_empty() || sweep.fluxes.is_empty() || sweep.weights.is_empty() {
        return invalid("the sweep needs fluxes, weights and at least one mesh");
    }
    if !(sweep.p > 1.0) {
        return invalid(format!("exponent must exceed 1, got {}", sweep.p));
    }
    let spec = build_operator(&sweep.operator, 1)?;
    let cells: Vec<(usize, usize)> = (0..sweep.fluxes.len())
        .flat_map(|fi| (0..sweep.ladder.len()).map(move |mi| (fi, mi)))
        .collect();
    let solved: Vec<Vec<EstimateReport>> = cells
        .par_iter()
        .map(|&(fi, mi)| {
            let m = sweep.ladder[mi];
            let recipe = &sweep.fluxes[fi];
            let ctx = || format!("keyest {} at M={m}", recipe.descriptor());
            let mesh = Arc::new(build_unit_square_mesh(m)?);
            let f = recipe.build(&mesh)?;
            let (v, report) = solve_linear(&spec.target_field(&mesh), &Rhs::Flux(f.clone()), config).map_err(|e| e.within(ctx()))?;
            let grad = gradient(&v)?;
            sweep
                .weights
                .iter()
                .map(|w| {
                    let weight = w.build(&mesh)?;
                    let ap = measured_ap(&weight, sweep.p)?;
                    if !ap.ap_constant.is_finite() {
                        return invalid(format!("weight {} has no finite A_p constant", w.descriptor()));
                    }
                    let lhs = weighted_lp_power(&grad, &weight, sweep.p)?;
                    let rhs = weighted_lp_power(&f, &weight, sweep.p)?;
                    Ok(EstimateReport::new(InequalityId::Keyest, lhs, rhs)
                        .with("M", m)
                        .with("p", sweep.p)
                        .with("flux", recipe.descriptor())
                        .with("weight", w.descriptor())
                        .with("ap_constant", ap.ap_constant)
                        .with("operator", sweep.operator.label())
                        .with("krylov_iterations", report.krylov_iterations))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let (nf, nw, nm) = (sweep.fluxes.len(), sweep.weights.len(), sweep.ladder.len());
    let mut out = Vec::with_capacity(nf * nw * nm);
    for fi in 0..nf {
        for wi in 0..nw {
            for mi in 0..nm {
                out.push(solved[fi * nm + mi][wi].clone());
            }
        }
    }
    Ok(out)
}

/// Euclidean ball; triangles belong to it when their centroid does.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Point,
    pub radius: f64,
}

impl Ball {
    fn contains(&self, x: Point, scale: f64) -> bool {
        (x[0] - self.center[0]).hypot(x[1] - self.center[1]) < scale * self.radius
    }
}

/// Area averages over the triangles of a mask.
fn mask_average(mesh: &TriMesh, mask: &[bool], values: impl Fn(usize) -> f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, &inside) in mask.iter().enumerate() {
        if inside {
            num += values(t) * mesh.area(t);
            den += mesh.area(t);
        }
    }
    num / den
}

/// Entrywise range of `Ã` over the mask, combined in the Frobenius norm;
/// an upper bound for `sup |Ã(x) − Ã(y)|`.
fn oscillation(tensor: &PiecewiseField, mask: &[bool]) -> f64 {
    let d = tensor.block_len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for (t, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for (k, v) in tensor.block(t).iter().enumerate() {
            lo[k] = lo[k].min(*v);
            hi[k] = hi[k].max(*v);
        }
    }
    lo.iter().zip(&hi).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt()
}

/// `(⨍_B |∇u|^p ω)^{1/p}` against
/// `(⨍_{2B} |f|^p ω)^{1/p} + (⨍_{2B} ω)^{1/p} (⨍_{2B} |∇u|^{q̃})^{1/q̃}`.
pub fn verify_local_interior(
    tensor: &PiecewiseField,
    f: &PiecewiseField,
    u: &PiecewiseField,
    ball: Ball,
    weight: &PiecewiseField,
    p: f64,
    q_tilde: f64,
) -> Result<EstimateReport> {
    tensor.require_layout(Layout::TriangleTensor)?;
    f.require_layout(Layout::TriangleVector)?;
    weight.require_layout(Layout::TriangleScalar)?;
    if !(p > 1.0 && q_tilde > 1.0) {
        return invalid(format!("exponents must exceed 1, got p={p}, q̃={q_tilde}"));
    }
    let mesh = u.mesh().clone();
    let r2 = 2.0 * ball.radius;
    let inside = |c: f64| c - r2 >= 0.0 && c + r2 <= 1.0;
    if !(ball.radius > 0.0 && inside(ball.center[0]) && inside(ball.center[1])) {
        return invalid(format!("the doubled ball about {:?} with radius {} leaves the domain", ball.center, ball.radius));
    }
    let inner: Vec<bool> = mesh.centroids().iter().map(|&x| ball.contains(x, 1.0)).collect();
    let outer: Vec<bool> = mesh.centroids().iter().map(|&x| ball.contains(x, 2.0)).collect();
    let count = inner.iter().filter(|b| **b).count();
    if count < 4 {
        return invalid(format!("ball of radius {} covers {count} triangles; at least 4 are needed", ball.radius));
    }
    let grad = gradient(u)?.pointwise_norms();
    let fn_ = f.pointwise_norms();
    let w = weight.values();
    let lhs = mask_average(&mesh, &inner, |t| grad[t].powf(p) * w[t]).powf(1.0 / p);
    let f_term = mask_average(&mesh, &outer, |t| fn_[t].powf(p) * w[t]).powf(1.0 / p);
    let w_avg = mask_average(&mesh, &outer, |t| w[t]).powf(1.0 / p);
    let g_avg = mask_average(&mesh, &outer, |t| grad[t].powf(q_tilde)).powf(1.0 / q_tilde);
    Ok(EstimateReport::new(InequalityId::Unlocal, lhs, f_term + w_avg * g_avg)
        .with("M", mesh.resolution())
        .with("p", p)
        .with("q_tilde", q_tilde)
        .with("ball_center", format!("{},{}", ball.center[0], ball.center[1]))
        .with("ball_radius", ball.radius)
        .with("oscillation", oscillation(tensor, &outer))
        .with("f_term", f_term)
        .with("gradient_term", w_avg * g_avg))
}

/// Solves `A(x, ∇u) = f` from zero with the registry operator `kind`.
pub fn solve_registry(kind: &OperatorKind, f: &PiecewiseField, config: &SolverConfig) -> Result<(PiecewiseField, SolveReport)> {
    let spec = build_operator(kind, f.n_comp())?;
    solve_nonlinear(&spec, &Rhs::Flux(f.clone()), f.mesh(), config, &InitialGuess::Zero)
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 1.0 && q <= 2.0) {
        return invalid(format!("q must lie in (1, 2], got {q}"));
    }
    Ok(())
}

/// `∫|∇u|² (1 + M|f|)^{q−2}` against `1 + ∫|f|^q` for a computed `u`.
pub fn duality_report(u: &PiecewiseField, f: &PiecewiseField, q: f64) -> Result<EstimateReport> {
    check_q(q)?;
    let mesh = u.mesh();
    let weight = weight_from_maximal(f, q - 2.0)?;
    let lhs = weighted_lp_power(&gradient(u)?, &weight, 2.0)?;
    let rhs = 1.0 + weighted_lp_power(f, &unit_weight(mesh), q)?;
    let a2 = measured_ap(&weight, 2.0)?;
    Ok(EstimateReport::new(InequalityId::Apriori2, lhs, rhs)
        .with("M", mesh.resolution())
        .with("q", q)
        .with("weight", format!("(1+M|f|)^{}", q - 2.0))
        .with("a2_constant", a2.ap_constant))
}

/// `∫|∇u|^q` against `1 + ∫|f|^q` for a computed `u`.
pub fn apriori_report(u: &PiecewiseField, f: &PiecewiseField, q: f64) -> Result<EstimateReport> {
    if !(q > 1.0) {
        return invalid(format!("q must exceed 1, got {q}"));
    }
    let one = unit_weight(u.mesh());
    let lhs = weighted_lp_power(&gradient(u)?, &one, q)?;
    let rhs = 1.0 + weighted_lp_power(f, &one, q)?;
    Ok(EstimateReport::new(InequalityId::Apriori, lhs, rhs)
        .with("M", u.mesh().resolution())
        .with("q", q))
}

/// `∫|∇u|^p ω` against `1 + ∫|f|^p ω` for a computed `u`.
pub fn weighted_apriori_report(u: &PiecewiseField, f: &PiecewiseField, weight: &PiecewiseField, p: f64) -> Result<EstimateReport> {
    let ap = measured_ap(weight, p)?;
    let lhs = weighted_lp_power(&gradient(u)?, weight, p)?;
    let rhs = 1.0 + weighted_lp_power(f, weight, p)?;
    Ok(EstimateReport::new(InequalityId::Apriori3, lhs, rhs)
        .with("M", u.mesh().resolution())
        .with("p", p)
        .with("ap_constant", ap.ap_constant))
}

/// Solves with the registry operator and reports the duality estimate.
pub fn verify_duality_estimate(kind: &OperatorKind, f: &PiecewiseField, q: f64, config: &SolverConfig) -> Result<EstimateReport> {
    check_q(q)?;
    let (u, rep) = solve_registry(kind, f, config).map_err(|e| e.within(format!("apriori2 with {}", kind.label())))?;
    Ok(duality_report(&u, f, q)?
        .with("operator", kind.label())
        .with("iterations", rep.iterations))
}

/// Solves with the registry operator and reports the unweighted estimate.
pub fn verify_apriori(kind: &OperatorKind, f: &PiecewiseField, q: f64, config: &SolverConfig) -> Result<EstimateReport> {
    let (u, rep) = solve_registry(kind, f, config).map_err(|e| e.within(format!("apriori with {}", kind.label())))?;
    Ok(apriori_report(&u, f, q)?
        .with("operator", kind.label())
        .with("iterations", rep.iterations))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitingDecomposition {
    /// `t_j` for `j = 1, …, j_max`.
    pub thresholds: Vec<f64>,
    /// `E_j = {V ≤ t_j}` per triangle, `V` the pointwise supremum.
    pub sets: Vec<Vec<bool>>,
    /// `|Ω \ E_j|`.
    pub excluded: Vec<f64>,
    /// `max_n ∫ v^n`.
    pub l1_bound: f64,
    pub total_area: f64,
}

/// Thresholds `t_j`, the smallest values with `|{V > t_j}| ≤ 2^{−j}|Ω|`
/// for the envelope `V = max_n v^n`.
pub fn biting_sets(sequence: &[PiecewiseField], j_max: usize) -> Result<BitingDecomposition> {
    let Some(first) = sequence.first() else {
        return invalid("biting sets need a nonempty sequence");
    };
    let mesh = first.mesh().clone();
    let nt = mesh.num_triangles();
    let mut envelope = vec![f64::NEG_INFINITY; nt];
    let mut l1_bound: f64 = 0.0;
    for v in sequence {
        first.require_same_mesh(v)?;
        let vals = match v.layout() {
            Layout::TriangleScalar if v.n_comp() == 1 => v.values().to_vec(),
            Layout::VertexScalar if v.n_comp() == 1 => v.to_triangle_mean()?.into_values(),
            _ => return Err(Error::FieldShape("biting sets take scalar fields".into())),
        };
        if let Some((t, &x)) = vals.iter().enumerate().find(|(_, x)| **x < 0.0) {
            return invalid(format!("sequence entry is negative ({x}) on triangle {t}"));
        }
        l1_bound = l1_bound.max(vals.iter().enumerate().map(|(t, x)| x * mesh.area(t)).sum());
        for (e, x) in envelope.iter_mut().zip(&vals) {
            *e = e.max(*x);
        }
    }
    let total_area = mesh.total_area();
    let mut order: Vec<usize> = (0..nt).collect();
    order.sort_by(|&a, &b| envelope[b].total_cmp(&envelope[a]));
    // distinct values descending with the area lying strictly above each
    let mut levels: Vec<(f64, f64)> = Vec::new();
    let mut above = 0.0;
    let mut k = 0;
    while k < nt {
        let v = envelope[order[k]];
        levels.push((v, above));
        while k < nt && envelope[order[k]] == v {
            above += mesh.area(order[k]);
            k += 1;
        }
    }
    let mut thresholds = Vec::with_capacity(j_max);
    let mut sets = Vec::with_capacity(j_max);
    let mut excluded = Vec::with_capacity(j_max);
    for j in 1..=j_max {
        let bound = total_area * 0.5f64.powi(j as i32);
        let (t, _) = levels
            .iter()
            .take_while(|(_, area)| *area <= bound)
            .last()
            .copied()
            .expect("the largest value has nothing above it");
        let set: Vec<bool> = envelope.iter().map(|&v| v <= t).collect();
        excluded.push(set.iter().enumerate().filter(|(_, s)| !**s).map(|(i, _)| mesh.area(i)).sum());
        thresholds.push(t);
        sets.push(set);
    }
    Ok(BitingDecomposition {
        thresholds,
        sets,
        excluded,
        l1_bound,
        total_area,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivCurlRecipe {
    /// `a^k = a + ∇(sin kπx₁ / kπ)`, `b^k = b + ∇^⊥ I_h(sin kπx₁ sin kπx₂ / kπ)`.
    Positive,
    /// `b^k = a^k`, declared limit `b = a`.
    NegativeControl,
    /// `a^k = a`, `b^k = b`.
    Constant,
}

fn default_bump_radius() -> f64 {
    0.4
}

fn default_j_max() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivCurlConfig {
    pub recipe: DivCurlRecipe,
    pub weight: WeightRecipe,
    pub ks: Vec<usize>,
    /// Mesh resolution; every `k` must satisfy `8k ≤ M`.
    pub m: usize,
    #[serde(default = "default_j_max")]
    pub j_max: usize,
    #[serde(default = "default_bump_radius")]
    pub bump_radius: f64,
}

/// Names of the test functions, in basket order.
pub const BASKET: [&str; 5] = ["one", "x1", "x2", "x1x2", "bump"];

fn basket_value(i: usize, x: Point, rho: f64) -> f64 {
    match i {
        0 => 1.0,
        1 => x[0],
        2 => x[1],
        3 => x[0] * x[1],
        _ => {
            let s = ((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2)) / (rho * rho);
            if s < 1.0 {
                (-1.0 / (1.0 - s)).exp()
            } else {
                0.0
            }
        }
    }
}

/// Limit fields `a = ∇(x₁x₂)` and `b = (1, x₁)`.
fn limit_a(x: Point) -> [f64; 2] {
    [x[1], x[0]]
}

fn limit_b(x: Point) -> [f64; 2] {
    [1.0, x[0]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingRow {
    pub k: usize,
    /// `None` for the whole domain, `Some(j)` for `E_j`.
    pub set: Option<usize>,
    pub test: String,
    /// `∫_E a^k·b^k ω φ`.
    pub pairing: f64,
    /// `∫_E a·b ω φ`.
    pub limit: f64,
    pub error: f64,
    /// `error / ∫_E ω φ` when the denominator is nonzero.
    pub offset: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivCurlTable {
    pub recipe: DivCurlRecipe,
    pub m: usize,
    pub weight: String,
    pub rows: Vec<PairingRow>,
    pub biting: BitingDecomposition,
    /// Discrete divergence of `b^k − b` relative to its absolute scale, per `k`.
    pub divergence_defect: Vec<f64>,
    /// Set when some `b^k` violates the declared divergence control.
    pub negative_control: bool,
    /// Log-log slope of the basket maximum of `|error|` against `k`, for the
    /// whole domain (`None`) and every `E_j`.
    pub slopes: Vec<(Option<usize>, Option<f64>)>,
}

/// Relative defect above which `b^k` counts as divergence-uncontrolled.
pub const DIVERGENCE_TOL: f64 = 1e-8;

/// `|Σ_T |T| d_T·∇φ_v|` over interior vertices relative to the same sums of
/// absolute values.
fn divergence_defect(mesh: &TriMesh, d: &[[f64; 2]]) -> f64 {
    let nv = mesh.num_vertices();
    let mut r = vec![0.0; nv];
    let mut s = vec![0.0; nv];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = mesh.basis_gradients(t);
        let a = mesh.area(t);
        let dn = d[t][0].hypot(d[t][1]);
        for k in 0..3 {
            r[tri[k]] += a * (d[t][0] * g[k][0] + d[t][1] * g[k][1]);
            s[tri[k]] += a * dn * g[k][0].hypot(g[k][1]);
        }
    }
    let (mut num, mut den) = (0.0, 0.0);
    for v in mesh.interior_vertices() {
        num += r[v] * r[v];
        den += s[v] * s[v];
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

struct Sequences {
    a: Vec<[f64; 2]>,
    b: Vec<[f64; 2]>,
}

fn build_member(recipe: DivCurlRecipe, mesh: &Arc<TriMesh>, k: usize) -> Result<Sequences> {
    let kp = k as f64 * PI;
    let cs = mesh.centroids();
    let base_a: Vec<[f64; 2]> = cs.iter().map(|&x| limit_a(x)).collect();
    let base_b: Vec<[f64; 2]> = cs.iter().map(|&x| limit_b(x)).collect();
    Ok(match recipe {
        DivCurlRecipe::Constant => Sequences { a: base_a, b: base_b },
        DivCurlRecipe::Positive | DivCurlRecipe::NegativeControl => {
            let a: Vec<[f64; 2]> = cs
                .iter()
                .zip(&base_a)
                .map(|(x, a)| [a[0] + (kp * x[0]).cos(), a[1]])
                .collect();
            let b = if recipe == DivCurlRecipe::NegativeControl {
                a.clone()
            } else {
                let psi = PiecewiseField::vertex_scalar(mesh.clone(), |x| (kp * x[0]).sin() * (kp * x[1]).sin() / kp)?;
                let g = gradient(&psi)?;
                base_b
                    .iter()
                    .enumerate()
                    .map(|(t, b)| {
                        let gt = g.block(t);
                        [b[0] - gt[1], b[1] + gt[0]]
                    })
                    .collect()
            };
            Sequences { a, b }
        }
    })
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Pairings `∫_E a^k·b^k ω φ` against their limits on the whole domain and
/// on the biting sets of `|a^k·b^k| ω`.
pub fn divcurl_experiment(config: &DivCurlConfig) -> Result<DivCurlTable> {
    if config.ks.is_empty() {
        return invalid("the k ladder is empty");
    }
    if let Some(k) = config.ks.iter().find(|&&k| k == 0 || 8 * k > config.m) {
        return invalid(format!("k = {k} is not resolved on M = {} (need 1 ≤ k, 8k ≤ M)", config.m));
    }
    let mesh = Arc::new(build_unit_square_mesh(config.m)?);
    let weight = config.weight.build(&mesh)?;
    let w = weight.values();
    let cs = mesh.centroids();
    let nt = mesh.num_triangles();
    let limit_density: Vec<f64> = cs
        .iter()
        .map(|&x| match config.recipe {
            DivCurlRecipe::NegativeControl => dot(limit_a(x), limit_a(x)),
            _ => dot(limit_a(x), limit_b(x)),
        })
        .collect();
    let tests: Vec<Vec<f64>> = (0..BASKET.len())
        .map(|i| cs.iter().map(|&x| basket_value(i, x, config.bump_radius)).collect())
        .collect();
    let members: Vec<(Vec<f64>, f64)> = config
        .ks
        .par_iter()
        .map(|&k| {
            let s = build_member(config.recipe, &mesh, k)?;
            let density: Vec<f64> = s.a.iter().zip(&s.b).map(|(a, b)| dot(*a, *b)).collect();
            let declared: Vec<[f64; 2]> = match config.recipe {
                DivCurlRecipe::NegativeControl => cs.iter().map(|&x| limit_a(x)).collect(),
                _ => cs.iter().map(|&x| limit_b(x)).collect(),
            };
            let d: Vec<[f64; 2]> = s.b.iter().zip(&declared).map(|(b, c)| [b[0] - c[0], b[1] - c[1]]).collect();
            Ok((density, divergence_defect(&mesh, &d)))
        })
        .collect::<Result<_>>()?;
    let sequence = members
        .iter()
        .map(|(density, _)| {
            PiecewiseField::new(
                mesh.clone(),
                Layout::TriangleScalar,
                1,
                density.iter().zip(w).map(|(d, w)| d.abs() * w).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let biting = biting_sets(&sequence, config.j_max)?;
    let all = vec![true; nt];
    let masks: Vec<(Option<usize>, &Vec<bool>)> = std::iter::once((None, &all))
        .chain(biting.sets.iter().enumerate().map(|(j, s)| (Some(j + 1), s)))
        .collect();
    let mut rows = Vec::new();
    for (ki, &k) in config.ks.iter().enumerate() {
        let density = &members[ki].0;
        for &(set, mask) in &masks {
            for (i, name) in BASKET.iter().enumerate() {
                let phi = &tests[i];
                let (mut pairing, mut limit, mut mass) = (0.0, 0.0, 0.0);
                for t in (0..nt).filter(|&t| mask[t]) {
                    let a = mesh.area(t) * w[t] * phi[t];
                    pairing += a * density[t];
                    limit += a * limit_density[t];
                    mass += a;
                }
                let error = pairing - limit;
                rows.push(PairingRow {
                    k,
                    set,
                    test: name.to_string(),
                    pairing,
                    limit,
                    error,
                    offset: (mass != 0.0).then(|| error / mass),
                });
            }
        }
    }
    let ks: Vec<f64> = config.ks.iter().map(|&k| k as f64).collect();
    let slopes = masks
        .iter()
        .map(|&(set, _)| {
            let worst: Vec<f64> = config
                .ks
                .iter()
                .map(|&k| {
                    rows.iter()
                        .filter(|r| r.k == k && r.set == set)
                        .fold(0.0f64, |m, r| m.max(r.error.abs()))
                })
                .collect();
            (set, loglog_slope(&ks, &worst))
        })
        .collect();
    let divergence_defect: Vec<f64> = members.iter().map(|m| m.1).collect();
    Ok(DivCurlTable {
        recipe: config.recipe,
        m: config.m,
        weight: config.weight.descriptor(),
        negative_control: divergence_defect.iter().any(|&d| d > DIVERGENCE_TOL),
        divergence_defect,
        rows,
        biting,
        slopes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(m: usize) -> Arc<TriMesh> {
        Arc::new(build_unit_square_mesh(m).unwrap())
    }

    fn scalar(mesh: &Arc<TriMesh>, f: impl Fn(Point) -> f64) -> PiecewiseField {
        PiecewiseField::triangle_scalar(mesh.clone(), f).unwrap()
    }

    #[test]
    fn recipes_round_trip_and_build() {
        let mesh = square(16);
        let recipes = [
            FluxRecipe::Zero {},
            FluxRecipe::Smooth {},
            FluxRecipe::Spike { height: 10.0, radius: 0.25 },
            FluxRecipe::Spike { height: 10.0, radius: 0.0 },
            FluxRecipe::RoughRandom { seed: 3, cells: 8 },
        ];
        for r in &recipes {
            let back: FluxRecipe = serde_json::from_str(&r.descriptor()).unwrap();
            assert_eq!(&back, r);
            assert_eq!(r.build(&mesh).unwrap().layout(), Layout::TriangleVector);
        }
        // radius 0 marks exactly the two triangles of one cell
        let f = FluxRecipe::Spike { height: 10.0, radius: 0.0 }.build(&mesh).unwrap();
        let marked = (0..mesh.num_triangles())
            .filter(|&t| f.block(t)[0] > mesh.centroid(t)[0] + 5.0)
            .count();
        assert_eq!(marked, 2);
        let w: WeightRecipe = serde_json::from_str(r#"{"recipe":"power","alpha":0.5}"#).unwrap();
        assert_eq!(w, WeightRecipe::Power { alpha: 0.5, center: [0.5, 0.5] });
        assert!(serde_json::from_str::<WeightRecipe>(r#"{"recipe":"unit","extra":1}"#).is_err());
    }

    #[test]
    fn rough_field_is_mesh_independent() {
        let r = FluxRecipe::RoughRandom { seed: 11, cells: 4 };
        let coarse = r.build(&square(8)).unwrap();
        let fine = r.build(&square(32)).unwrap();
        let m8 = coarse.mesh().clone();
        let m32 = fine.mesh().clone();
        for t in 0..m32.num_triangles() {
            let (c, _) = m8.locate(m32.centroid(t)).unwrap();
            assert_eq!(coarse.block(c), fine.block(t));
        }
    }

    fn sweep(fluxes: Vec<FluxRecipe>, weights: Vec<WeightRecipe>, ladder: Vec<usize>) -> LinearSweep {
        LinearSweep {
            operator: OperatorKind::Linear { tensor: "identity".into() },
            fluxes,
            weights,
            p: 2.0,
            ladder,
        }
    }

    #[test]
    fn keyest_zero_flux_is_sentinel() {
        let reps = verify_linear_weighted(&sweep(vec![FluxRecipe::Zero {}], vec![WeightRecipe::Unit {}], vec![8]), &SolverConfig::default()).unwrap();
        assert_eq!(reps.len(), 1);
        assert_eq!(reps[0].lhs, 0.0);
        assert_eq!(reps[0].ratio, None);
    }

    #[test]
    fn keyest_energy_case_below_one() {
        let reps = verify_linear_weighted(
            &sweep(vec![FluxRecipe::Smooth {}], vec![WeightRecipe::Unit {}], vec![16, 32]),
            &SolverConfig::default(),
        )
        .unwrap();
        for r in reps {
            // Galerkin projection of f onto discrete gradients
            assert!(r.ratio.unwrap() <= 1.0 + 1e-9, "{r:?}");
            assert!(r.ratio.unwrap() > 0.9, "{r:?}");
        }
    }

    #[test]
    fn keyest_order_and_homogeneity() {
        let spike = FluxRecipe::Spike { height: 5.0, radius: 0.25 };
        let s = sweep(
            vec![FluxRecipe::Smooth {}, spike],
            vec![WeightRecipe::Unit {}, WeightRecipe::Power { alpha: 0.5, center: [0.5, 0.5] }],
            vec![8, 16],
        );
        let reps = verify_linear_weighted(&s, &SolverConfig::default()).unwrap();
        assert_eq!(reps.len(), 8);
        assert_eq!(reps[1].context["M"], "16");
        assert!(reps[2].context["weight"].contains("power"));
        assert!(reps[4].context["flux"].contains("spike"));
        // doubling f scales both sides by 2^p and leaves the ratio
        let mesh = square(16);
        let f = FluxRecipe::Spike { height: 5.0, radius: 0.25 }.build(&mesh).unwrap();
        let tensor = PiecewiseField::scaled_identity(mesh.clone(), 1, 1.0);
        let w = WeightRecipe::Power { alpha: 0.5, center: [0.5, 0.5] }.build(&mesh).unwrap();
        let side = |f: &PiecewiseField| {
            let (v, _) = solve_linear(&tensor, &Rhs::Flux(f.clone()), &SolverConfig::default()).unwrap();
            (
                weighted_lp_power(&gradient(&v).unwrap(), &w, 2.0).unwrap(),
                weighted_lp_power(f, &w, 2.0).unwrap(),
            )
        };
        let (l1, r1) = side(&f);
        let (l2, r2) = side(&f.scaled(2.0));
        assert!((l2 / l1 - 4.0).abs() < 1e-8);
        assert!((r2 / r1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn keyest_rejects_nonlinear() {
        let mut s = sweep(vec![FluxRecipe::Zero {}], vec![WeightRecipe::Unit {}], vec![8]);
        s.operator = OperatorKind::Prototype { profile: "exp_decay".into() };
        assert!(matches!(verify_linear_weighted(&s, &SolverConfig::default()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn local_interior_over_balls() {
        let mesh = square(64);
        let tensor = PiecewiseField::scaled_identity(mesh.clone(), 1, 1.0);
        let f = FluxRecipe::RoughRandom { seed: 5, cells: 8 }.build(&mesh).unwrap();
        let (u, _) = solve_linear(&tensor, &Rhs::Flux(f.clone()), &SolverConfig::default()).unwrap();
        let w = WeightRecipe::Power { alpha: 0.5, center: [0.5, 0.5] }.build(&mesh).unwrap();
        let mut ratios = Vec::new();
        for (i, r) in [0.05, 0.1, 0.15, 0.2, 0.24].iter().enumerate() {
            for c in [[0.5, 0.5], [0.3 + 0.05 * i as f64, 0.6]] {
                let ball = Ball { center: c, radius: *r };
                if let Ok(rep) = verify_local_interior(&tensor, &f, &u, ball, &w, 2.0, 1.5) {
                    assert_eq!(rep.context["oscillation"], "0");
                    ratios.push(rep.ratio.unwrap());
                }
            }
        }
        assert!(ratios.len() >= 8);
        assert!(ratios.iter().all(|r| r.is_finite() && *r > 0.0 && *r < 10.0), "{ratios:?}");
        let zero = PiecewiseField::zeros(mesh.clone(), Layout::VertexScalar, 1);
        let zf = FluxRecipe::Zero {}.build(&mesh).unwrap();
        let rep = verify_local_interior(&tensor, &zf, &zero, Ball { center: [0.5, 0.5], radius: 0.2 }, &w, 2.0, 1.5).unwrap();
        assert_eq!(rep.ratio, None);
        // too small, and leaving the domain
        assert!(verify_local_interior(&tensor, &zf, &zero, Ball { center: [0.5, 0.5], radius: 0.005 }, &w, 2.0, 1.5).is_err());
        assert!(verify_local_interior(&tensor, &zf, &zero, Ball { center: [0.2, 0.5], radius: 0.2 }, &w, 2.0, 1.5).is_err());
    }

    #[test]
    fn local_oscillation_table() {
        // qualitative: growing oscillation of Ã over 2B, no assertion on the ratio
        let mesh = square(32);
        let f = FluxRecipe::Smooth {}.build(&mesh).unwrap();
        let w = WeightRecipe::Unit {}.build(&mesh).unwrap();
        for amp in [0.0, 0.25, 0.5, 0.9] {
            let tensor = PiecewiseField::from_fn(mesh.clone(), Layout::TriangleTensor, 1, |x, out| {
                let s = 1.0 + amp * (8.0 * PI * x[0]).sin();
                out.copy_from_slice(&[s, 0.0, 0.0, s]);
            })
            .unwrap();
            let (u, _) = solve_linear(&tensor, &Rhs::Flux(f.clone()), &SolverConfig::default()).unwrap();
            let rep = verify_local_interior(&tensor, &f, &u, Ball { center: [0.5, 0.5], radius: 0.2 }, &w, 2.0, 1.5).unwrap();
            let osc: f64 = rep.context["oscillation"].parse().unwrap();
            assert!(osc <= 2.0 * amp * 2f64.sqrt() + 1e-12);
            println!("oscillation {osc:.3} ratio {:.4}", rep.ratio.unwrap());
        }
    }

    #[test]
    fn duality_zero_and_q2_identity() {
        let mesh = square(16);
        let kind = OperatorKind::Prototype { profile: "two_minus_inverse".into() };
        let zero = FluxRecipe::Zero {}.build(&mesh).unwrap();
        let rep = verify_duality_estimate(&kind, &zero, 1.5, &SolverConfig::default()).unwrap();
        assert_eq!(rep.lhs, 0.0);
        assert_eq!(rep.ratio, Some(0.0));
        let f = FluxRecipe::Spike { height: 10.0, radius: 0.25 }.build(&mesh).unwrap();
        let a = verify_duality_estimate(&kind, &f, 2.0, &SolverConfig::default()).unwrap();
        let b = verify_apriori(&kind, &f, 2.0, &SolverConfig::default()).unwrap();
        assert_eq!(a.lhs.to_bits(), b.lhs.to_bits());
        assert_eq!(a.rhs.to_bits(), b.rhs.to_bits());
        assert!(verify_duality_estimate(&kind, &f, 2.5, &SolverConfig::default()).is_err());
    }

    #[test]
    fn weighted_apriori_for_linear_spec() {
        let mesh = square(16);
        let f = FluxRecipe::Smooth {}.build(&mesh).unwrap();
        let (u, _) = solve_registry(&OperatorKind::Linear { tensor: "identity".into() }, &f, &SolverConfig::default()).unwrap();
        let w = WeightRecipe::Power { alpha: 0.5, center: [0.5, 0.5] }.build(&mesh).unwrap();
        let rep = weighted_apriori_report(&u, &f, &w, 2.0).unwrap();
        assert_eq!(rep.id, InequalityId::Apriori3);
        assert!(rep.ratio.unwrap() < 1.0);
    }

    #[test]
    fn corpus_is_seeded_and_zero_on_boundary() {
        let mesh = square(16);
        let a = random_corpus(&mesh, 5, 9).unwrap();
        let b = random_corpus(&mesh, 5, 9).unwrap();
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.values(), y.values());
            for v in 0..mesh.num_vertices() {
                if mesh.is_boundary(v) {
                    assert_eq!(x.values()[v], 0.0);
                }
            }
        }
        assert_ne!(a[0].values(), a[1].values());
    }

    #[test]
    fn biting_constant_sequence() {
        let mesh = square(8);
        let one = scalar(&mesh, |_| 1.0);
        let b = biting_sets(&[one.clone(), one], 5).unwrap();
        assert!(b.sets.iter().all(|s| s.iter().all(|x| *x)));
        assert!(b.excluded.iter().all(|&e| e == 0.0));
        assert_eq!(b.thresholds, vec![1.0; 5]);
    }

    #[test]
    fn biting_strip_sequence() {
        // v^n = n χ_{x₁ < 1/n}: the envelope is ⌊1/x₁⌋-like, so E_j drops a
        // strip of width 2^{-j} and t_j = 2^j
        let mesh = square(128);
        let seq: Vec<PiecewiseField> = [1usize, 2, 4, 8, 16, 32]
            .iter()
            .map(|&n| scalar(&mesh, |x| if x[0] < 1.0 / n as f64 { n as f64 } else { 0.0 }))
            .collect();
        let b = biting_sets(&seq, 5).unwrap();
        for j in 1..=5 {
            assert_eq!(b.thresholds[j - 1], 2f64.powi(j as i32 - 1));
            assert!((b.excluded[j - 1] - 0.5f64.powi(j as i32)).abs() < 1e-12);
            for n in [1usize, 2, 4, 8, 16, 32] {
                // each member is bounded by t_j on E_j
                let v = &seq[n.trailing_zeros() as usize];
                for (t, inside) in b.sets[j - 1].iter().enumerate() {
                    if *inside {
                        assert!(v.values()[t] <= b.thresholds[j - 1]);
                    }
                }
            }
        }
        assert!((b.l1_bound - 1.0).abs() < 1e-12);
    }

    #[test]
    fn biting_errors() {
        let mesh = square(4);
        assert!(biting_sets(&[], 3).is_err());
        assert!(biting_sets(&[scalar(&mesh, |x| x[0] - 0.5)], 3).is_err());
    }

    proptest::proptest! {
        #[test]
        fn biting_sets_nest_and_bound(seed in 0u64..500, j_max in 1usize..8) {
            let mesh = square(16);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq: Vec<PiecewiseField> = (0..3)
                .map(|_| {
                    let vals: Vec<f64> = (0..mesh.num_triangles()).map(|_| rng.gen::<f64>().powi(4) * 10.0).collect();
                    PiecewiseField::new(mesh.clone(), Layout::TriangleScalar, 1, vals).unwrap()
                })
                .collect();
            let b = biting_sets(&seq, j_max).unwrap();
            for j in 0..j_max {
                proptest::prop_assert!(b.excluded[j] <= b.total_area * 0.5f64.powi(j as i32 + 1));
                if j > 0 {
                    proptest::prop_assert!(b.thresholds[j] >= b.thresholds[j - 1]);
                    for (s, t) in b.sets[j - 1].iter().zip(&b.sets[j]) {
                        proptest::prop_assert!(!*s || *t);
                    }
                }
            }
        }
    }

    fn divcurl(recipe: DivCurlRecipe, m: usize, ks: Vec<usize>) -> DivCurlTable {
        divcurl_experiment(&DivCurlConfig {
            recipe,
            weight: WeightRecipe::Unit {},
            ks,
            m,
            j_max: 3,
            bump_radius: 0.4,
        })
        .unwrap()
    }

    #[test]
    fn divcurl_constant_sequence_is_exact() {
        let t = divcurl(DivCurlRecipe::Constant, 64, vec![2, 4, 8]);
        assert!(t.rows.iter().all(|r| r.error == 0.0));
        assert!(!t.negative_control);
        assert_eq!(t.rows.len(), 3 * 4 * BASKET.len());
    }

    #[test]
    fn divcurl_flags_negative_control() {
        let pos = divcurl(DivCurlRecipe::Positive, 128, vec![4, 8, 16]);
        assert!(!pos.negative_control, "{:?}", pos.divergence_defect);
        let neg = divcurl(DivCurlRecipe::NegativeControl, 128, vec![4, 8, 16]);
        assert!(neg.negative_control);
        let one = neg.rows.iter().find(|r| r.k == 16 && r.set.is_none() && r.test == "one").unwrap();
        assert!((one.offset.unwrap() - 0.5).abs() < 0.02, "{one:?}");
    }

    #[test]
    fn divcurl_rejects_unresolved_k() {
        let c = DivCurlConfig {
            recipe: DivCurlRecipe::Positive,
            weight: WeightRecipe::Unit {},
            ks: vec![16],
            m: 64,
            j_max: 2,
            bump_radius: 0.4,
        };
        assert!(divcurl_experiment(&c).is_err());
    }
}
