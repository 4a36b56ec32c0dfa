//! One pipeline per subcommand. Each writes its tables as it goes, so a
//! failure part-way leaves the finished tables in the run directory.

use std::sync::Arc;

use anyhow::{anyhow, Context as _};
use rayon::prelude::*;
use serde::Serialize;
use vws_core::lab::{
    apriori_report, divcurl_experiment, duality_report, random_corpus, solve_registry, verify_linear_weighted,
    verify_local_interior, weighted_apriori_report, FluxRecipe, LinearSweep, WeightRecipe, BASKET,
};
use vws_core::mesh::{build_unit_square_mesh, gradient, weighted_lp_norm, write_field, Layout, PiecewiseField, TriMesh};
use vws_core::operators::{build_operator, check_algebra_bound, OperatorKind, Sampler};
use vws_core::report::{loglog_slope, EstimateReport, InequalityId};
use vws_core::solvers::{solve_nonlinear, InitialGuess, Rhs, SolveReport};
use vws_core::truncation::{lipschitz_truncate, weighted_stability};
use vws_core::weights::{ap_constant, ApConfig, WindowFamily};

use crate::config::{Command, ExperimentConfig, Family};
use crate::run::RunDir;

pub const ESTIMATES_CSV: &str = "estimates.csv";
pub const ESTIMATES_JSON: &str = "estimates.json";
pub const DIVCURL_CSV: &str = "divcurl.csv";

/// Context keys that identify an estimate across mesh refinements.
pub const IDENTITY_KEYS: [&str; 12] = [
    "operator",
    "flux",
    "weight",
    "part",
    "p",
    "q",
    "q_tilde",
    "ball_center",
    "ball_radius",
    "field",
    "level",
    "delta",
];

/// Flat CSV view of an [`EstimateReport`].
#[derive(Debug, Serialize)]
pub struct EstimateRow {
    pub inequality: String,
    #[serde(rename = "M")]
    pub m: String,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: Option<f64>,
    pub group: String,
    pub context: String,
}

/// The identity part of a report's context as `key=value` pairs.
pub fn group_key(r: &EstimateReport) -> String {
    IDENTITY_KEYS
        .iter()
        .filter_map(|k| r.context.get(*k).map(|v| format!("{k}={v}")))
        .collect::<Vec<_>>()
        .join(";")
}

impl From<&EstimateReport> for EstimateRow {
    fn from(r: &EstimateReport) -> Self {
        Self {
            inequality: r.id.name().into(),
            m: r.context.get("M").cloned().unwrap_or_default(),
            lhs: r.lhs,
            rhs: r.rhs,
            ratio: r.ratio,
            group: group_key(r),
            context: serde_json::to_string(&r.context).expect("string map serializes"),
        }
    }
}

fn write_estimates(run: &mut RunDir, reports: &[EstimateReport]) -> anyhow::Result<()> {
    let rows: Vec<EstimateRow> = reports.iter().map(EstimateRow::from).collect();
    run.write_csv(ESTIMATES_CSV, &rows)?;
    run.write_json(ESTIMATES_JSON, reports)
}

fn mesh(m: usize) -> anyhow::Result<Arc<TriMesh>> {
    Ok(Arc::new(build_unit_square_mesh(m)?))
}

fn operator(cfg: &ExperimentConfig) -> anyhow::Result<&OperatorKind> {
    cfg.operator.as_ref().ok_or_else(|| anyhow!("operator is missing"))
}

fn p_of(cfg: &ExperimentConfig) -> anyhow::Result<f64> {
    cfg.p.ok_or_else(|| anyhow!("p is missing"))
}

fn q_of(cfg: &ExperimentConfig) -> anyhow::Result<f64> {
    cfg.q.ok_or_else(|| anyhow!("q is missing"))
}

/// `(flux index, M)` cells in flux-major order.
fn cells(cfg: &ExperimentConfig) -> Vec<(usize, usize)> {
    (0..cfg.rhs.len())
        .flat_map(|i| cfg.ladder.iter().map(move |&m| (i, m)))
        .collect()
}

fn solve_cell(kind: &OperatorKind, recipe: &FluxRecipe, m: usize, cfg: &ExperimentConfig) -> anyhow::Result<(PiecewiseField, PiecewiseField, SolveReport)> {
    let mesh = mesh(m)?;
    let f = recipe.build(&mesh)?;
    let (u, rep) = solve_registry(kind, &f, &cfg.solver)
        .with_context(|| format!("solving {} with {} on M = {m}", kind.label(), recipe.descriptor()))?;
    Ok((f, u, rep))
}

pub fn run(command: Command, cfg: &ExperimentConfig, seed: u64, out: &mut RunDir) -> anyhow::Result<()> {
    match command {
        Command::Solve => solve(cfg, out),
        Command::Truncate => truncate(cfg, seed, out),
        Command::WeightsAp => weights_ap(cfg, out),
        Command::Verify => verify(cfg, seed, out),
        Command::Divcurl => divcurl(cfg, out),
        Command::Dirac => dirac(cfg, out),
        Command::Report => crate::report::report(cfg, out),
    }
}

#[derive(Serialize)]
struct SolveRow {
    flux: usize,
    #[serde(rename = "M")]
    m: usize,
    iterations: usize,
    converged: bool,
    relative_residual: f64,
    theta: f64,
    halvings: u32,
    krylov_method: String,
    krylov_iterations: usize,
    grad_l2: f64,
    max_abs_u: f64,
    field: String,
}

fn grad_norm(u: &PiecewiseField, q: f64) -> anyhow::Result<f64> {
    let g = gradient(u)?;
    let one = PiecewiseField::constant(u.mesh().clone(), Layout::TriangleScalar, 1, &[1.0])?;
    Ok(weighted_lp_norm(&g, &one, q)?)
}

fn solve(cfg: &ExperimentConfig, out: &mut RunDir) -> anyhow::Result<()> {
    let kind = operator(cfg)?;
    let results: Vec<_> = cells(cfg)
        .into_par_iter()
        .map(|(i, m)| solve_cell(kind, &cfg.rhs[i], m, cfg).map(|(_, u, rep)| (i, m, u, rep)))
        .collect();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut failure = None;
    for r in results {
        let (i, m, u, rep) = match r {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                continue;
            }
        };
        let name = format!("fields/u_f{i}_M{m}.txt");
        out.write_bytes(&name, write_field(&u).as_bytes())?;
        rows.push(SolveRow {
            flux: i,
            m,
            iterations: rep.iterations,
            converged: rep.converged,
            relative_residual: rep.relative_residual,
            theta: rep.theta,
            halvings: rep.halvings,
            krylov_method: rep.krylov_method.clone(),
            krylov_iterations: rep.krylov_iterations,
            grad_l2: grad_norm(&u, 2.0)?,
            max_abs_u: u.max_abs(),
            field: name,
        });
        reports.push(rep);
    }
    out.write_csv("solve.csv", &rows)?;
    out.write_json("solve.json", &reports)?;
    failure.map_or(Ok(()), Err)
}

#[derive(Serialize)]
struct DiracRow {
    #[serde(rename = "M")]
    m: usize,
    iterations: usize,
    converged: bool,
    relative_residual: f64,
    q: f64,
    grad_lq: f64,
    grad_l2: f64,
    field: String,
}

fn dirac(cfg: &ExperimentConfig, out: &mut RunDir) -> anyhow::Result<()> {
    let kind = operator(cfg)?;
    let block = cfg.dirac.as_ref().ok_or_else(|| anyhow!("dirac block is missing"))?;
    let q = q_of(cfg)?;
    let spec = build_operator(kind, block.amplitude.len())?;
    let results: Vec<anyhow::Result<_>> = cfg
        .ladder
        .par_iter()
        .map(|&m| {
            let mesh = mesh(m)?;
            let rhs = Rhs::dirac(&mesh, block.point, block.amplitude.clone())?;
            let (u, rep) = solve_nonlinear(&spec, &rhs, &mesh, &cfg.solver, &InitialGuess::Zero)
                .with_context(|| format!("point load on M = {m}"))?;
            Ok((m, u, rep))
        })
        .collect();
    let mut rows = Vec::new();
    let mut failure = None;
    for r in results {
        let (m, u, rep) = match r {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                continue;
            }
        };
        let name = format!("fields/u_M{m}.txt");
        out.write_bytes(&name, write_field(&u).as_bytes())?;
        rows.push(DiracRow {
            m,
            iterations: rep.iterations,
            converged: rep.converged,
            relative_residual: rep.relative_residual,
            q,
            grad_lq: grad_norm(&u, q)?,
            grad_l2: grad_norm(&u, 2.0)?,
            field: name,
        });
    }
    out.write_csv("dirac.csv", &rows)?;
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.m as f64, r.grad_lq)).collect();
    out.write_plot("plots/M_grad_lq.dat", ["M", "grad_lq"], &points)?;
    failure.map_or(Ok(()), Err)
}

#[derive(Serialize)]
struct TruncationRow {
    field: usize,
    #[serde(rename = "M")]
    m: usize,
    level: f64,
    lambda: f64,
    c_used: f64,
    good_fraction: f64,
    measured_gradient_bound: f64,
    certified_constant: f64,
}

/// Truncation rows and weighted stability reports for the corpus, in
/// `(M, field, level, weight)` order.
fn truncation_sweep(cfg: &ExperimentConfig, seed: u64, out: Option<&mut RunDir>) -> anyhow::Result<(Vec<TruncationRow>, Vec<EstimateReport>)> {
    let block = cfg.truncation.as_ref().ok_or_else(|| anyhow!("truncation block is missing"))?;
    let p = p_of(cfg)?;
    let weights = if cfg.weights.is_empty() {
        vec![WeightRecipe::Unit {}]
    } else {
        cfg.weights.clone()
    };
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut dumps = Vec::new();
    for &m in &cfg.ladder {
        let mesh = mesh(m)?;
        let corpus = random_corpus(&mesh, block.corpus, seed)?;
        let ws = weights.iter().map(|w| w.build(&mesh)).collect::<Result<Vec<_>, _>>()?;
        let cells: Vec<(usize, usize)> = (0..corpus.len())
            .flat_map(|i| (0..block.levels.len()).map(move |l| (i, l)))
            .collect();
        let results: Vec<anyhow::Result<_>> = cells
            .par_iter()
            .map(|&(i, l)| {
                let g = &corpus[i];
                let mean = g_mean_gradient(g)?;
                let level = block.levels[l];
                let tr = lipschitz_truncate(g, level * mean, &block.config)
                    .with_context(|| format!("truncating field {i} at level {level} on M = {m}"))?;
                let mut reps = Vec::new();
                for (w, recipe) in ws.iter().zip(&weights) {
                    let (a, b) = weighted_stability(g, &tr, w, p)?;
                    for r in [a, b] {
                        reps.push(
                            r.with("field", i)
                                .with("level", level)
                                .with("weight", recipe.descriptor())
                                .with("seed", seed),
                        );
                    }
                }
                Ok((i, l, tr, reps))
            })
            .collect();
        for r in results {
            let (i, l, tr, reps) = r?;
            let side = tr.sidecar();
            rows.push(TruncationRow {
                field: i,
                m,
                level: block.levels[l],
                lambda: tr.lambda,
                c_used: tr.c_used,
                good_fraction: side.good_fraction,
                measured_gradient_bound: tr.measured_gradient_bound,
                certified_constant: tr.certified_constant,
            });
            reports.extend(reps);
            if block.dump && i == 0 {
                dumps.push((format!("fields/g_lambda_M{m}_level{l}"), write_field(&tr.g_lambda), side));
            }
        }
    }
    if let Some(out) = out {
        for (stem, field, side) in dumps {
            out.write_bytes(&format!("{stem}.txt"), field.as_bytes())?;
            out.write_json(&format!("{stem}.json"), &side)?;
        }
    }
    Ok((rows, reports))
}

fn g_mean_gradient(g: &PiecewiseField) -> anyhow::Result<f64> {
    let grad = gradient(g)?;
    let mesh = g.mesh();
    let total: f64 = grad.pointwise_norms().iter().enumerate().map(|(t, n)| n * mesh.area(t)).sum();
    Ok(total / mesh.total_area())
}

fn truncate(cfg: &ExperimentConfig, seed: u64, out: &mut RunDir) -> anyhow::Result<()> {
    let (rows, reports) = truncation_sweep(cfg, seed, Some(out))?;
    out.write_csv("truncate.csv", &rows)?;
    write_estimates(out, &reports)
}

#[derive(Serialize)]
struct ApRow {
    weight: String,
    #[serde(rename = "M")]
    m: usize,
    p: f64,
    ap_constant: f64,
    worst_window: String,
    reverse_holder_s: Option<f64>,
    dual_reverse_holder_s: Option<f64>,
    embedding_q: Option<f64>,
    family: String,
}

fn weights_ap(cfg: &ExperimentConfig, out: &mut RunDir) -> anyhow::Result<()> {
    let p = p_of(cfg)?;
    let family = cfg.family.unwrap_or_default();
    let cells: Vec<(usize, usize)> = (0..cfg.weights.len())
        .flat_map(|i| cfg.ladder.iter().map(move |&m| (i, m)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(i, m)| {
            let mesh = mesh(m)?;
            let w = cfg.weights[i].build(&mesh)?;
            let fam = match family {
                Family::Centered => WindowFamily::centered(&mesh),
                Family::DyadicShifted => WindowFamily::dyadic_shifted(&mesh),
            };
            let ap = ap_constant(&w, p, &fam, &ApConfig::default())?;
            Ok(ApRow {
                weight: cfg.weights[i].descriptor(),
                m,
                p,
                ap_constant: ap.ap_constant,
                worst_window: ap.worst_window,
                reverse_holder_s: ap.reverse_holder_s,
                dual_reverse_holder_s: ap.dual_reverse_holder_s,
                embedding_q: ap.embedding_q,
                family: ap.family_descriptor,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    out.write_csv("weights_ap.csv", &rows)
}

fn verify(cfg: &ExperimentConfig, seed: u64, out: &mut RunDir) -> anyhow::Result<()> {
    let id = cfg.inequality.ok_or_else(|| anyhow!("inequality is missing"))?;
    let reports = match id {
        InequalityId::Keyest => {
            let sweep = LinearSweep {
                operator: operator(cfg)?.clone(),
                fluxes: cfg.rhs.clone(),
                weights: cfg.weights.clone(),
                p: p_of(cfg)?,
                ladder: cfg.ladder.clone(),
            };
            verify_linear_weighted(&sweep, &cfg.solver)?
        }
        InequalityId::Apriori | InequalityId::Apriori2 => {
            let kind = operator(cfg)?;
            let q = q_of(cfg)?;
            cells(cfg)
                .into_par_iter()
                .map(|(i, m)| {
                    let (f, u, rep) = solve_cell(kind, &cfg.rhs[i], m, cfg)?;
                    let r = if id == InequalityId::Apriori {
                        apriori_report(&u, &f, q)?
                    } else {
                        duality_report(&u, &f, q)?
                    };
                    Ok(r.with("operator", kind.label())
                        .with("flux", cfg.rhs[i].descriptor())
                        .with("iterations", rep.iterations))
                })
                .collect::<anyhow::Result<Vec<_>>>()?
        }
        InequalityId::Apriori3 => {
            let kind = operator(cfg)?;
            let p = p_of(cfg)?;
            let nested = cells(cfg)
                .into_par_iter()
                .map(|(i, m)| {
                    let (f, u, rep) = solve_cell(kind, &cfg.rhs[i], m, cfg)?;
                    cfg.weights
                        .iter()
                        .map(|w| {
                            let r = weighted_apriori_report(&u, &f, &w.build(u.mesh())?, p)?;
                            Ok(r.with("operator", kind.label())
                                .with("flux", cfg.rhs[i].descriptor())
                                .with("weight", w.descriptor())
                                .with("iterations", rep.iterations))
                        })
                        .collect::<anyhow::Result<Vec<_>>>()
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            nested.into_iter().flatten().collect()
        }
        InequalityId::Unlocal => {
            let kind = operator(cfg)?;
            let p = p_of(cfg)?;
            let q_tilde = cfg.q_tilde.ok_or_else(|| anyhow!("q_tilde is missing"))?;
            let nested = cells(cfg)
                .into_par_iter()
                .map(|(i, m)| {
                    let (f, u, _) = solve_cell(kind, &cfg.rhs[i], m, cfg)?;
                    let tensor = build_operator(kind, 1)?.target_field(u.mesh());
                    let mut reps = Vec::new();
                    for w in &cfg.weights {
                        let wf = w.build(u.mesh())?;
                        for ball in &cfg.balls {
                            let r = verify_local_interior(&tensor, &f, &u, *ball, &wf, p, q_tilde)?;
                            reps.push(
                                r.with("operator", kind.label())
                                    .with("flux", cfg.rhs[i].descriptor())
                                    .with("weight", w.descriptor()),
                            );
                        }
                    }
                    Ok(reps)
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            nested.into_iter().flatten().collect()
        }
        InequalityId::ItmWeight => truncation_sweep(cfg, seed, None)?.1,
        InequalityId::Algebra => {
            let kind = operator(cfg)?;
            let block = cfg.algebra.as_ref().ok_or_else(|| anyhow!("algebra block is missing"))?;
            let spec = build_operator(kind, 1)?;
            let sampler = Sampler::standard(1, block.random_directions, seed);
            block
                .deltas
                .par_iter()
                .map(|&delta| {
                    let b = check_algebra_bound(&spec, delta, &sampler, block.cap)?;
                    Ok(EstimateReport::new(InequalityId::Algebra, b.c, 1.0)
                        .with("operator", kind.label())
                        .with("delta", delta)
                        .with("cap", block.cap)
                        .with("pairs_checked", b.pairs_checked)
                        .with("seed", seed))
                })
                .collect::<anyhow::Result<Vec<_>>>()?
        }
    };
    write_estimates(out, &reports)
}

#[derive(Serialize)]
struct DivCurlRow {
    recipe: String,
    #[serde(rename = "M")]
    m: usize,
    k: usize,
    set: String,
    test: String,
    pairing: f64,
    limit: f64,
    error: f64,
    offset: Option<f64>,
}

#[derive(Serialize)]
struct BitingRow {
    j: usize,
    threshold: f64,
    excluded: f64,
    bound: f64,
}

#[derive(Serialize)]
struct DivCurlSummary {
    recipe: String,
    m: usize,
    weight: String,
    ks: Vec<usize>,
    basket: Vec<String>,
    divergence_defect: Vec<f64>,
    negative_control: bool,
    l1_bound: f64,
    slopes: Vec<(Option<usize>, Option<f64>)>,
}

fn set_name(set: Option<usize>) -> String {
    set.map_or_else(|| "all".to_string(), |j| format!("E{j}"))
}

/// Basket maximum of `|error|` per `k` on one set.
pub fn basket_max(rows: &[(usize, String, f64)], set: &str, ks: &[usize]) -> Vec<(f64, f64)> {
    ks.iter()
        .map(|&k| {
            let e = rows
                .iter()
                .filter(|(rk, rs, _)| *rk == k && rs == set)
                .map(|(_, _, e)| e.abs())
                .fold(0.0f64, f64::max);
            (k as f64, e)
        })
        .collect()
}

fn divcurl(cfg: &ExperimentConfig, out: &mut RunDir) -> anyhow::Result<()> {
    let dc = cfg.divcurl.as_ref().ok_or_else(|| anyhow!("divcurl block is missing"))?;
    let table = divcurl_experiment(dc)?;
    let recipe = serde_json::to_value(table.recipe)?.as_str().unwrap_or_default().to_string();
    let rows: Vec<DivCurlRow> = table
        .rows
        .iter()
        .map(|r| DivCurlRow {
            recipe: recipe.clone(),
            m: table.m,
            k: r.k,
            set: set_name(r.set),
            test: r.test.clone(),
            pairing: r.pairing,
            limit: r.limit,
            error: r.error,
            offset: r.offset,
        })
        .collect();
    out.write_csv(DIVCURL_CSV, &rows)?;
    let b = &table.biting;
    let biting: Vec<BitingRow> = (0..b.thresholds.len())
        .map(|i| BitingRow {
            j: i + 1,
            threshold: b.thresholds[i],
            excluded: b.excluded[i],
            bound: b.total_area / 2f64.powi(i as i32 + 1),
        })
        .collect();
    out.write_csv("biting.csv", &biting)?;
    let flat: Vec<(usize, String, f64)> = rows.iter().map(|r| (r.k, r.set.clone(), r.error)).collect();
    for (set, _) in &table.slopes {
        let name = set_name(*set);
        out.write_plot(&format!("plots/k_error_{name}.dat"), ["k", "max_error"], &basket_max(&flat, &name, &dc.ks))?;
    }
    out.write_json(
        "divcurl.json",
        &DivCurlSummary {
            recipe,
            m: table.m,
            weight: table.weight.clone(),
            ks: dc.ks.clone(),
            basket: BASKET.iter().map(|s| s.to_string()).collect(),
            divergence_defect: table.divergence_defect.clone(),
            negative_control: table.negative_control,
            l1_bound: b.l1_bound,
            slopes: table.slopes.clone(),
        },
    )
}

/// Slope of the basket maximum against `k` for one set of a divcurl table.
pub fn divcurl_slope(rows: &[(usize, String, f64)], set: &str) -> Option<f64> {
    let mut ks: Vec<usize> = rows.iter().filter(|r| r.1 == set).map(|r| r.0).collect();
    ks.sort_unstable();
    ks.dedup();
    let pts = basket_max(rows, set, &ks);
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    loglog_slope(&xs, &ys)
}
