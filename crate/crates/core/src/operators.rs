//! Nonlinear operators `A(x, η)` with linear targets `Ã(x)`, and sampled
//! certificates of the structural assumptions.
//!
//! A gradient matrix `η ∈ R^{2×N}` is stored component-major: entry
//! `(μ, i)` (component `μ`, spatial direction `i`) sits at `2μ + i`. A target
//! tensor is the row-major `(2N)×(2N)` matrix acting on that vector.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mesh::{Layout, PiecewiseField, TriMesh};
use crate::Point;

pub type EvalFn = Arc<dyn Fn(Point, &[f64], &mut [f64]) + Send + Sync>;
pub type TargetFn = Arc<dyn Fn(Point, &mut [f64]) + Send + Sync>;
pub type ProfileFn = Arc<dyn Fn(Point, f64) -> f64 + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;

/// Config-level description of a registry operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorKind {
    /// `A(x, η) = Ã(x)η` with a named tensor: `identity`, `diag12` or `smooth`.
    Linear { tensor: String },
    /// `A(x, η) = a(|η|)η` with a named profile: `two_minus_inverse`
    /// (`2 − 1/(1+λ)`), `exp_decay` (`1 + e^{−λ}`) or `one_plus_inverse`
    /// (`1 + 1/(1+λ)`).
    Prototype { profile: String },
    /// `max{μ, λ^{p−2}}` for `p < 2`, `min{μ^{−1}, λ^{p−2}}` for `p > 2`.
    PLaplaceClamp { p: f64, mu: f64 },
    /// Named registry entries used as negative controls: `negative_identity`.
    Custom { name: String },
}

impl OperatorKind {
    pub fn label(&self) -> String {
        match self {
            Self::Linear { tensor } => format!("linear:{tensor}"),
            Self::Prototype { profile } => format!("prototype:{profile}"),
            Self::PLaplaceClamp { p, mu } => format!("p_laplace_clamp:p={p},mu={mu}"),
            Self::Custom { name } => format!("custom:{name}"),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Self::Linear { .. })
    }
}

#[derive(Clone)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    pub n_comp: usize,
    pub c1: f64,
    pub c2: f64,
    /// Magnitudes `|η|` where `A(x, ·)` is not differentiable.
    pub kink_radii: Vec<f64>,
    evaluate: EvalFn,
    target: TargetFn,
}

impl fmt::Debug for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorSpec")
            .field("kind", &self.kind)
            .field("n_comp", &self.n_comp)
            .field("c1", &self.c1)
            .field("c2", &self.c2)
            .finish_non_exhaustive()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(&m[r * d..(r + 1) * d], v);
    }
}

/// Points at which `x`-dependent data is sampled by the certificates.
const SAMPLE_POINTS: [Point; 5] = [[0.5, 0.5], [0.1, 0.2], [0.9, 0.7], [0.3, 0.8], [0.7, 0.3]];

impl OperatorSpec {
    /// Builds a spec from raw closures. `c1` and `c2` are taken as given.
    pub fn custom(
        kind: OperatorKind,
        n_comp: usize,
        c1: f64,
        c2: f64,
        evaluate: EvalFn,
        target: TargetFn,
    ) -> Result<Self> {
        if n_comp == 0 {
            return invalid("operators need at least one component");
        }
        if !(c1 > 0.0 && c2 > 0.0) {
            return invalid(format!("ellipticity constants must be positive, got c1={c1}, c2={c2}"));
        }
        Ok(Self {
            kind,
            n_comp,
            c1,
            c2,
            kink_radii: Vec::new(),
            evaluate,
            target,
        })
    }

    /// Length `2N` of a gradient block.
    pub fn dim(&self) -> usize {
        2 * self.n_comp
    }

    pub fn eval(&self, x: Point, eta: &[f64], out: &mut [f64]) {
        (self.evaluate)(x, eta, out)
    }

    pub fn eval_vec(&self, x: Point, eta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; eta.len()];
        self.eval(x, eta, &mut out);
        out
    }

    pub fn target_at(&self, x: Point, out: &mut [f64]) {
        (self.target)(x, out)
    }

    /// `Ã(x)η`.
    pub fn apply_target(&self, x: Point, eta: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut t = vec![0.0; d * d];
        self.target_at(x, &mut t);
        let mut out = vec![0.0; d];
        matvec(&t, eta, &mut out);
        out
    }

    /// `Ã` sampled at triangle centroids.
    pub fn target_field(&self, mesh: &Arc<TriMesh>) -> PiecewiseField {
        let d = self.dim();
        let mut values = vec![0.0; mesh.num_triangles() * d * d];
        values
            .par_chunks_mut(d * d)
            .zip(mesh.centroids().par_iter())
            .for_each(|(block, &c)| self.target_at(c, block));
        PiecewiseField::new(mesh.clone(), Layout::TriangleTensor, self.n_comp, values).expect("finite target tensor")
    }

    /// `A(x, G)` per triangle for a triangle-vector field `G`.
    pub fn apply_field(&self, grad: &PiecewiseField) -> Result<PiecewiseField> {
        grad.require_layout(Layout::TriangleVector)?;
        if grad.n_comp() != self.n_comp {
            return Err(Error::FieldShape(format!(
                "operator has {} components, field has {}",
                self.n_comp,
                grad.n_comp()
            )));
        }
        let d = self.dim();
        let mesh = grad.mesh().clone();
        let mut values = vec![0.0; grad.values().len()];
        values
            .par_chunks_mut(d)
            .zip(grad.values().par_chunks(d))
            .enumerate()
            .for_each(|(t, (out, eta))| self.eval(mesh.centroid(t), eta, out));
        PiecewiseField::new(mesh, Layout::TriangleVector, self.n_comp, values)
    }

    /// Whether `Ã(x)` is symmetric at every centroid.
    pub fn target_is_symmetric(&self, mesh: &TriMesh) -> bool {
        let d = self.dim();
        let mut t = vec![0.0; d * d];
        mesh.centroids().iter().all(|&c| {
            self.target_at(c, &mut t);
            (0..d).all(|r| (0..r).all(|s| (t[r * d + s] - t[s * d + r]).abs() <= 1e-14 * (1.0 + t[r * d + s].abs())))
        })
    }
}

fn scaled_identity(d: usize, c: f64, out: &mut [f64]) {
    out.fill(0.0);
    for r in 0..d {
        out[r * d + r] = c;
    }
}

/// `A(x, η) = a(x, |η|)η` with target `ã(x)·I`.
///
/// Positivity of `a` and monotonicity of `λ ↦ a(x, λ)λ` are checked on the
/// standard magnitude ladder at a few sample points. `c1` is the infimum of
/// `a` for `λ ≥ 1`, `c2` bounds both `c1` and `|A(η)| / (1 + |η|)`.
pub fn make_prototype(profile: ProfileFn, a_tilde: ScalarFn, n_comp: usize, kind: OperatorKind) -> Result<OperatorSpec> {
    let ladder = magnitude_ladder();
    let mut c1 = f64::INFINITY;
    let mut growth: f64 = 0.0;
    for &x in &SAMPLE_POINTS {
        let mut prev = 0.0;
        for &lam in &ladder {
            let a = profile(x, lam);
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::OperatorCheck(format!("profile a({lam}) = {a} is not positive at {x:?}")));
            }
            if a * lam < prev * (1.0 - 1e-12) {
                return Err(Error::OperatorCheck(format!(
                    "a(λ)λ decreases at λ = {lam} (x = {x:?}): {} < {prev}",
                    a * lam
                )));
            }
            prev = a * lam;
            if lam >= 1.0 {
                c1 = c1.min(a);
            }
            growth = growth.max(a * lam / (1.0 + lam));
        }
        if !(a_tilde(x) > 0.0) {
            return Err(Error::OperatorCheck(format!("target coefficient is not positive at {x:?}")));
        }
    }
    let c2 = growth.max(c1);
    let d = 2 * n_comp;
    let p2 = profile.clone();
    let evaluate: EvalFn = Arc::new(move |x, eta, out| {
        let lam = norm(eta);
        if lam == 0.0 {
            out.fill(0.0);
            return;
        }
        let a = p2(x, lam);
        for (o, e) in out.iter_mut().zip(eta) {
            *o = a * e;
        }
    });
    let target: TargetFn = Arc::new(move |x, out| scaled_identity(d, a_tilde(x), out));
    OperatorSpec::custom(kind, n_comp, c1, c2, evaluate, target)
}

/// Radius beyond which a clamp is exactly linear: `μ^{−1/|p−2|}`.
pub fn clamp_radius(p: f64, mu: f64) -> f64 {
    mu.powf(-1.0 / (p - 2.0).abs())
}

fn linear_tensor(name: &str) -> Option<Arc<dyn Fn(Point) -> [[f64; 2]; 2] + Send + Sync>> {
    match name {
        "identity" => Some(Arc::new(|_| [[1.0, 0.0], [0.0, 1.0]])),
        "diag12" => Some(Arc::new(|_| [[1.0, 0.0], [0.0, 2.0]])),
        "smooth" => Some(Arc::new(|x: Point| {
            let off = 0.5 * x[0] * x[1];
            [
                [2.0 + (std::f64::consts::PI * x[0]).sin(), off],
                [off, 2.0 + (std::f64::consts::PI * x[1]).cos()],
            ]
        })),
        _ => None,
    }
}

/// Names accepted by [`build_operator`] for each kind.
pub const LINEAR_TENSORS: [&str; 3] = ["identity", "diag12", "smooth"];
pub const PROTOTYPE_PROFILES: [&str; 3] = ["two_minus_inverse", "exp_decay", "one_plus_inverse"];
pub const CUSTOM_OPERATORS: [&str; 1] = ["negative_identity"];

/// Instantiates a registry operator with `n_comp` components. Linear
/// tensors act on each component separately.
pub fn build_operator(kind: &OperatorKind, n_comp: usize) -> Result<OperatorSpec> {
    if n_comp == 0 {
        return invalid("operators need at least one component");
    }
    let d = 2 * n_comp;
    match kind {
        OperatorKind::Linear { tensor } => {
            let Some(t) = linear_tensor(tensor) else {
                return invalid(format!("unknown linear tensor `{tensor}`"));
            };
            let t2 = t.clone();
            let target: TargetFn = Arc::new(move |x, out| {
                out.fill(0.0);
                let m = t2(x);
                for mu in 0..n_comp {
                    for i in 0..2 {
                        for j in 0..2 {
                            out[(2 * mu + i) * d + 2 * mu + j] = m[i][j];
                        }
                    }
                }
            });
            let tg = target.clone();
            let evaluate: EvalFn = Arc::new(move |x, eta, out| {
                let mut m = vec![0.0; d * d];
                tg(x, &mut m);
                matvec(&m, eta, out);
            });
            // eigenvalue bounds of the symmetric 2×2 block over the sample points
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for &x in &SAMPLE_POINTS {
                let m = t(x);
                let tr = m[0][0] + m[1][1];
                let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                lo = lo.min(tr / 2.0 - disc);
                hi = hi.max(tr / 2.0 + disc);
            }
            OperatorSpec::custom(kind.clone(), n_comp, lo, hi, evaluate, target)
        }
        OperatorKind::Prototype { profile } => {
            let (a, at): (ProfileFn, f64) = match profile.as_str() {
                "two_minus_inverse" => (Arc::new(|_, l| 2.0 - 1.0 / (1.0 + l)), 2.0),
                "exp_decay" => (Arc::new(|_, l: f64| 1.0 + (-l).exp()), 1.0),
                "one_plus_inverse" => (Arc::new(|_, l| 1.0 + 1.0 / (1.0 + l)), 1.0),
                other => return invalid(format!("unknown prototype profile `{other}`")),
            };
            make_prototype(a, Arc::new(move |_| at), n_comp, kind.clone())
        }
        &OperatorKind::PLaplaceClamp { p, mu } => {
            if !(p > 1.0) || p == 2.0 || !p.is_finite() {
                return invalid(format!("clamp exponent must lie in (1,2) ∪ (2,∞), got {p}"));
            }
            if !(mu > 0.0 && mu < 1.0) {
                return invalid(format!("clamp parameter must lie in (0,1), got {mu}"));
            }
            let (a, at): (ProfileFn, f64) = if p < 2.0 {
                (Arc::new(move |_, l: f64| mu.max(l.powf(p - 2.0))), mu)
            } else {
                (Arc::new(move |_, l: f64| (1.0 / mu).min(l.powf(p - 2.0))), 1.0 / mu)
            };
            let mut spec = make_prototype(a, Arc::new(move |_| at), n_comp, kind.clone())?;
            spec.kink_radii = vec![clamp_radius(p, mu)];
            Ok(spec)
        }
        OperatorKind::Custom { name } => match name.as_str() {
            "negative_identity" => {
                let evaluate: EvalFn = Arc::new(|_, eta, out| {
                    for (o, e) in out.iter_mut().zip(eta) {
                        *o = -e;
                    }
                });
                let target: TargetFn = Arc::new(move |_, out| scaled_identity(d, -1.0, out));
                OperatorSpec::custom(kind.clone(), n_comp, 1.0, 1.0, evaluate, target)
            }
            other => invalid(format!("unknown custom operator `{other}`")),
        },
    }
}

/// Every strictly monotone registry operator (the custom negative controls
/// are excluded).
pub fn registry() -> Vec<OperatorKind> {
    let mut out: Vec<OperatorKind> = LINEAR_TENSORS
        .iter()
        .map(|t| OperatorKind::Linear { tensor: t.to_string() })
        .collect();
    out.extend(PROTOTYPE_PROFILES.iter().map(|p| OperatorKind::Prototype { profile: p.to_string() }));
    out.push(OperatorKind::PLaplaceClamp { p: 1.8, mu: 0.5 });
    out.push(OperatorKind::PLaplaceClamp { p: 2.5, mu: 0.5 });
    out
}

/// `10^{-3}, 10^{-2.9}, …, 10^{6}`.
pub fn magnitude_ladder() -> Vec<f64> {
    (0..=90).map(|i| 10f64.powf(-3.0 + i as f64 / 10.0)).collect()
}

/// Sample set for the certificates: magnitudes times unit directions at a
/// few points of the domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub magnitudes: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
    pub points: Vec<Point>,
    pub seed: u64,
}

impl Sampler {
    /// 32 evenly spread directions in each component plane, plus
    /// `random` seeded unit vectors in `R^{2N}`.
    pub fn standard(n_comp: usize, random: usize, seed: u64) -> Self {
        let d = 2 * n_comp;
        let mut directions = Vec::new();
        for mu in 0..n_comp {
            for k in 0..32 {
                let th = 2.0 * std::f64::consts::PI * k as f64 / 32.0;
                let mut v = vec![0.0; d];
                v[2 * mu] = th.cos();
                v[2 * mu + 1] = th.sin();
                directions.push(v);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while directions.len() < 32 * n_comp + random {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = norm(&v);
            if n > 1e-3 && n <= 1.0 {
                directions.push(v.iter().map(|x| x / n).collect());
            }
        }
        Self {
            magnitudes: magnitude_ladder(),
            directions,
            points: SAMPLE_POINTS.to_vec(),
            seed,
        }
    }

    /// Keeps magnitudes `≤ cap`.
    pub fn capped(&self, cap: f64) -> Self {
        Self {
            magnitudes: self.magnitudes.iter().copied().filter(|&m| m <= cap).collect(),
            ..self.clone()
        }
    }

    fn check(&self, spec: &OperatorSpec) -> Result<()> {
        if self.magnitudes.is_empty() || self.directions.is_empty() || self.points.is_empty() {
            return invalid("sampler is empty");
        }
        if self.directions.iter().any(|d| d.len() != spec.dim()) {
            return invalid("sampler directions do not match the operator dimension");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsymptoticMode {
    /// `|A(x, η) − Ã(x)η| ≤ ε|η|`.
    Value,
    /// `|∂A/∂η(x, η) − Ã(x)| ≤ ε` (Frobenius norm, central differences).
    Derivative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticCertificate {
    pub epsilon: f64,
    /// Smallest ladder magnitude from which every sampled level passes;
    /// `Some(0.0)` when all levels pass, `None` when the top level fails.
    pub k: Option<f64>,
    pub mode: AsymptoticMode,
    pub samples_checked: usize,
    /// Derivative samples within one step of a kink radius, skipped.
    pub samples_excluded: usize,
    /// Largest violation among samples with `|η| ≥ k` (all samples if failed).
    pub worst_violation: f64,
    /// `(magnitude, worst violation at that magnitude)` per ladder level.
    pub profile: Vec<(f64, f64)>,
    pub seed: u64,
}

impl AsymptoticCertificate {
    pub fn passed(&self) -> bool {
        self.k.is_some()
    }
}

/// Measures the asymptotic deviation from `Ã` on every ladder level.
pub fn check_asymptotic(
    spec: &OperatorSpec,
    epsilon: f64,
    mode: AsymptoticMode,
    sampler: &Sampler,
) -> Result<AsymptoticCertificate> {
    if !(epsilon > 0.0) {
        return invalid("epsilon must be positive");
    }
    sampler.check(spec)?;
    let d = spec.dim();
    let levels: Vec<(f64, usize, usize)> = sampler
        .magnitudes
        .par_iter()
        .map(|&m| {
            let mut worst: f64 = 0.0;
            let mut checked = 0;
            let mut excluded = 0;
            let mut eta = vec![0.0; d];
            let mut a = vec![0.0; d];
            let mut t = vec![0.0; d * d];
            let mut te = vec![0.0; d];
            for &x in &sampler.points {
                spec.target_at(x, &mut t);
                for dir in &sampler.directions {
                    for (e, v) in eta.iter_mut().zip(dir) {
                        *e = m * v;
                    }
                    match mode {
                        AsymptoticMode::Value => {
                            spec.eval(x, &eta, &mut a);
                            matvec(&t, &eta, &mut te);
                            let dev: f64 = a.iter().zip(&te).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                            worst = worst.max(dev / m);
                            checked += 1;
                        }
                        AsymptoticMode::Derivative => {
                            let step = 1e-4 * m + 1e-8;
                            if spec.kink_radii.iter().any(|&r| (m - r).abs() <= step) {
                                excluded += 1;
                                continue;
                            }
                            let mut frob = 0.0;
                            let mut plus = eta.clone();
                            let mut minus = eta.clone();
                            let mut ap = vec![0.0; d];
                            let mut am = vec![0.0; d];
                            for c in 0..d {
                                plus[c] += step;
                                minus[c] -= step;
                                spec.eval(x, &plus, &mut ap);
                                spec.eval(x, &minus, &mut am);
                                plus[c] = eta[c];
                                minus[c] = eta[c];
                                for r in 0..d {
                                    let fd = (ap[r] - am[r]) / (2.0 * step);
                                    frob += (fd - t[r * d + c]).powi(2);
                                }
                            }
                            worst = worst.max(frob.sqrt());
                            checked += 1;
                        }
                    }
                }
            }
            (worst, checked, excluded)
        })
        .collect();
    let profile: Vec<(f64, f64)> = sampler.magnitudes.iter().zip(&levels).map(|(&m, l)| (m, l.0)).collect();
    let samples_checked = levels.iter().map(|l| l.1).sum();
    let samples_excluded = levels.iter().map(|l| l.2).sum();
    // first level from which every higher level passes
    let mut first_pass = levels.len();
    for i in (0..levels.len()).rev() {
        if levels[i].0 <= epsilon {
            first_pass = i;
        } else {
            break;
        }
    }
    let (k, worst_violation) = if first_pass == levels.len() {
        (None, levels.iter().map(|l| l.0).fold(0.0, f64::max))
    } else {
        let k = if first_pass == 0 { 0.0 } else { sampler.magnitudes[first_pass] };
        (Some(k), levels[first_pass..].iter().map(|l| l.0).fold(0.0, f64::max))
    };
    Ok(AsymptoticCertificate {
        epsilon,
        k,
        mode,
        samples_checked,
        samples_excluded,
        worst_violation,
        profile,
        seed: sampler.seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgebraBound {
    pub delta: f64,
    /// Smallest `C` with `|A(η₁) − A(η₂) − Ã(η₁ − η₂)| ≤ δ|η₁ − η₂| + C` on all pairs.
    pub c: f64,
    pub worst_pair: Option<(Vec<f64>, Vec<f64>)>,
    pub worst_point: Option<Point>,
    pub pairs_checked: usize,
    pub cap: f64,
}

fn sample_set(spec: &OperatorSpec, sampler: &Sampler, x: Point) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut etas = Vec::new();
    let mut res = Vec::new();
    for &m in &sampler.magnitudes {
        for dir in &sampler.directions {
            let eta: Vec<f64> = dir.iter().map(|v| m * v).collect();
            let a = spec.eval_vec(x, &eta);
            let t = spec.apply_target(x, &eta);
            res.push(a.iter().zip(&t).map(|(p, q)| p - q).collect());
            etas.push(eta);
        }
    }
    (etas, res)
}

fn algebra_scan(spec: &OperatorSpec, delta: f64, sampler: &Sampler) -> (f64, Option<(usize, usize, usize)>, usize) {
    let mut best = 0.0;
    let mut arg = None;
    let mut pairs = 0;
    for (pi, &x) in sampler.points.iter().enumerate() {
        // R(η) = A(η) − Ãη, so the pair residual is R(η₁) − R(η₂)
        let (etas, res) = sample_set(spec, sampler, x);
        let n = etas.len();
        pairs += n * (n - 1) / 2;
        let (c, a) = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut b = 0.0;
                let mut arg = None;
                for j in (i + 1)..n {
                    let r: f64 = res[i].iter().zip(&res[j]).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                    let dist: f64 = etas[i].iter().zip(&etas[j]).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                    let v = r - delta * dist;
                    if v > b {
                        b = v;
                        arg = Some((i, j));
                    }
                }
                (b, arg)
            })
            .reduce(
                || (0.0, None),
                |p, q| match (p.1, q.1) {
                    (_, None) => p,
                    (None, _) => q,
                    (Some(a), Some(b)) => {
                        if q.0 > p.0 || (q.0 == p.0 && b < a) {
                            q
                        } else {
                            p
                        }
                    }
                },
            );
        if c > best {
            best = c;
            arg = a.map(|(i, j)| (pi, i, j));
        }
    }
    (best, arg, pairs)
}

/// Measures `C(δ)` over all pairs of sampled gradients with `|η| ≤ cap`.
///
/// Fails when `C` grows by more than a factor 2 (plus `10⁻⁹`) between the
/// caps `cap/100` and `cap`.
pub fn check_algebra_bound(spec: &OperatorSpec, delta: f64, sampler: &Sampler, cap: f64) -> Result<AlgebraBound> {
    if !(delta > 0.0) {
        return invalid("delta must be positive");
    }
    let s = sampler.capped(cap);
    s.check(spec)?;
    let (c, arg, pairs_checked) = algebra_scan(spec, delta, &s);
    let inner = sampler.capped(cap / 100.0);
    if !inner.magnitudes.is_empty() {
        let (c_in, _, _) = algebra_scan(spec, delta, &inner);
        if c > 2.0 * c_in + 1e-9 {
            return Err(Error::OperatorCheck(format!(
                "C(δ={delta}) grows from {c_in:.4e} to {c:.4e} between caps {} and {cap}",
                cap / 100.0
            )));
        }
    }
    let (worst_pair, worst_point) = match arg {
        Some((pi, i, j)) => {
            let x = s.points[pi];
            let (etas, _) = sample_set(spec, &s, x);
            (Some((etas[i].clone(), etas[j].clone())), Some(x))
        }
        None => (None, None),
    };
    Ok(AlgebraBound {
        delta,
        c,
        worst_pair,
        worst_point,
        pairs_checked,
        cap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub coercivity_ok: bool,
    pub growth_ok: bool,
    pub monotone_ok: bool,
    /// `min (A(η₁) − A(η₂))·(η₁ − η₂) / |η₁ − η₂|²` over sampled pairs.
    pub monotonicity_margin: f64,
    pub strictly_monotone: bool,
    pub witness: Option<String>,
    pub pairs_checked: usize,
    pub seed: u64,
}

impl StructureReport {
    pub fn passed(&self) -> bool {
        self.coercivity_ok && self.growth_ok && self.monotone_ok
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::OperatorCheck(self.witness.unwrap_or_default()))
        }
    }
}

/// Checks coercivity, linear growth and monotonicity on sampled points and
/// `random_pairs` seeded random pairs (log-uniform magnitudes).
pub fn check_monotonicity_coercivity(spec: &OperatorSpec, sampler: &Sampler, random_pairs: usize) -> Result<StructureReport> {
    sampler.check(spec)?;
    let tol = 1e-10;
    let mut witness = None;
    let (mut coercivity_ok, mut growth_ok, mut monotone_ok) = (true, true, true);
    for &x in &sampler.points {
        for &m in &sampler.magnitudes {
            for dir in &sampler.directions {
                let eta: Vec<f64> = dir.iter().map(|v| m * v).collect();
                let a = spec.eval_vec(x, &eta);
                let pair = dot(&a, &eta);
                if coercivity_ok && spec.c1 * m * m - spec.c2 > pair + tol * (1.0 + m * m) {
                    coercivity_ok = false;
                    witness.get_or_insert(format!(
                        "coercivity fails at x={x:?}, η={eta:?}: A·η = {pair:.6e} < c1|η|² − c2 = {:.6e}",
                        spec.c1 * m * m - spec.c2
                    ));
                }
                if growth_ok && norm(&a) > spec.c2 * (1.0 + m) * (1.0 + tol) {
                    growth_ok = false;
                    witness.get_or_insert(format!(
                        "growth fails at x={x:?}, η={eta:?}: |A| = {:.6e} > c2(1+|η|)",
                        norm(&a)
                    ));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (lo, hi) = (
        sampler.magnitudes.iter().copied().fold(f64::INFINITY, f64::min).log10(),
        sampler.magnitudes.iter().copied().fold(0.0, f64::max).log10(),
    );
    let mut margin = f64::INFINITY;
    for k in 0..random_pairs {
        let x = sampler.points[k % sampler.points.len()];
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let dir = &sampler.directions[rng.gen_range(0..sampler.directions.len())];
            let m = 10f64.powf(rng.gen_range(lo..=hi));
            dir.iter().map(|v| m * v).collect()
        };
        let e1 = draw(&mut rng);
        // every other pair is a close pair, which probes the local slope
        let e2: Vec<f64> = if k % 2 == 0 {
            draw(&mut rng)
        } else {
            let r = 1e-3 * norm(&e1).max(1e-6);
            e1.iter().map(|v| v + r * rng.gen_range(-1.0..1.0)).collect()
        };
        let diff: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| a - b).collect();
        let dn = dot(&diff, &diff);
        if dn == 0.0 {
            continue;
        }
        let a1 = spec.eval_vec(x, &e1);
        let a2 = spec.eval_vec(x, &e2);
        let da: Vec<f64> = a1.iter().zip(&a2).map(|(p, q)| p - q).collect();
        let s = dot(&da, &diff);
        margin = margin.min(s / dn);
        let scale = norm(&da) * dn.sqrt();
        if monotone_ok && s < -tol * scale.max(1e-300) {
            monotone_ok = false;
            witness.get_or_insert(format!(
                "monotonicity fails at x={x:?}: η₁={e1:?}, η₂={e2:?}, (A₁−A₂)·(η₁−η₂) = {s:.6e}"
            ));
        }
    }
    Ok(StructureReport {
        coercivity_ok,
        growth_ok,
        monotone_ok,
        monotonicity_margin: margin,
        strictly_monotone: monotone_ok && margin > 1e-10,
        witness,
        pairs_checked: random_pairs,
        seed: sampler.seed,
    })
}
