//! Discrete Hardy–Littlewood maximal operators and Muckenhoupt weights.
//!
//! All windows are axis-parallel squares made of whole grid cells: the window
//! of radius `r` centred at vertex `(i, j)` covers cells `[i − r, i + r) ×
//! [j − r, j + r)` clipped to the grid. Averages divide by the clipped measure.
//! Window sums come from two-dimensional prefix sums over per-cell integrals,
//! so each window costs O(1).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mesh::{Layout, PiecewiseField, TriMesh};

/// A window of the family, in cell coordinates `[i0, i1) × [j0, j1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub center: usize,
    pub radius: usize,
    pub i0: usize,
    pub i1: usize,
    pub j0: usize,
    pub j1: usize,
}

impl Window {
    pub fn id(&self) -> String {
        format!("r{}@v{}", self.radius, self.center)
    }
}

/// Square windows centred at vertices over a geometric radius ladder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowFamily {
    nx: usize,
    ny: usize,
    /// Half-side lengths in cells, strictly increasing.
    pub radii: Vec<usize>,
    pub centers: Vec<usize>,
    /// When set, radius `r` is only used at centres whose grid coordinates
    /// are multiples of `r` (dyadic squares plus their half shifts).
    pub aligned: bool,
}

/// Radii `1, 2, 4, …` up to the domain diameter (in cells).
fn dyadic_ladder(mesh: &TriMesh) -> Vec<usize> {
    let diam = mesh.diameter_cells();
    let mut radii = vec![1usize];
    while ((2 * radii[radii.len() - 1]) as f64) <= diam {
        radii.push(2 * radii[radii.len() - 1]);
    }
    radii
}

impl WindowFamily {
    /// Every vertex with the full dyadic radius ladder.
    pub fn centered(mesh: &TriMesh) -> Self {
        let (nx, ny) = mesh.cells();
        Self {
            nx,
            ny,
            radii: dyadic_ladder(mesh),
            centers: (0..mesh.num_vertices()).collect(),
            aligned: false,
        }
    }

    /// Dyadic squares and their half-shifted copies, clipped to the domain.
    pub fn dyadic_shifted(mesh: &TriMesh) -> Self {
        Self {
            aligned: true,
            ..Self::centered(mesh)
        }
    }

    pub fn with_radii(mesh: &TriMesh, radii: Vec<usize>, centers: Vec<usize>) -> Result<Self> {
        let (nx, ny) = mesh.cells();
        if radii.is_empty() || centers.is_empty() {
            return invalid("window family is empty");
        }
        if radii[0] == 0 || radii.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("window radii must be positive and strictly increasing");
        }
        if let Some(&c) = centers.iter().find(|&&c| c >= mesh.num_vertices()) {
            return invalid(format!("window centre {c} is not a vertex"));
        }
        Ok(Self {
            nx,
            ny,
            radii,
            centers,
            aligned: false,
        })
    }

    pub fn descriptor(&self) -> String {
        format!(
            "{} squares on {}x{} cells, radii {:?}, {} centres",
            if self.aligned { "dyadic+shifted" } else { "centred" },
            self.nx,
            self.ny,
            self.radii,
            self.centers.len()
        )
    }

    fn check_mesh(&self, mesh: &TriMesh) -> Result<()> {
        if mesh.cells() != (self.nx, self.ny) {
            return invalid("window family was built for a different mesh");
        }
        if self.radii.is_empty() || self.centers.is_empty() {
            return invalid("window family is empty");
        }
        Ok(())
    }

    fn window(&self, center: usize, radius: usize) -> Window {
        let i = center % (self.nx + 1);
        let j = center / (self.nx + 1);
        Window {
            center,
            radius,
            i0: i.saturating_sub(radius),
            i1: (i + radius).min(self.nx),
            j0: j.saturating_sub(radius),
            j1: (j + radius).min(self.ny),
        }
    }

    fn admits(&self, center: usize, radius: usize) -> bool {
        if !self.aligned {
            return true;
        }
        let i = center % (self.nx + 1);
        let j = center / (self.nx + 1);
        i % radius == 0 && j % radius == 0
    }

    /// Windows of the family centred at `center`.
    pub fn windows_at(&self, center: usize) -> impl Iterator<Item = Window> + '_ {
        self.radii
            .iter()
            .filter(move |&&r| self.admits(center, r))
            .map(move |&r| self.window(center, r))
    }

    pub fn windows(&self) -> impl Iterator<Item = Window> + '_ {
        self.centers.iter().flat_map(move |&c| self.windows_at(c))
    }
}

/// Prefix sums of per-cell integrals and areas.
struct CellSums {
    nx: usize,
    integral: Vec<f64>,
    area: Vec<f64>,
}

impl CellSums {
    fn new(mesh: &TriMesh, tri_values: &[f64]) -> Self {
        let (nx, ny) = mesh.cells();
        let stride = nx + 1;
        let mut integral = vec![0.0; stride * (ny + 1)];
        let mut area = vec![0.0; stride * (ny + 1)];
        for j in 0..ny {
            let mut row_i = 0.0;
            let mut row_a = 0.0;
            for i in 0..nx {
                for t in mesh.cell_triangles(i, j) {
                    row_i += tri_values[t] * mesh.area(t);
                    row_a += mesh.area(t);
                }
                let k = (j + 1) * stride + i + 1;
                integral[k] = integral[j * stride + i + 1] + row_i;
                area[k] = area[j * stride + i + 1] + row_a;
            }
        }
        Self { nx, integral, area }
    }

    fn rect(table: &[f64], stride: usize, w: &Window) -> f64 {
        table[w.j1 * stride + w.i1] - table[w.j0 * stride + w.i1] - table[w.j1 * stride + w.i0]
            + table[w.j0 * stride + w.i0]
    }

    fn average(&self, w: &Window) -> f64 {
        let stride = self.nx + 1;
        Self::rect(&self.integral, stride, w) / Self::rect(&self.area, stride, w)
    }
}

fn triangle_abs(g: &PiecewiseField) -> Vec<f64> {
    g.triangle_magnitudes()
}

/// `Mg(v) = max_r  ⨍_{Q_r(v)} |g|` at every centre of `family`.
///
/// Vertex fields are averaged to triangles first; multi-component blocks
/// enter through their Frobenius norm. Vertices that are not centres of the
/// family get the value 0.
pub fn maximal_function(g: &PiecewiseField, family: &WindowFamily) -> Result<PiecewiseField> {
    let mesh = g.mesh().clone();
    family.check_mesh(&mesh)?;
    let sums = CellSums::new(&mesh, &triangle_abs(g));
    Ok(maximal_from_sums(&mesh, &sums, family, |a| a))
}

fn maximal_from_sums(
    mesh: &std::sync::Arc<TriMesh>,
    sums: &CellSums,
    family: &WindowFamily,
    post: impl Fn(f64) -> f64 + Sync,
) -> PiecewiseField {
    let maxima: Vec<(usize, f64)> = family
        .centers
        .par_iter()
        .map(|&c| {
            let best = family.windows_at(c).map(|w| sums.average(&w)).fold(0.0, f64::max);
            (c, post(best))
        })
        .collect();
    let mut values = vec![0.0; mesh.num_vertices()];
    for (c, v) in maxima {
        values[c] = v;
    }
    PiecewiseField::new(mesh.clone(), Layout::VertexScalar, 1, values).expect("finite maximal function")
}

/// `M_q^{<ρ} g = sup_{r·h ≤ ρ} (⨍_{Q_r} |g|^q)^{1/q}` at every vertex.
pub fn restricted_maximal(g: &PiecewiseField, q: f64, rho: f64) -> Result<PiecewiseField> {
    let mesh = g.mesh().clone();
    if !(q >= 1.0) {
        return invalid(format!("restricted maximal exponent must be ≥ 1, got {q}"));
    }
    if rho < mesh.h() {
        return invalid(format!("radius {rho} is below the grid spacing {}", mesh.h()));
    }
    let full = WindowFamily::centered(&mesh);
    let max_cells = (rho / mesh.h() + 1e-9).floor() as usize;
    let radii: Vec<usize> = full.radii.iter().copied().filter(|&r| r <= max_cells).collect();
    let family = WindowFamily { radii, ..full };
    let powered: Vec<f64> = triangle_abs(g).iter().map(|v| v.powf(q)).collect();
    let sums = CellSums::new(&mesh, &powered);
    Ok(maximal_from_sums(&mesh, &sums, &family, |a| a.powf(1.0 / q)))
}

/// `q = sp / (p + s − 1)`, the Lebesgue exponent reached from `L^p_ω` when
/// the dual weight satisfies a reverse Hölder inequality with exponent `s`.
pub fn embedding_exponent(s: f64, p: f64) -> f64 {
    s * p / (p + s - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApConfig {
    /// Candidate reverse Hölder exponents, searched from the largest down.
    pub rh_ladder: Vec<f64>,
    /// Largest admissible reverse Hölder constant.
    pub rh_threshold: f64,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            rh_ladder: vec![1.1, 1.25, 1.5, 2.0],
            rh_threshold: 10.0,
        }
    }
}

/// Measured Muckenhoupt data of a weight on a window family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub p: f64,
    pub ap_constant: f64,
    pub worst_window: String,
    /// Largest ladder exponent with `(⨍ ω^s)^{1/s} ≤ C ⨍ ω` on every window.
    pub reverse_holder_s: Option<f64>,
    /// The same search for the dual weight `ω^{−(p′−1)}` (p > 1 only).
    pub dual_reverse_holder_s: Option<f64>,
    /// `s p / (p + s − 1)` with the dual exponent; lies in `(1, p)`.
    pub embedding_q: Option<f64>,
    pub family_descriptor: String,
}

fn check_weight(weight: &PiecewiseField) -> Result<Vec<f64>> {
    let values = match weight.layout() {
        Layout::TriangleScalar => weight.values().to_vec(),
        Layout::VertexScalar => weight.to_triangle_mean()?.into_values(),
        other => {
            return Err(Error::Layout {
                expected: "a scalar layout".into(),
                found: other.name().into(),
            })
        }
    };
    if weight.n_comp() != 1 {
        return Err(Error::FieldShape("weights are single-component".into()));
    }
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, w)| !(**w > 0.0)) {
        return Err(Error::NonpositiveWeight { index, value });
    }
    Ok(values)
}

/// Supremum over `family` of the Muckenhoupt product, plus reverse Hölder
/// and embedding exponents.
///
/// For `p > 1` the product is `(⨍ω)(⨍ω^{−1/(p−1)})^{p−1}`; for `p = 1` it is
/// `⨍_Q ω / min_Q ω`, the window form of `Mω ≤ Aω`.
pub fn ap_constant(weight: &PiecewiseField, p: f64, family: &WindowFamily, config: &ApConfig) -> Result<ApReport> {
    let mesh = weight.mesh().clone();
    family.check_mesh(&mesh)?;
    if !(p >= 1.0) || !p.is_finite() {
        return invalid(format!("A_p needs a finite p ≥ 1, got {p}"));
    }
    let w = check_weight(weight)?;
    let windows: Vec<Window> = family.windows().collect();
    let (ap, worst) = if p > 1.0 {
        ap_product_sup(&mesh, &w, p, &windows)
    } else {
        a1_sup(&mesh, &w, &windows)
    };
    let rh = |values: &[f64]| reverse_holder(&mesh, values, &windows, config);
    let reverse_holder_s = rh(&w);
    let (dual_reverse_holder_s, embedding_q) = if p > 1.0 {
        let dual: Vec<f64> = w.iter().map(|v| v.powf(-1.0 / (p - 1.0))).collect();
        let s = rh(&dual);
        (s, s.map(|s| embedding_exponent(s, p)))
    } else {
        (None, None)
    };
    Ok(ApReport {
        p,
        ap_constant: ap,
        worst_window: worst.map(|w| w.id()).unwrap_or_default(),
        reverse_holder_s,
        dual_reverse_holder_s,
        embedding_q,
        family_descriptor: family.descriptor(),
    })
}

fn ap_product_sup(mesh: &TriMesh, w: &[f64], p: f64, windows: &[Window]) -> (f64, Option<Window>) {
    let t = 1.0 / (p - 1.0);
    let dual: Vec<f64> = w.iter().map(|v| v.powf(-t)).collect();
    let sw = CellSums::new(mesh, w);
    let sd = CellSums::new(mesh, &dual);
    windows
        .par_iter()
        .map(|win| {
            let val = if p == 2.0 {
                sw.average(win) * sd.average(win)
            } else {
                sw.average(win) * sd.average(win).powf(p - 1.0)
            };
            (val, Some(*win))
        })
        .reduce(|| (0.0, None), pick_max)
}

/// Ties resolve to the window that appears first in family order.
fn pick_max(a: (f64, Option<Window>), b: (f64, Option<Window>)) -> (f64, Option<Window>) {
    match (a.1, b.1) {
        (None, _) => b,
        (_, None) => a,
        (Some(wa), Some(wb)) => {
            if b.0 > a.0 || (b.0 == a.0 && (wb.center, wb.radius) < (wa.center, wa.radius)) {
                b
            } else {
                a
            }
        }
    }
}

fn cell_min(mesh: &TriMesh, w: &[f64]) -> Vec<f64> {
    let (nx, ny) = mesh.cells();
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let [a, b] = mesh.cell_triangles(i, j);
            out.push(w[a].min(w[b]));
        }
    }
    out
}

fn a1_sup(mesh: &TriMesh, w: &[f64], windows: &[Window]) -> (f64, Option<Window>) {
    let sw = CellSums::new(mesh, w);
    let mins = cell_min(mesh, w);
    let (nx, _) = mesh.cells();
    windows
        .par_iter()
        .map(|win| {
            let mut lo = f64::INFINITY;
            for j in win.j0..win.j1 {
                for &v in &mins[j * nx + win.i0..j * nx + win.i1] {
                    lo = lo.min(v);
                }
            }
            (sw.average(win) / lo, Some(*win))
        })
        .reduce(|| (0.0, None), pick_max)
}

fn reverse_holder(mesh: &TriMesh, w: &[f64], windows: &[Window], config: &ApConfig) -> Option<f64> {
    let sw = CellSums::new(mesh, w);
    let mut ladder = config.rh_ladder.clone();
    ladder.sort_by(|a, b| b.partial_cmp(a).expect("finite ladder"));
    for s in ladder {
        if !(s > 1.0) {
            continue;
        }
        let powered: Vec<f64> = w.iter().map(|v| v.powf(s)).collect();
        let ss = CellSums::new(mesh, &powered);
        let worst = windows
            .par_iter()
            .map(|win| ss.average(win).powf(1.0 / s) / sw.average(win))
            .reduce(|| 0.0, f64::max);
        if worst <= config.rh_threshold {
            return Some(s);
        }
    }
    None
}

/// `(1 + M|f|)^{exponent}` as a triangle weight (vertex maxima averaged to
/// triangles before the power is taken).
pub fn weight_from_maximal(f: &PiecewiseField, exponent: f64) -> Result<PiecewiseField> {
    if !(exponent > -1.0 && exponent < 1.0) {
        log::warn!("weight exponent {exponent} is outside (-1, 1); the result need not be an A_2 weight");
    }
    let mesh = f.mesh().clone();
    let mf = maximal_function(f, &WindowFamily::centered(&mesh))?;
    let tri = mf.to_triangle_mean()?;
    tri.map(|m| (1.0 + m).powf(exponent))
}

/// Pointwise minimum of two positive weights.
pub fn weight_min(w1: &PiecewiseField, w2: &PiecewiseField) -> Result<PiecewiseField> {
    let a = check_weight(w1)?;
    let b = check_weight(w2)?;
    w1.require_same_mesh(w2)?;
    PiecewiseField::new(
        w1.mesh().clone(),
        Layout::TriangleScalar,
        1,
        a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_unit_square_mesh;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn square(m: usize) -> Arc<TriMesh> {
        Arc::new(build_unit_square_mesh(m).unwrap())
    }

    fn power_weight(mesh: Arc<TriMesh>, alpha: f64) -> PiecewiseField {
        PiecewiseField::triangle_scalar(mesh, move |x| {
            ((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2)).sqrt().powf(alpha)
        })
        .unwrap()
    }

    #[test]
    fn maximal_of_constant() {
        let mesh = square(16);
        let g = PiecewiseField::triangle_scalar(mesh.clone(), |_| -2.5).unwrap();
        let mg = maximal_function(&g, &WindowFamily::centered(&mesh)).unwrap();
        assert!(mg.values().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn ladder_reaches_the_diameter() {
        let mesh = square(64);
        let fam = WindowFamily::centered(&mesh);
        assert_eq!(fam.radii, vec![1, 2, 4, 8, 16, 32, 64]);
        assert!(fam.radii.windows(2).all(|w| w[0] < w[1]));
    }

    /// Brute force over every integer radius, with window sums taken triangle
    /// by triangle.
    fn brute_force_max(mesh: &TriMesh, g: &[f64], v: usize) -> f64 {
        let (nx, ny) = mesh.cells();
        let (i, j) = mesh.vertex_ij(v);
        let mut best: f64 = 0.0;
        for r in 1..=nx.max(ny) {
            let (i0, i1) = (i.saturating_sub(r), (i + r).min(nx));
            let (j0, j1) = (j.saturating_sub(r), (j + r).min(ny));
            let (mut s, mut a) = (0.0, 0.0);
            for jj in j0..j1 {
                for ii in i0..i1 {
                    for t in mesh.cell_triangles(ii, jj) {
                        s += g[t].abs() * mesh.area(t);
                        a += mesh.area(t);
                    }
                }
            }
            best = best.max(s / a);
        }
        best
    }

    #[test]
    fn single_cell_indicator_decays_like_inverse_square() {
        let m = 64;
        let mesh = square(m);
        // cell (ci, cj) lit; probe vertex (ci - 7, cj) so radius 8 just covers it
        let (ci, cj) = (40usize, 32usize);
        let lit = mesh.cell_triangles(ci, cj);
        let g = PiecewiseField::triangle_scalar(mesh.clone(), |_| 0.0).unwrap();
        let mut vals = g.into_values();
        vals[lit[0]] = 1.0;
        vals[lit[1]] = 1.0;
        let g = PiecewiseField::new(mesh.clone(), Layout::TriangleScalar, 1, vals.clone()).unwrap();
        let mg = maximal_function(&g, &WindowFamily::centered(&mesh)).unwrap();
        let v = mesh.vertex_index(ci - 7, cj);
        let d = 8.0 * mesh.h();
        let h2 = mesh.h() * mesh.h();
        let brute = brute_force_max(&mesh, &vals, v);
        assert!((mg.values()[v] - brute).abs() / brute < 0.1);
        assert!((mg.values()[v] - h2 / (2.0 * d).powi(2)).abs() / brute < 0.1);
        // the ladder never loses more than a factor 4 anywhere
        for probe in [mesh.vertex_index(3, 5), mesh.vertex_index(60, 60), mesh.vertex_index(33, 20)] {
            let b = brute_force_max(&mesh, &vals, probe);
            assert!(mg.values()[probe] <= b + 1e-15 && 4.0 * mg.values()[probe] >= b - 1e-15);
        }
    }

    #[test]
    fn maximal_dominates_local_values_and_scales() {
        let mesh = square(16);
        let g = PiecewiseField::triangle_scalar(mesh.clone(), |x| (7.0 * x[0]).sin() * x[1] - 0.3).unwrap();
        let fam = WindowFamily::centered(&mesh);
        let mg = maximal_function(&g, &fam).unwrap();
        let (nx, ny) = mesh.cells();
        for v in 0..mesh.num_vertices() {
            let (i, j) = mesh.vertex_ij(v);
            // one-cell sampling tolerance: compare with the smallest |g| among adjacent cells
            let mut lo = f64::INFINITY;
            for jj in j.saturating_sub(1)..(j + 1).min(ny) {
                for ii in i.saturating_sub(1)..(i + 1).min(nx) {
                    for t in mesh.cell_triangles(ii, jj) {
                        lo = lo.min(g.values()[t].abs());
                    }
                }
            }
            assert!(mg.values()[v] >= lo - 1e-14);
        }
        let scaled = maximal_function(&g.scaled(-4.0), &fam).unwrap();
        for (a, b) in scaled.values().iter().zip(mg.values()) {
            assert_eq!(*a, 4.0 * b);
        }
    }

    #[test]
    fn restricted_maximal_properties() {
        let mesh = square(16);
        let g = PiecewiseField::triangle_scalar(mesh.clone(), |x| x[0] * x[0] - x[1]).unwrap();
        let full = maximal_function(&g, &WindowFamily::centered(&mesh)).unwrap();
        let r = restricted_maximal(&g, 1.0, 2f64.sqrt()).unwrap();
        for (a, b) in r.values().iter().zip(full.values()) {
            assert!((a - b).abs() <= 1e-14 * b.max(1.0));
        }
        let small = restricted_maximal(&g, 2.0, 0.125).unwrap();
        let large = restricted_maximal(&g, 2.0, 0.5).unwrap();
        assert!(small.values().iter().zip(large.values()).all(|(a, b)| a <= b));
        let c = PiecewiseField::triangle_scalar(mesh.clone(), |_| 3.0).unwrap();
        let rc = restricted_maximal(&c, 1.5, 0.25).unwrap();
        assert!(rc.values().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(restricted_maximal(&g, 1.0, 0.01).is_err());
        assert!(restricted_maximal(&g, 0.5, 0.5).is_err());
    }

    #[test]
    fn unit_weight_has_unit_constant() {
        let mesh = square(16);
        let one = PiecewiseField::triangle_scalar(mesh.clone(), |_| 1.0).unwrap();
        for fam in [WindowFamily::centered(&mesh), WindowFamily::dyadic_shifted(&mesh)] {
            for p in [1.0, 1.5, 2.0, 3.0] {
                let rep = ap_constant(&one, p, &fam, &ApConfig::default()).unwrap();
                assert!((rep.ap_constant - 1.0).abs() < 1e-12, "p={p}: {}", rep.ap_constant);
                assert_eq!(rep.reverse_holder_s, Some(2.0));
            }
        }
    }

    #[test]
    fn two_level_weight_matches_brute_force() {
        let mesh = square(8);
        let w = PiecewiseField::triangle_scalar(mesh.clone(), |x| if x[0] < 0.5 { 1.0 } else { 4.0 }).unwrap();
        let fam = WindowFamily::dyadic_shifted(&mesh);
        let rep = ap_constant(&w, 2.0, &fam, &ApConfig::default()).unwrap();
        // brute force: loop triangle by triangle over every window of the family
        let mut best: f64 = 0.0;
        let mut full_square = None;
        for win in fam.windows() {
            let (mut sw, mut sinv, mut a) = (0.0, 0.0, 0.0);
            for j in win.j0..win.j1 {
                for i in win.i0..win.i1 {
                    for t in mesh.cell_triangles(i, j) {
                        sw += w.values()[t] * mesh.area(t);
                        sinv += mesh.area(t) / w.values()[t];
                        a += mesh.area(t);
                    }
                }
            }
            let val = (sw / a) * (sinv / a);
            if (win.i0, win.i1, win.j0, win.j1) == (0, 8, 0, 8) {
                full_square = Some(val);
            }
            best = best.max(val);
        }
        assert!((full_square.unwrap() - 1.5625).abs() < 1e-12);
        assert!((rep.ap_constant - best).abs() < 1e-12);
        assert!(rep.ap_constant >= 1.5625);
    }

    #[test]
    fn embedding_formula() {
        assert_eq!(embedding_exponent(3.0, 2.0), 1.5);
        let mesh = square(16);
        let w = power_weight(mesh.clone(), 0.5);
        let rep = ap_constant(&w, 2.0, &WindowFamily::dyadic_shifted(&mesh), &ApConfig::default()).unwrap();
        let q = rep.embedding_q.unwrap();
        assert!(q > 1.0 && q < 2.0);
        assert!(rep.reverse_holder_s.unwrap() > 1.0);
        assert!(rep.ap_constant >= 1.0);
    }

    #[test]
    fn scaling_invariance_is_exact_for_powers_of_two() {
        let mesh = square(16);
        let w = power_weight(mesh.clone(), 0.5);
        let fam = WindowFamily::dyadic_shifted(&mesh);
        let cfg = ApConfig::default();
        let a = ap_constant(&w, 2.0, &fam, &cfg).unwrap();
        let b = ap_constant(&w.scaled(4.0), 2.0, &fam, &cfg).unwrap();
        assert_eq!(a.ap_constant, b.ap_constant);
        let a3 = ap_constant(&w, 3.0, &fam, &cfg).unwrap();
        let b3 = ap_constant(&w.scaled(7.3), 3.0, &fam, &cfg).unwrap();
        assert!((a3.ap_constant - b3.ap_constant).abs() < 1e-12 * a3.ap_constant);
    }

    #[test]
    fn duality_identity() {
        // per window, A_{p'}(ω^{-(p'-1)}) = A_p(ω)^{p'-1}; hence for the suprema too
        let mesh = square(16);
        let w = power_weight(mesh.clone(), -0.7);
        let fam = WindowFamily::dyadic_shifted(&mesh);
        let cfg = ApConfig::default();
        for p in [1.5, 2.0, 3.0] {
            let pp = p / (p - 1.0);
            let dual = w.map(|v| v.powf(-(pp - 1.0))).unwrap();
            let a = ap_constant(&w, p, &fam, &cfg).unwrap().ap_constant;
            let b = ap_constant(&dual, pp, &fam, &cfg).unwrap().ap_constant;
            assert!((b - a.powf(pp - 1.0)).abs() < 1e-9 * b, "p={p}: {a} {b}");
        }
    }

    #[test]
    fn a1_of_power_weight() {
        let mesh = square(32);
        let fam = WindowFamily::dyadic_shifted(&mesh);
        let cfg = ApConfig::default();
        let w = power_weight(mesh.clone(), -0.5);
        let a1 = ap_constant(&w, 1.0, &fam, &cfg).unwrap().ap_constant;
        let a2 = ap_constant(&w, 2.0, &fam, &cfg).unwrap().ap_constant;
        assert!(a1.is_finite() && a1 >= a2);
        assert!(ap_constant(&w, 0.5, &fam, &cfg).is_err());
    }

    #[test]
    fn spike_weight_stable_under_refinement() {
        let mut consts = Vec::new();
        for m in [32usize, 64, 128] {
            let mesh = square(m);
            let h = mesh.h();
            let f = PiecewiseField::triangle_scalar(mesh.clone(), move |x| {
                if (x[0] - 0.5).abs() < h && (x[1] - 0.5).abs() < h {
                    100.0
                } else {
                    0.0
                }
            })
            .unwrap();
            let w = weight_from_maximal(&f, -0.5).unwrap();
            let rep = ap_constant(&w, 2.0, &WindowFamily::dyadic_shifted(&mesh), &ApConfig::default()).unwrap();
            assert!(rep.ap_constant.is_finite());
            consts.push(rep.ap_constant);
        }
        let (lo, hi) = consts.iter().fold((f64::MAX, 0.0f64), |(l, h), &c| (l.min(c), h.max(c)));
        assert!(hi / lo <= 2.0, "{consts:?}");
    }

    #[test]
    fn weight_from_maximal_trivial_cases() {
        let mesh = square(16);
        let zero = PiecewiseField::triangle_scalar(mesh.clone(), |_| 0.0).unwrap();
        let w = weight_from_maximal(&zero, -0.5).unwrap();
        assert!(w.values().iter().all(|&v| v == 1.0));
        let f = PiecewiseField::triangle_scalar(mesh.clone(), |x| 50.0 * x[0]).unwrap();
        let w0 = weight_from_maximal(&f, 0.0).unwrap();
        assert!(w0.values().iter().all(|&v| v == 1.0));
        let rep = ap_constant(&w, 2.0, &WindowFamily::centered(&mesh), &ApConfig::default()).unwrap();
        assert_eq!(rep.ap_constant, 1.0);
    }

    #[test]
    fn weight_min_cases() {
        let mesh = square(16);
        let fam = WindowFamily::dyadic_shifted(&mesh);
        let cfg = ApConfig::default();
        let one = PiecewiseField::triangle_scalar(mesh.clone(), |_| 1.0).unwrap();
        let two = PiecewiseField::triangle_scalar(mesh.clone(), |_| 2.0).unwrap();
        let m = weight_min(&one, &two).unwrap();
        assert_eq!(m.values(), one.values());
        assert_eq!(ap_constant(&m, 2.0, &fam, &cfg).unwrap().ap_constant, 1.0);
        let w = power_weight(mesh.clone(), 0.5);
        assert_eq!(weight_min(&w, &w).unwrap().values(), w.values());
        let mw = weight_min(&w, &one).unwrap();
        let lhs = ap_constant(&mw, 2.0, &fam, &cfg).unwrap().ap_constant;
        let rhs = ap_constant(&w, 2.0, &fam, &cfg).unwrap().ap_constant + 1.0;
        assert!(lhs <= rhs);
        let neg = PiecewiseField::triangle_scalar(mesh, |x| x[0] - 0.5).unwrap();
        assert!(weight_min(&neg, &one).is_err());
    }

    fn random_weight(mesh: Arc<TriMesh>, seeds: &[f64]) -> PiecewiseField {
        let n = seeds.len();
        PiecewiseField::triangle_scalar(mesh, move |x| {
            let k = ((x[0] * 7.0 + x[1] * 13.0) * 97.0) as usize % n;
            seeds[k].exp()
        })
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ap_decreases_in_p(seeds in proptest::collection::vec(-3.0f64..3.0, 5..12), p1 in 1.0f64..3.0, dp in 0.0f64..3.0) {
            let mesh = square(8);
            let w = random_weight(mesh.clone(), &seeds);
            let fam = WindowFamily::dyadic_shifted(&mesh);
            let cfg = ApConfig { rh_ladder: vec![], rh_threshold: 10.0 };
            let a1 = ap_constant(&w, p1, &fam, &cfg).unwrap().ap_constant;
            let a2 = ap_constant(&w, p1 + dp, &fam, &cfg).unwrap().ap_constant;
            prop_assert!(a2 <= a1 * (1.0 + 1e-12));
            prop_assert!(a2 >= 1.0 - 1e-12);
        }

        #[test]
        fn a2_of_minimum_is_subadditive(s1 in proptest::collection::vec(-3.0f64..3.0, 3..9), s2 in proptest::collection::vec(-3.0f64..3.0, 3..9)) {
            let mesh = square(8);
            let w1 = random_weight(mesh.clone(), &s1);
            let w2 = random_weight(mesh.clone(), &s2).map(|v| v * 1.7 + 0.1).unwrap();
            let fam = WindowFamily::centered(&mesh);
            let cfg = ApConfig { rh_ladder: vec![], rh_threshold: 10.0 };
            let m = weight_min(&w1, &w2).unwrap();
            let lhs = ap_constant(&m, 2.0, &fam, &cfg).unwrap().ap_constant;
            let rhs = ap_constant(&w1, 2.0, &fam, &cfg).unwrap().ap_constant
                + ap_constant(&w2, 2.0, &fam, &cfg).unwrap().ap_constant;
            prop_assert!(lhs <= rhs * (1.0 + 1e-12));
        }

        #[test]
        fn maximal_is_monotone(seeds in proptest::collection::vec(0.0f64..5.0, 4..10), extra in 0.0f64..2.0) {
            let mesh = square(8);
            let g1 = random_weight(mesh.clone(), &seeds).map(|v| v - 1.0).unwrap();
            let g2 = g1.map(|v| v.abs() + extra).unwrap();
            let fam = WindowFamily::centered(&mesh);
            let m1 = maximal_function(&g1, &fam).unwrap();
            let m2 = maximal_function(&g2, &fam).unwrap();
            for (a, b) in m1.values().iter().zip(m2.values()) {
                prop_assert!(a <= b);
            }
        }
    }
}
