use super::*;
use crate::mesh::build_unit_square_mesh;
use crate::operators::{build_operator, registry, OperatorKind};
use std::f64::consts::PI;

fn square(m: usize) -> Arc<TriMesh> {
    Arc::new(build_unit_square_mesh(m).unwrap())
}

fn ustar_grad(x: Point) -> [f64; 2] {
    [
        PI * (PI * x[0]).cos() * (PI * x[1]).sin(),
        PI * (PI * x[0]).sin() * (PI * x[1]).cos(),
    ]
}

fn linear(name: &str) -> OperatorSpec {
    build_operator(&OperatorKind::Linear { tensor: name.into() }, 1).unwrap()
}

/// `f = A(x, ∇u*)` at centroids.
fn manufactured_flux(spec: &OperatorSpec, mesh: &Arc<TriMesh>, amp: f64) -> PiecewiseField {
    PiecewiseField::triangle_vector(mesh.clone(), |x| {
        let g = ustar_grad(x);
        let a = spec.eval_vec(x, &[amp * g[0], amp * g[1]]);
        [a[0], a[1]]
    })
    .unwrap()
}

fn h1_error(u: &PiecewiseField, amp: f64) -> f64 {
    h1_seminorm_error(u, |x, out| {
        let g = ustar_grad(x);
        out[0] = amp * g[0];
        out[1] = amp * g[1];
    })
    .unwrap()
}

#[test]
fn zero_rhs_gives_zero() {
    let mesh = square(8);
    let tensor = linear("identity").target_field(&mesh);
    let f = PiecewiseField::zeros(mesh.clone(), Layout::TriangleVector, 1);
    let (u, rep) = solve_linear(&tensor, &Rhs::Flux(f), &SolverConfig::default()).unwrap();
    assert!(u.values().iter().all(|&v| v == 0.0));
    assert_eq!(rep.relative_residual, 0.0);
}

#[test]
fn manufactured_linear_rates() {
    for name in ["identity", "diag12", "smooth"] {
        let spec = linear(name);
        let mut errs = Vec::new();
        for m in [16usize, 32, 64] {
            let mesh = square(m);
            let f = manufactured_flux(&spec, &mesh, 1.0);
            let (u, rep) = solve_linear(&spec.target_field(&mesh), &Rhs::Flux(f), &SolverConfig::default()).unwrap();
            assert!(rep.relative_residual <= 1e-9);
            assert!(mesh.boundary_flags().iter().zip(u.values()).all(|(&b, &v)| !b || v == 0.0));
            errs.push(h1_error(&u, 1.0));
        }
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() >= 0.9, "{name}: {errs:?}");
        }
    }
}

#[test]
fn galerkin_orthogonality_and_ellipticity() {
    let mesh = square(16);
    let spec = linear("smooth");
    let tensor = spec.target_field(&mesh);
    let f = manufactured_flux(&spec, &mesh, 1.0);
    let sys = assemble_system(&tensor, &Rhs::Flux(f.clone())).unwrap();
    assert!(sys.symmetric && sys.stiffness.is_symmetric(1e-13));
    let (u, _) = solve_linear(&tensor, &Rhs::Flux(f), &SolverConfig::default()).unwrap();
    let x = sys.dofs.from_field(&u);
    let kx = sys.stiffness.mul(&x);
    let res: f64 = kx.iter().zip(&sys.load).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let bn: f64 = sys.load.iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!(res <= 1e-10 * bn * 10.0);
    // Rayleigh quotients of probe vectors stay positive
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let p: Vec<f64> = (0..sys.dofs.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = sparse::dot(&p, &sys.stiffness.mul(&p)) / sparse::dot(&p, &p);
        assert!(q > 0.0);
    }
}

#[test]
fn non_elliptic_tensor_rejected() {
    let mesh = square(4);
    let t = PiecewiseField::scaled_identity(mesh.clone(), 1, -1.0);
    let f = PiecewiseField::zeros(mesh, Layout::TriangleVector, 1);
    assert!(solve_linear(&t, &Rhs::Flux(f), &SolverConfig::default()).is_err());
}

#[test]
fn nonsymmetric_tensor_uses_bicgstab() {
    let mesh = square(16);
    let t = PiecewiseField::constant(mesh.clone(), Layout::TriangleTensor, 1, &[1.0, 0.4, -0.4, 1.0]).unwrap();
    let f = PiecewiseField::triangle_vector(mesh.clone(), |x| [x[1], -x[0] * x[0]]).unwrap();
    let (u, rep) = solve_linear(&t, &Rhs::Flux(f.clone()), &SolverConfig::default()).unwrap();
    assert_eq!(rep.krylov_method, "bicgstab");
    let sys = assemble_system(&t, &Rhs::Flux(f)).unwrap();
    let x = sys.dofs.from_field(&u);
    let kx = sys.stiffness.mul(&x);
    let res: f64 = kx.iter().zip(&sys.load).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let bn: f64 = sys.load.iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!(res <= 1e-9 * bn);
}

#[test]
fn dirac_weights() {
    let mesh = square(8);
    let at_vertex = dirac_load([0.25, 0.5], &mesh).unwrap();
    let v = mesh.vertex_index(2, 4);
    let w: f64 = at_vertex.weights.iter().filter(|(u, _)| *u == v).map(|(_, w)| w).sum();
    assert!((w - 1.0).abs() < 1e-12);
    let c = mesh.centroid(17);
    let at_centroid = dirac_load(c, &mesh).unwrap();
    assert_eq!(at_centroid.triangle, 17);
    for (_, w) in at_centroid.weights {
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
    }
    assert!(matches!(dirac_load([1.5, 0.5], &mesh), Err(Error::OutsideDomain { .. })));
}

#[test]
fn truncate_rhs_cases() {
    let mesh = square(8);
    let f = PiecewiseField::triangle_vector(mesh.clone(), |x| if x[0] < 0.125 && x[1] < 0.125 { [10.0, 0.0] } else { [x[0], 1.0] }).unwrap();
    assert_eq!(truncate_rhs(&f, 100.0).unwrap().values(), f.values());
    let t = truncate_rhs(&f, 5.0).unwrap();
    let norms = f.pointwise_norms();
    for tri in 0..mesh.num_triangles() {
        if norms[tri] >= 5.0 {
            assert!(t.block(tri).iter().all(|&v| v == 0.0));
        } else {
            assert_eq!(t.block(tri), f.block(tri));
        }
    }
    assert!(truncate_rhs(&f, 0.0).is_err());
    let mut prev = 0.0;
    for k in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
        let n: f64 = truncate_rhs(&f, k).unwrap().pointwise_norms().iter().sum();
        assert!(n >= prev);
        prev = n;
    }
}

#[test]
fn linear_spec_one_iteration() {
    let mesh = square(16);
    for name in ["identity", "diag12", "smooth"] {
        let spec = linear(name);
        let f = manufactured_flux(&spec, &mesh, 1.0);
        let cfg = SolverConfig::default();
        let (u, rep) = solve_nonlinear(&spec, &Rhs::Flux(f.clone()), &mesh, &cfg, &InitialGuess::Zero).unwrap();
        assert_eq!(rep.iterations, 1);
        assert_eq!(rep.theta, 1.0);
        let (ul, _) = solve_linear(&spec.target_field(&mesh), &Rhs::Flux(f), &cfg).unwrap();
        let diff = u.values().iter().zip(ul.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-9, "{name}: {diff}");
    }
}

#[test]
fn prototype_recovery_and_independent_residual() {
    let mesh = square(32);
    let spec = build_operator(&OperatorKind::Prototype { profile: "two_minus_inverse".into() }, 1).unwrap();
    let f = manufactured_flux(&spec, &mesh, 1.0);
    let cfg = SolverConfig::default();
    let rhs = Rhs::Flux(f);
    let (u, rep) = solve_nonlinear(&spec, &rhs, &mesh, &cfg, &InitialGuess::Zero).unwrap();
    assert!(rep.converged && rep.relative_residual <= cfg.tol);
    let again = independent_residual(&spec, &rhs, &u, &cfg).unwrap();
    assert!(again <= 2.0 * cfg.tol, "{again}");
    assert!(h1_error(&u, 1.0) < 0.2);
}

#[test]
fn iteration_limit_is_reported() {
    let mesh = square(16);
    let spec = build_operator(&OperatorKind::Prototype { profile: "two_minus_inverse".into() }, 1).unwrap();
    let f = manufactured_flux(&spec, &mesh, 1.0);
    let cfg = SolverConfig {
        max_iters: 2,
        ..SolverConfig::default()
    };
    match solve_nonlinear(&spec, &Rhs::Flux(f), &mesh, &cfg, &InitialGuess::Zero) {
        Err(Error::NonlinearSolver { report, iterations, .. }) => {
            assert_eq!(iterations, 2);
            assert_eq!(report.fixed_point_history.len(), 2);
        }
        other => panic!("expected failure, got {other:?}"),
    }
}

#[test]
fn route_reaches_full_rhs() {
    let mesh = square(16);
    let spec = build_operator(&OperatorKind::Prototype { profile: "one_plus_inverse".into() }, 1).unwrap();
    let h = mesh.h();
    let f = PiecewiseField::triangle_vector(mesh.clone(), move |x| {
        if (x[0] - 0.5).abs() < h && (x[1] - 0.5).abs() < h {
            [30.0, 0.0]
        } else {
            [x[1], 1.0]
        }
    })
    .unwrap();
    let cfg = SolverConfig::default();
    let route = approximation_route(&spec, &f, &[1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0], 1.5, &cfg, &InitialGuess::Zero).unwrap();
    assert_eq!(route.distances.len(), 7);
    assert_eq!(*route.distances.last().unwrap(), 0.0);
    assert_eq!(route.distances[5], 0.0);
    assert!(route.distances[0] > 0.0);
    let big = approximation_route(&spec, &f, &[100.0, 200.0], 1.5, &cfg, &InitialGuess::Zero).unwrap();
    assert_eq!(big.members[0].values(), big.members[1].values());
    assert!(approximation_route(&spec, &f, &[2.0, 1.0], 1.5, &cfg, &InitialGuess::Zero).is_err());
}

#[test]
fn registry_specs_converge_from_two_guesses() {
    let mesh = square(16);
    let cfg = SolverConfig::default();
    for kind in registry() {
        let spec = build_operator(&kind, 1).unwrap();
        let f = manufactured_flux(&spec, &mesh, 1.0);
        let rhs = Rhs::Flux(f);
        let (a, ra) = solve_nonlinear(&spec, &rhs, &mesh, &cfg, &InitialGuess::Zero).unwrap();
        let (b, rb) = solve_nonlinear(&spec, &rhs, &mesh, &cfg, &InitialGuess::Random { seed: 3, amplitude: 1.0 }).unwrap();
        let d = gradient(&a).unwrap().difference(&gradient(&b).unwrap()).unwrap();
        let one = PiecewiseField::constant(mesh.clone(), Layout::TriangleScalar, 1, &[1.0]).unwrap();
        let dist = weighted_lp_norm(&d, &one, 2.0).unwrap();
        assert!(dist <= 10.0 * cfg.tol, "{kind:?}: {dist:e} ({} / {} iterations)", ra.iterations, rb.iterations);
    }
}

#[test]
fn dirac_integrability_split() {
    let mut l15 = Vec::new();
    let mut l2 = Vec::new();
    for m in [32usize, 64] {
        let mesh = square(m);
        let tensor = linear("identity").target_field(&mesh);
        let rhs = Rhs::dirac(&mesh, [0.5, 0.5], vec![1.0]).unwrap();
        let (u, _) = solve_linear(&tensor, &rhs, &SolverConfig::default()).unwrap();
        let g = gradient(&u).unwrap();
        let one = PiecewiseField::constant(mesh.clone(), Layout::TriangleScalar, 1, &[1.0]).unwrap();
        l15.push(weighted_lp_norm(&g, &one, 1.5).unwrap());
        l2.push(weighted_lp_norm(&g, &one, 2.0).unwrap());
    }
    assert!((l15[1] / l15[0] - 1.0).abs() < 0.1);
    assert!(l2[1] / l2[0] >= 1.05);
}

#[test]
fn vector_valued_solve() {
    let mesh = square(16);
    let spec = build_operator(&OperatorKind::Prototype { profile: "two_minus_inverse".into() }, 2).unwrap();
    let f = PiecewiseField::from_fn(mesh.clone(), Layout::TriangleVector, 2, |x, out| {
        let g = ustar_grad(x);
        let eta = [g[0], g[1], -0.5 * g[1], 2.0 * g[0]];
        out.copy_from_slice(&spec.eval_vec(x, &eta));
    })
    .unwrap();
    let (u, rep) = solve_nonlinear(&spec, &Rhs::Flux(f), &mesh, &SolverConfig::default(), &InitialGuess::Zero).unwrap();
    assert!(rep.converged);
    assert_eq!(u.n_comp(), 2);
}
