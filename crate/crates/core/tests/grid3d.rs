use memforce::geometry::{ParametricSurface, QuadratureRule, Shape, Vec3};
use memforce::grid3d::*;
use memforce::lipid::Face;
use memforce::model::{b_prime, BoundaryData, IonSpecies, LipidPool, PhysicalParams, SourceCharge};
use memforce::verify::ConcentricCase;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn salty(pool: [f64; 2]) -> PhysicalParams {
    PhysicalParams {
        ions: vec![IonSpecies::new(1.0, 10.0), IonSpecies::new(-1.0, 10.0)],
        lipid_charge: -1.0,
        lipid_pool: LipidPool {
            cytosolic: pool[0],
            exoplasmic: pool[1],
            shared: false,
        },
        ..Default::default()
    }
}

fn sphere_faces() -> Vec<(Face, ParametricSurface)> {
    let q = QuadratureRule::new(12, 12);
    vec![
        (
            Face::Cytosolic,
            ParametricSurface::new(Shape::sphere(2.0))
                .with_quadrature(q)
                .flipped(),
        ),
        (
            Face::Exoplasmic,
            ParametricSurface::new(Shape::sphere(4.0)).with_quadrature(q),
        ),
    ]
}

#[test]
fn affine_data_is_reproduced() {
    let params = PhysicalParams {
        ions: vec![],
        eps_s: 3.0,
        eps_m: 3.0,
        eps_p: 3.0,
        lipid_charge: 0.0,
        ..Default::default()
    };
    let gradient = [0.2, -0.1, 0.05];
    let bc = BoundaryData::Affine {
        offset: 0.3,
        gradient,
    };
    let sol = assemble_and_solve_3d(
        &params,
        &RegionSdf::concentric(2.0, 4.0, 6.0, 25),
        &SourceCharge::none(),
        &bc,
        &Solver3dOptions::default(),
    )
    .unwrap();
    let g = sol.grid();
    for (idx, phi) in sol.phi.iter().enumerate() {
        let [i, j, k] = g.coords(idx);
        let x = g.point(i, j, k);
        let exact = bc.eval([x.x, x.y, x.z], &SourceCharge::none());
        assert!((phi - exact).abs() <= 1e-10, "{idx}: {phi} vs {exact}");
    }
    let b = Vec3::from(gradient);
    for (face, s) in sphere_faces() {
        for method in [GridTraceMethod::JumpRecovery, GridTraceMethod::Probes] {
            let tr = extract_traces_3d_with(&sol, face, &s, method).unwrap();
            for (t, frame) in tr.samples.iter().zip(s.frames().unwrap()) {
                let exact = b.dot(&frame.n);
                assert!((t.grad_s_n - exact).abs() <= 1e-8, "{t:?} {exact}");
                assert!((t.grad_m_n - exact).abs() <= 1e-8, "{t:?} {exact}");
            }
        }
    }
}

#[test]
fn no_charge_gives_zero_traces() {
    let sol = assemble_and_solve_3d(
        &salty([0.0, 0.0]),
        &RegionSdf::concentric(2.0, 4.0, 6.0, 25),
        &SourceCharge::none(),
        &BoundaryData::zero(),
        &Solver3dOptions::default(),
    )
    .unwrap();
    assert!(sol.phi.iter().all(|p| *p == 0.0));
    for (face, s) in sphere_faces() {
        let tr = extract_traces_3d(&sol, face, &s).unwrap();
        for t in &tr.samples {
            assert_eq!([t.phi, t.grad_s_n, t.grad_m_n, t.rho], [0.0; 4]);
        }
    }
}

fn charged() -> GridSolution {
    assemble_and_solve_3d(
        &salty([30.0, 10.0]),
        &RegionSdf::concentric(2.0, 4.0, 6.0, 25),
        &SourceCharge::central(20.0, 0.7),
        &BoundaryData::zero(),
        &Solver3dOptions::default(),
    )
    .unwrap()
}

#[test]
fn centred_solution_has_the_cube_symmetries() {
    let sol = charged();
    let g = sol.grid();
    let n = g.dims[0];
    let scale = sol.phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for idx in 0..g.len() {
        let [i, j, k] = g.coords(idx);
        for [a, b, c] in [[j, k, i], [k, i, j], [j, i, k], [n - 1 - i, j, k], [i, n - 1 - j, n - 1 - k]] {
            let other = sol.phi[g.index(a, b, c)];
            assert!((sol.phi[idx] - other).abs() <= 1e-9 * scale);
        }
    }
    assert!(scale > 1e-2, "{scale}");
}

#[test]
fn lipids_are_conserved_on_the_grid() {
    let sol = charged();
    let spread = sol.spread_charge();
    assert!((spread[0] - 30.0).abs() <= 1e-10 * 30.0, "{spread:?}");
    assert!((spread[1] - 10.0).abs() <= 1e-10 * 10.0, "{spread:?}");
}

/// Flux out of the box `[lo, hi)` of nodes plus the charge it encloses.
fn box_balance(p: &GridProblem, phi: &[f64], lo: [usize; 3], hi: [usize; 3]) -> (f64, f64) {
    let g = p.grid();
    let st = [1, g.dims[0], g.dims[0] * g.dims[1]];
    let mut lipid = vec![0.0; phi.len()];
    for pool in &p.pools {
        for (site, rho) in pool.sites.iter().zip(pool.density(&p.params, phi)) {
            for (idx, w) in &site.nodes {
                lipid[*idx] += p.params.lipid_charge * site.area * rho * w;
            }
        }
    }
    let (mut total, mut scale) = (0.0, 0.0);
    for k in lo[2]..hi[2] {
        for j in lo[1]..hi[1] {
            for i in lo[0]..hi[0] {
                let c = [i, j, k];
                let idx = g.index(i, j, k);
                let ionic = p.solvent_volume[idx] * b_prime(phi[idx], &p.params).unwrap();
                let q = p.source[idx] - ionic + lipid[idx];
                total += q;
                scale += q.abs();
                for a in 0..3 {
                    if c[a] + 1 == hi[a] {
                        let f = p.conductance[a][idx] * (phi[idx + st[a]] - phi[idx]);
                        total += f;
                        scale += f.abs();
                    }
                    if c[a] == lo[a] {
                        let f = p.conductance[a][idx - st[a]] * (phi[idx - st[a]] - phi[idx]);
                        total += f;
                        scale += f.abs();
                    }
                }
            }
        }
    }
    (total, scale)
}

#[test]
fn control_volumes_balance() {
    let sol = charged();
    let p = &sol.problem;
    let n = p.grid().dims[0];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (res, _) = p.residual(&sol.phi).unwrap();
    let flux_scale = p.conductance[0].iter().fold(0.0f64, |m, c| m.max(*c))
        * sol.phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for _ in 0..40 {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            lo[a] = rng.random_range(1..n - 2);
            hi[a] = rng.random_range(lo[a] + 1..n - 1);
        }
        // The node residuals telescope into the flux through the box surface.
        let inside: f64 = (lo[2]..hi[2])
            .flat_map(|k| (lo[1]..hi[1]).flat_map(move |j| (lo[0]..hi[0]).map(move |i| [i, j, k])))
            .map(|[i, j, k]| res[p.grid().index(i, j, k)])
            .sum();
        let (total, scale) = box_balance(p, &sol.phi, lo, hi);
        assert!((total - inside).abs() <= 1e-12 * scale.max(1.0), "{total} {inside}");
        // Single cells balance to solver accuracy.
        let c = [lo[0], lo[1], lo[2]];
        let (cell, _) = box_balance(p, &sol.phi, c, [c[0] + 1, c[1] + 1, c[2] + 1]);
        assert!(cell.abs() <= 1e-10 * flux_scale, "{cell} vs {flux_scale}");
    }
}

#[test]
fn both_spreadings_conserve_and_converge() {
    for spreading in [ChargeSpreading::EdgeCrossing, ChargeSpreading::Cosine] {
        let sol = assemble_and_solve_3d(
            &salty([30.0, 10.0]),
            &RegionSdf::concentric(2.0, 4.0, 6.0, 25),
            &SourceCharge::central(20.0, 0.7),
            &BoundaryData::zero(),
            &Solver3dOptions {
                spreading,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(sol.diagnostics.residual <= 1e-10);
        let spread = sol.spread_charge();
        assert!((spread[0] - 30.0).abs() <= 1e-10 * 30.0, "{spread:?}");
    }
}

#[test]
fn concentric_shell_converges_to_the_spherical_solution() {
    let case = ConcentricCase::reference();
    let one = case.solve_reference().unwrap();
    let coarse = case.compare(&one, 33).unwrap();
    let fine = case.compare(&one, 65).unwrap();
    assert!(fine.field_rel_linf < 0.5 * coarse.field_rel_linf, "{coarse:?} {fine:?}");
    assert!(fine.field_rel_linf < 1e-2, "{fine:?}");
    for f in &fine.faces {
        assert!(f.max_jump_residual <= 1e-10, "{f:?}");
        assert!(f.rho < 1e-3, "{f:?}");
        assert!(f.grad_m_n < 0.1 && f.grad_s_n < 0.1, "{f:?}");
    }
    // Probes alone do not satisfy the jump condition.
    assert!(fine.faces.iter().any(|f| f.probe_max_jump_residual > 1e-3));
}

#[test]
fn dump_round_trips() {
    let sol = charged();
    let dir = std::env::temp_dir().join(format!("memforce-dump-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let header = write_dump(&sol, &dir, "charged").unwrap();
    let (h, phi, regions) = read_dump(&header).unwrap();
    assert_eq!(h.dims, sol.grid().dims);
    assert_eq!(phi, sol.phi);
    assert_eq!(regions.len(), sol.phi.len());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn thin_or_misplaced_geometry_is_rejected() {
    let params = salty([1.0, 1.0]);
    let err = assemble_and_solve_3d(
        &params,
        &RegionSdf::concentric(2.0, 2.5, 6.0, 25),
        &SourceCharge::none(),
        &BoundaryData::zero(),
        &Solver3dOptions::default(),
    );
    assert!(err.is_err());
    let off = ParametricSurface::new(Shape::sphere(3.0)).with_quadrature(QuadratureRule::new(8, 8));
    assert!(extract_traces_3d(&charged(), Face::Exoplasmic, &off).is_err());
}
