use std::time::Instant;

use memforce::force::radial_force_profile;
use memforce::verify::*;

const LADDER: [(usize, f64); 3] = [(1024, 4e-3), (2048, 2e-3), (4096, 1e-3)];

#[test]
fn spherical_reference_matches_energy_difference_quotient() {
    let start = Instant::now();
    let case = RadialCase::reference(4096);
    let v = case.reference_velocity();
    let ladder = fd_refinement_ladder(&case, &v, &LADDER).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let last = ladder.last().unwrap();
    assert!(last.fd_value.abs() > 0.1, "{last:?}");
    assert!(last.rel_discrepancy <= 1e-2, "{last:?}");
    assert!(ladder_is_monotone(&ladder, 1e-10), "{ladder:?}");
    assert!(elapsed < 30.0, "{elapsed} s");
    for l in &ladder {
        assert!((l.alt_value - l.formula_value).abs() <= 1e-8 * l.formula_value.abs());
        assert!((l.mst_value - l.formula_value).abs() <= 1e-8 * l.formula_value.abs());
        assert_eq!(l.curvature_value, 0.0);
    }
}

#[test]
fn planar_discrepancy_is_second_order() {
    let case = RadialCase::reference_planar(1024);
    let v = case.reference_velocity();
    let ladder = fd_refinement_ladder(
        &case,
        &v,
        &[(1024, 4e-3), (2048, 2e-3), (4096, 1e-3), (8192, 5e-4)],
    )
    .unwrap();
    assert!(ladder_is_monotone(&ladder, 1e-12), "{ladder:?}");
    for w in ladder.windows(2) {
        let ratio = w[0].abs_discrepancy / w[1].abs_discrepancy;
        assert!(ratio > 3.5, "{ratio} {ladder:?}");
    }
    assert!(ladder[3].rel_discrepancy < 5e-3, "{:?}", ladder[3]);
}

#[test]
fn shared_pool_needs_the_curvature_term() {
    let case = RadialCase::reference_shared(4096);
    let v = case.reference_velocity();
    let r = fd_shape_derivative(&case, &v, 1e-3).unwrap();
    // The force alone misses the redistribution between faces of
    // different curvature, at a level that does not shrink with the mesh.
    assert!(r.rel_discrepancy > 5e-2, "{r:?}");
    assert!(r.completed_rel_discrepancy <= 1e-4, "{r:?}");
    let coarse = fd_shape_derivative(&RadialCase::reference_shared(1024), &v, 4e-3).unwrap();
    assert!((coarse.rel_discrepancy - r.rel_discrepancy).abs() < 1e-3);
}

#[test]
fn force_forms_agree_on_converged_solutions() {
    for case in [
        RadialCase::reference(2048),
        RadialCase::reference_shared(2048),
        RadialCase::reference_planar(2048),
    ] {
        let sol = case.solve().unwrap();
        for c in check_mst_equivalence("case", &sol).unwrap() {
            assert!(c.pass, "{}", c.line());
        }
        let profile = radial_force_profile(&sol).unwrap();
        assert!(profile
            .samples
            .iter()
            .all(|s| s.f_paper.is_finite() && s.f_paper != 0.0));
    }
}

#[test]
fn reference_solution_is_a_weak_solution_and_maximiser() {
    let start = Instant::now();
    let sol = RadialCase::reference(4096).solve().unwrap();
    for seed in 0..3 {
        for placement in [BumpPlacement::AwayFromFaces, BumpPlacement::AcrossFaces] {
            let c = check_weak_form("reference", &sol, 20, seed, placement).unwrap();
            assert!(c.pass, "{}", c.line());
        }
        let m = check_maximizer("reference", &sol, 20, seed, 1e-2).unwrap();
        assert!(m.pass, "{}", m.line());
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn like_charged_faces_repel() {
    // Between grounded ends, pulling two equal sheets σ apart changes G at
    // the rate -σ²/ε whatever their positions.
    let mut case = RadialCase::reference_planar(2048);
    case.params.ions.clear();
    case.params.eps_m = case.params.eps_s;
    case.params.lipid_pool.cytosolic = 1.0;
    case.params.lipid_pool.exoplasmic = 1.0;
    case.bc = memforce::model::BoundaryData::zero();
    let apart = memforce::geometry::VelocityField::PlanarBumps {
        positions: vec![20.0, 24.0],
        amplitudes: vec![-1.0, 1.0],
        support: 1.8,
    };
    let r = fd_shape_derivative(&case, &apart, 2e-3).unwrap();
    let exact = -1.0 / case.params.eps_s;
    assert!(r.fd_value < 0.0 && r.formula_value < 0.0, "{r:?}");
    assert!((r.fd_value - exact).abs() <= 1e-6 * exact.abs(), "{r:?}");
    assert!((r.formula_value - exact).abs() <= 1e-6 * exact.abs(), "{r:?}");
}
