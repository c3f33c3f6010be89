use std::time::Instant;

use memforce::geometry::*;
use memforce::verify::{geometry_corpus, geometry_suite, lemma_checks, volume_transform_checks};

#[test]
fn corpus_and_gauss_bonnet_pass_quickly() {
    let start = Instant::now();
    let checks = geometry_suite(QuadratureRule::new(128, 128), 1e-5).unwrap();
    assert_eq!(checks.len(), 8);
    for c in &checks {
        assert!(c.pass, "{}", c.line());
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn lemma_diagnostic_values() {
    for c in lemma_checks(QuadratureRule::new(128, 128)).unwrap() {
        assert!(c.pass, "{}", c.line());
    }
}

#[test]
fn volume_rates_match_differences() {
    for c in volume_transform_checks(11, 10, 1e-5).unwrap() {
        assert!(c.pass, "{}", c.line());
    }
}

#[test]
fn transform_tensor_is_symmetric_positive_definite() {
    for pair in geometry_corpus(QuadratureRule::new(8, 8)) {
        for fr in pair.surface.frames().unwrap() {
            for t in [-0.05, 0.01, 0.05] {
                let a = TransformState::new(t, &pair.velocity)
                    .transform_tensor(&fr.r)
                    .unwrap()
                    .a;
                assert!((a - a.transpose()).abs().max() <= 1e-14);
                let eig = a.symmetric_eigenvalues();
                assert!(eig.iter().all(|l| *l > 0.0), "{} {eig:?}", pair.name);
            }
        }
    }
}

#[test]
fn normal_rate_is_tangential_and_matches_ambient_form() {
    for pair in geometry_corpus(QuadratureRule::new(16, 16)) {
        for fr in pair.surface.frames().unwrap() {
            let chart = normal_rate0(&pair.surface, &fr, &pair.velocity);
            assert!(chart.dot(&fr.n).abs() <= 1e-10);
            let ambient = normal_rate0_ambient(&fr, &pair.velocity);
            assert!((chart - ambient).norm() <= 1e-10 * (1.0 + ambient.norm()), "{}", pair.name);
        }
    }
}
