use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use memforce::model::{BoundaryData, PhysicalParams, SourceCharge};
use memforce_cli::config::{parse_config, GeometryConfig, Numerics, VerifyConfig};
use memforce_cli::CliError;

const MINIMAL: &str = r#"
[geometry]
kind = "spherical"
r_c = 5.0
r_e = 7.0
outer = 30.0
"#;

const CHARGED: &str = r#"
[geometry]
kind = "spherical"
r_c = 5.0
r_e = 7.0
outer = 30.0

[physics]
ions = [{ charge = 1.0, concentration = 10.0 }, { charge = -1.0, concentration = 10.0 }]
lipid_charge = -1.0
lipid_pool = { cytosolic = 50.0, exoplasmic = 50.0 }

[source]
centers = [[0.0, 0.0, 0.0]]
magnitudes = [500.0]
widths = [0.5]

[numerics]
cells = 2048

[sweep]
key = "physics.lipid_pool.cytosolic"
values = [0.0, 25.0, 50.0]

[verify]
geometry_quadrature = 32
"#;

fn memforce(args: &[&str], config: &str, dir: &Path) -> Output {
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_memforce"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--quiet")
        .env_remove("MEMFORCE_OUT")
        .env_remove("MEMFORCE_WORKERS")
        .output()
        .unwrap()
}

/// Data rows of a CSV artifact, without comments and header.
fn rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn invalid_fields(text: &str) -> Vec<String> {
    match parse_config(text) {
        Err(CliError::Invalid(v)) => v.into_iter().map(|(f, _)| f).collect(),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn minimal_config_gets_defaults() {
    let c = parse_config(MINIMAL).unwrap();
    assert_eq!(
        c.geometry,
        GeometryConfig::Spherical {
            r_c: 5.0,
            r_e: 7.0,
            outer: 30.0,
            cavity: None
        }
    );
    assert_eq!(c.physics, PhysicalParams::default());
    assert_eq!(c.source, SourceCharge::none());
    assert_eq!(c.boundary, BoundaryData::zero());
    assert_eq!(c.numerics, Numerics::default());
    assert_eq!(c.verify, VerifyConfig::default());
    assert_eq!(c.output.prefix, "run");
    assert!(c.bending.is_none() && c.sweep.is_none());
}

#[test]
fn partial_physics_block_keeps_other_defaults() {
    let c = parse_config(&format!("{MINIMAL}\n[physics]\neps_m = 4.0\n")).unwrap();
    assert_eq!(c.physics.eps_m, 4.0);
    assert_eq!(c.physics.eps_s, PhysicalParams::default().eps_s);
}

#[test]
fn inverted_radii_name_both_fields() {
    let text = MINIMAL.replace("r_c = 5.0", "r_c = 8.0");
    assert_eq!(invalid_fields(&text), ["geometry.r_c, geometry.r_e"]);
}

#[test]
fn negative_eps_m_is_rejected() {
    let text = format!("{MINIMAL}\n[physics]\neps_m = -2.0\n");
    assert_eq!(invalid_fields(&text), ["physics.eps_m"]);
}

#[test]
fn every_violation_is_listed() {
    let text = format!(
        "{}\n[physics]\neps_m = -2.0\nlipid_pool = {{ cytosolic = -1.0, exoplasmic = 0.0 }}\n[numerics]\ndamping = 0.0\n",
        MINIMAL.replace("outer = 30.0", "outer = 6.0")
    );
    let fields = invalid_fields(&text);
    for f in [
        "geometry.r_e, geometry.outer",
        "physics.eps_m",
        "physics.lipid_pool.cytosolic",
        "numerics.damping",
    ] {
        assert!(fields.iter().any(|x| x == f), "{f} missing from {fields:?}");
    }
}

#[test]
fn unknown_keys_and_syntax_errors_are_located() {
    let msg = parse_config(&format!("{MINIMAL}\n[physics]\neps_x = 1.0\n"))
        .unwrap_err()
        .to_string();
    assert!(msg.contains("physics") && msg.contains("eps_x"), "{msg}");
    let msg = parse_config(&format!("{MINIMAL}\n[numerics]\ngrid = 33\nspreading = \"nearest\"\n"))
        .unwrap_err()
        .to_string();
    assert!(msg.contains("numerics.spreading"), "{msg}");
    let err = parse_config("[geometry\nkind = 1").unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("line 1"), "{err}");
}

#[test]
fn coulomb_limit_has_the_free_space_tail() {
    let dir = tempfile::tempdir().unwrap();
    let (q, eps) = (100.0, 80.0);
    let config = format!(
        r#"
[geometry]
kind = "spherical"
r_c = 5.0
r_e = 7.0
outer = 20.0

[physics]
eps_s = {eps}
eps_m = {eps}
eps_p = {eps}

[source]
centers = [[0.0, 0.0, 0.0]]
magnitudes = [{q}]
widths = [0.5]

[boundary]
kind = "screened_coulomb"
eps = {eps}
kappa = 0.0
"#
    );
    let out = memforce(&["solve"], &config, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut checked = 0;
    for r in rows(&dir.path().join("out/run.phi.csv")) {
        let (x, phi): (f64, f64) = (r[0].parse().unwrap(), r[1].parse().unwrap());
        if x >= 4.0 {
            let exact = q / (4.0 * PI * eps * x);
            assert!((phi - exact).abs() <= 1e-6 * exact, "{x}: {phi} vs {exact}");
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn sweep_writes_one_row_per_point_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = memforce(&["sweep", "--workers", "3"], CHARGED, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path = dir.path().join("out/run.sweep.csv");
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# schema: memforce.sweep/1\n"));
    assert!(text.ends_with("# complete: 3 of 3 points\n"));
    let table = rows(&path);
    assert_eq!(table.len(), 3);
    let keys: Vec<f64> = table.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(keys, [0.0, 25.0, 50.0]);
    let lipid: Vec<f64> = table.iter().map(|r| r[6].parse().unwrap()).collect();
    let monotone = lipid.windows(2).all(|w| w[1] < w[0]) || lipid.windows(2).all(|w| w[1] > w[0]);
    println!("cytosolic lipid term {lipid:?}, monotone: {monotone}");
}

#[test]
fn outputs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (cmd, workers) in [
        ("solve", "1"),
        ("force", "1"),
        ("energy", "1"),
        ("verify", "1"),
        ("sweep", "1"),
    ] {
        let x = memforce(&[cmd, "--workers", workers, "--seed", "5"], CHARGED, a.path());
        let y = memforce(&[cmd, "--workers", "4", "--seed", "5"], CHARGED, b.path());
        assert!(x.status.success() && y.status.success(), "{cmd}");
    }
    let mut names: Vec<_> = fs::read_dir(a.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 7, "{names:?}");
    for n in names {
        let x = fs::read(a.path().join("out").join(&n)).unwrap();
        let y = fs::read(b.path().join("out").join(&n)).unwrap();
        assert!(x == y, "{n:?} differs");
    }
}

#[test]
fn grid_outputs_are_byte_identical_across_worker_counts() {
    let config = r#"
[geometry]
kind = "sdf3d"
r_c = 2.0
r_e = 4.0
half_width = 6.0

[physics]
ions = [{ charge = 1.0, concentration = 10.0 }, { charge = -1.0, concentration = 10.0 }]
lipid_charge = -1.0
lipid_pool = { cytosolic = 30.0, exoplasmic = 10.0 }

[source]
centers = [[0.0, 0.0, 0.0]]
magnitudes = [20.0]
widths = [0.7]

[numerics]
grid = 25
quadrature = 8

[sweep]
key = "physics.lipid_pool.exoplasmic"
values = [0.0, 10.0]
"#;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(memforce(&["sweep", "--workers", "1"], config, a.path()).status.success());
    assert!(memforce(&["sweep", "--workers", "2"], config, b.path()).status.success());
    let x = fs::read(a.path().join("out/run.sweep.csv")).unwrap();
    let y = fs::read(b.path().join("out/run.sweep.csv")).unwrap();
    assert_eq!(x, y);
    assert_eq!(rows(&a.path().join("out/run.sweep.csv")).len(), 2);
}

#[test]
fn verify_on_the_geometry_corpus_passes() {
    let dir = tempfile::tempdir().unwrap();
    let config = format!("{MINIMAL}\n[verify]\nsuites = [\"geometry\"]\n");
    let out = memforce(&["verify"], &config, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/run.verify.json")).unwrap())
            .unwrap();
    assert_eq!(report["schema_version"], 1);
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.len() >= 15);
    assert!(checks.iter().all(|c| c["pass"] == true));
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = MINIMAL.replace("r_c = 5.0", "r_c = 8.0");
    let out = memforce(&["solve"], &bad, dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("geometry.r_c, geometry.r_e"));

    let out = memforce(&["frobnicate"], MINIMAL, dir.path());
    assert_eq!(out.status.code(), Some(1));

    // One Newton step cannot reach the residual tolerance.
    let stalled = CHARGED.replace("cells = 2048", "cells = 2048\nmax_newton = 1");
    let out = memforce(&["solve"], &stalled, dir.path());
    assert_eq!(out.status.code(), Some(2));
    let fp = parse_config(&stalled).unwrap().fingerprint();
    assert!(String::from_utf8_lossy(&out.stderr).contains(&fp));

    // A coarse grid misses the trace tolerances of the 3D cross-check.
    let coarse = r#"
[geometry]
kind = "sdf3d"
r_c = 4.0
r_e = 6.0
half_width = 8.0

[physics]
ions = [{ charge = 1.0, concentration = 10.0 }, { charge = -1.0, concentration = 10.0 }]
lipid_charge = -1.0
lipid_pool = { cytosolic = 60.0, exoplasmic = 30.0 }

[source]
centers = [[0.0, 0.0, 0.0]]
magnitudes = [300.0]
widths = [1.0]

[numerics]
grid = 33
quadrature = 8

[verify]
suites = ["solution"]
"#;
    let out = memforce(&["verify"], coarse, dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn environment_sets_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, MINIMAL).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_memforce"))
        .args(["energy", "--quiet", "--config"])
        .arg(&path)
        .env("MEMFORCE_OUT", dir.path().join("env-out"))
        .env("MEMFORCE_WORKERS", "2")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("env-out/run.energy.json").exists());
}
