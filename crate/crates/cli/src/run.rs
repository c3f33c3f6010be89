//! Subcommands.

use std::path::PathBuf;
use std::time::Instant;

use memforce::energy::{bending_energy, electrostatic_energy, EnergyBreakdown, NamedTerm};
use memforce::force::{radial_force_profile, radial_shape_derivative, ForceProfile, ForceSample};
use memforce::geometry::{ParametricSurface, QuadratureRule, Shape, VelocityField};
use memforce::grid3d::{assemble_and_solve_3d, extract_traces_3d_with, write_dump, GridSolution};
use memforce::lipid::Face;
use memforce::model::b_energy;
use memforce::radial::PotentialSolution;
use memforce::verify::{
    check_maximizer, check_mst_equivalence, check_weak_form, fd_shape_derivative, geometry_suite,
    lemma_checks, mst_checks, volume_transform_checks, BumpPlacement, CheckResult,
    ConcentricCase, VerificationReport,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{with_override, GeometryConfig, RunConfig, Suite};
use crate::output::{artifact, num, write_json, Table, SCHEMA_VERSION};
use crate::CliError;

/// Settings from the command line.
#[derive(Debug, Clone)]
pub struct Context {
    pub out: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub quiet: bool,
}

impl Context {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

pub enum Solved {
    Radial(PotentialSolution),
    Grid(GridSolution),
}

/// Force and traces at one face sample.
#[derive(Debug, Clone, Copy)]
pub struct FaceRow {
    /// Chart coordinates on grid faces.
    pub chart: Option<[f64; 2]>,
    /// Face radius or height in one dimension, the sample point on the grid.
    pub position: [f64; 3],
    /// Area weight used for face averages.
    pub weight: f64,
    pub jump_residual: f64,
    pub force: ForceSample,
}

/// Face spheres with the normal pointing into the solvent.
fn face_surfaces(cfg: &RunConfig) -> Vec<(Face, ParametricSurface)> {
    let q = cfg.numerics.quadrature_rule();
    let [c, e] = cfg.geometry.faces();
    vec![
        (
            Face::Cytosolic,
            ParametricSurface::new(Shape::sphere(c))
                .with_quadrature(q)
                .flipped(),
        ),
        (
            Face::Exoplasmic,
            ParametricSurface::new(Shape::sphere(e)).with_quadrature(q),
        ),
    ]
}

pub fn solve(cfg: &RunConfig) -> Result<Solved, CliError> {
    let fp = cfg.fingerprint();
    if let Some(case) = cfg.radial_case() {
        return case.solve().map(Solved::Radial).map_err(|e| CliError::solver(&fp, e));
    }
    let sdf = cfg.sdf().expect("grid geometry");
    assemble_and_solve_3d(
        &cfg.physics,
        &sdf,
        &cfg.source,
        &cfg.boundary,
        &cfg.numerics.solver3d_options(),
    )
    .map(Solved::Grid)
    .map_err(|e| CliError::solver(&fp, e))
}

pub fn face_rows(cfg: &RunConfig, solved: &Solved) -> Result<Vec<FaceRow>, CliError> {
    let fp = cfg.fingerprint();
    let fail = |e: memforce::Error| CliError::solver(&fp, e);
    match solved {
        Solved::Radial(sol) => {
            let profile = radial_force_profile(sol).map_err(fail)?;
            Ok(profile
                .samples
                .iter()
                .zip(&sol.faces)
                .map(|(s, t)| FaceRow {
                    chart: None,
                    position: [s.position, 0.0, 0.0],
                    weight: 1.0,
                    jump_residual: t.jump_residual,
                    force: *s,
                })
                .collect())
        }
        Solved::Grid(sol) => {
            let mut rows = Vec::new();
            for (face, surface) in face_surfaces(cfg) {
                let tr = extract_traces_3d_with(sol, face, &surface, cfg.numerics.grid_traces)
                    .map_err(fail)?;
                let profile = ForceProfile::from_traces(
                    &cfg.physics,
                    tr.samples
                        .iter()
                        .enumerate()
                        .map(|(k, s)| (face, k as f64, *s)),
                )
                .map_err(fail)?;
                let weights = surface.area_weights().map_err(fail)?;
                for (k, node) in surface.nodes().iter().enumerate() {
                    rows.push(FaceRow {
                        chart: Some([node.u, node.v]),
                        position: tr.positions[k],
                        weight: weights[k],
                        jump_residual: tr.jump_residuals[k],
                        force: profile.samples[k],
                    });
                }
            }
            Ok(rows)
        }
    }
}

pub fn energy(cfg: &RunConfig, solved: &Solved) -> Result<EnergyBreakdown, CliError> {
    let fp = cfg.fingerprint();
    let fail = |e: memforce::Error| CliError::solver(&fp, e);
    let base = match solved {
        Solved::Radial(sol) => electrostatic_energy(sol),
        Solved::Grid(sol) => sol.energy(),
    }
    .map_err(fail)?;
    let Some(b) = cfg.bending else {
        return Ok(base);
    };
    let terms = match cfg.geometry {
        // Per unit area, as is G.
        GeometryConfig::Planar { .. } => Face::BOTH
            .iter()
            .map(|f| NamedTerm::new(f.name(), 0.5 * b.k_c * b.c0 * b.c0))
            .collect(),
        _ => face_surfaces(cfg)
            .iter()
            .map(|(f, s)| Ok(NamedTerm::new(f.name(), bending_energy(s, &b)?)))
            .collect::<memforce::Result<Vec<_>>>()
            .map_err(fail)?,
    };
    Ok(base.with_bending(terms))
}

#[derive(Serialize)]
struct FaceSummary {
    face: Face,
    samples: usize,
    mean_phi: f64,
    mean_rho: f64,
    max_abs_jump_residual: f64,
}

#[derive(Serialize)]
struct SolveMeta<'a> {
    schema_version: u32,
    fingerprint: String,
    seed: u64,
    geometry: &'static str,
    nodes: usize,
    newton_iterations: usize,
    residual: f64,
    residual_history: &'a [f64],
    faces: Vec<FaceSummary>,
    config: &'a RunConfig,
}

fn summaries(rows: &[FaceRow]) -> Vec<FaceSummary> {
    Face::BOTH
        .iter()
        .map(|&face| {
            let rs: Vec<&FaceRow> = rows.iter().filter(|r| r.force.face == face).collect();
            let area: f64 = rs.iter().map(|r| r.weight).sum();
            let mean = |f: fn(&FaceRow) -> f64| rs.iter().map(|r| r.weight * f(r)).sum::<f64>() / area;
            FaceSummary {
                face,
                samples: rs.len(),
                mean_phi: mean(|r| r.force.trace.phi),
                mean_rho: mean(|r| r.force.trace.rho),
                max_abs_jump_residual: rs.iter().fold(0.0, |m, r| f64::max(m, r.jump_residual.abs())),
            }
        })
        .collect()
}

pub fn cmd_solve(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let start = Instant::now();
    let solved = solve(cfg)?;
    let rows = face_rows(cfg, &solved)?;
    let prefix = &cfg.output.prefix;
    let (nodes, newton, residual, history) = match &solved {
        Solved::Radial(sol) => {
            let mut t = Table::new("memforce.phi.radial", ["x", "phi", "region"]);
            for (i, (x, phi)) in sol.nodes().iter().zip(&sol.phi).enumerate() {
                let region = match sol.problem.mesh.sides(i) {
                    (Some(a), Some(b)) if a != b => format!("{}/{}", a.name(), b.name()),
                    (Some(a), _) | (None, Some(a)) => a.name().to_string(),
                    (None, None) => String::new(),
                };
                t.push(vec![num(*x), num(*phi), region]);
            }
            t.write(&artifact(&ctx.out, prefix, "phi.csv")?)?;
            let mut r = Table::new("memforce.rho.radial", ["face", "position", "rho"]);
            for row in &rows {
                r.push(vec![
                    row.force.face.name().into(),
                    num(row.position[0]),
                    num(row.force.trace.rho),
                ]);
            }
            r.write(&artifact(&ctx.out, prefix, "rho.csv")?)?;
            let d = &sol.diagnostics;
            (sol.phi.len(), d.newton_iterations, d.residual, &d.residual_history)
        }
        Solved::Grid(sol) => {
            let g = sol.grid();
            let mut t = Table::new("memforce.phi.grid", ["x", "y", "z", "phi", "region"]);
            for (idx, (phi, label)) in sol.phi.iter().zip(&sol.problem.labels).enumerate() {
                let [i, j, k] = g.coords(idx);
                let x = g.point(i, j, k);
                t.push(vec![num(x.x), num(x.y), num(x.z), num(*phi), label.name().into()]);
            }
            t.write(&artifact(&ctx.out, prefix, "phi.csv")?)?;
            let mut r = Table::new("memforce.rho.grid", ["face", "u", "v", "rho"]);
            for row in &rows {
                let [u, v] = row.chart.unwrap_or_default();
                r.push(vec![
                    row.force.face.name().into(),
                    num(u),
                    num(v),
                    num(row.force.trace.rho),
                ]);
            }
            r.write(&artifact(&ctx.out, prefix, "rho.csv")?)?;
            if cfg.output.dump {
                let dir = &ctx.out;
                write_dump(sol, dir, &format!("{prefix}.field")).map_err(|source| {
                    CliError::Io {
                        path: dir.display().to_string(),
                        source,
                    }
                })?;
            }
            let d = &sol.diagnostics;
            (sol.phi.len(), d.newton_iterations, d.residual, &d.residual_history)
        }
    };
    let meta = SolveMeta {
        schema_version: SCHEMA_VERSION,
        fingerprint: cfg.fingerprint(),
        seed: ctx.seed,
        geometry: cfg.geometry.kind(),
        nodes,
        newton_iterations: newton,
        residual,
        residual_history: history,
        faces: summaries(&rows),
        config: cfg,
    };
    write_json(&artifact(&ctx.out, prefix, "solve.json")?, &meta)?;
    ctx.note(format!(
        "solve: {nodes} nodes, {newton} Newton steps, residual {residual:.2e}, {:.2} s",
        start.elapsed().as_secs_f64()
    ));
    Ok(())
}

pub fn cmd_force(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let solved = solve(cfg)?;
    let rows = face_rows(cfg, &solved)?;
    let tail = [
        "phi",
        "grad_s_n",
        "grad_m_n",
        "rho",
        "jump_residual",
        "F_paper",
        "F_alt",
        "F_mst",
    ];
    let grid = matches!(solved, Solved::Grid(_));
    let head: Vec<&str> = if grid {
        vec!["face", "u", "v", "x", "y", "z", "weight"]
    } else {
        vec!["face", "position"]
    };
    let mut t = Table::new(
        if grid {
            "memforce.force.grid"
        } else {
            "memforce.force.radial"
        },
        head.into_iter().chain(tail),
    );
    for r in &rows {
        let f = &r.force;
        let mut row = vec![f.face.name().to_string()];
        if let Some([u, v]) = r.chart {
            row.extend([u, v].map(num));
            row.extend(r.position.map(num));
            row.push(num(r.weight));
        } else {
            row.push(num(r.position[0]));
        }
        row.extend(
            [
                f.trace.phi,
                f.trace.grad_s_n,
                f.trace.grad_m_n,
                f.trace.rho,
                r.jump_residual,
                f.f_paper,
                f.f_alt,
                f.f_mst,
            ]
            .map(num),
        );
        t.push(row);
    }
    let path = artifact(&ctx.out, &cfg.output.prefix, "force.csv")?;
    t.write(&path)?;
    ctx.note(format!("force: {} samples -> {}", rows.len(), path.display()));
    Ok(())
}

#[derive(Serialize)]
struct EnergyDoc<'a> {
    schema_version: u32,
    fingerprint: String,
    seed: u64,
    geometry: &'static str,
    energy: &'a EnergyBreakdown,
}

pub fn cmd_energy(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let solved = solve(cfg)?;
    let e = energy(cfg, &solved)?;
    let path = artifact(&ctx.out, &cfg.output.prefix, "energy.json")?;
    write_json(
        &path,
        &EnergyDoc {
            schema_version: SCHEMA_VERSION,
            fingerprint: cfg.fingerprint(),
            seed: ctx.seed,
            geometry: cfg.geometry.kind(),
            energy: &e,
        },
    )?;
    ctx.note(format!("energy: G = {:.10e}, Pi = {:.10e}", e.g, e.pi));
    Ok(())
}

/// A check that could not be evaluated counts as failed.
fn failed_check(name: &str, e: impl std::fmt::Display, ctx: &Context) -> CheckResult {
    ctx.note(format!("{name}: {e}"));
    CheckResult::upper_bound(name, f64::NAN, 0.0)
}

/// `Σ_faces |∫ P (V·n) dS|` with `P` the sum of the magnitudes of the
/// stress terms on each side of the face.
fn pressure_scale(sol: &PotentialSolution, velocity: &VelocityField) -> memforce::Result<f64> {
    let p = &sol.problem.params;
    let mut total = 0.0;
    for face in Face::BOTH {
        let part = radial_shape_derivative(
            sol,
            |s| {
                if s.face != face {
                    return 0.0;
                }
                let t = &s.trace;
                let tt: f64 = t.grad_t.map_or(0.0, |g| g.iter().map(|x| x * x).sum());
                0.5 * p.eps_s * (t.grad_s_n.powi(2) + tt)
                    + 0.5 * p.eps_m * (t.grad_m_n.powi(2) + tt)
                    + b_energy(t.phi, p).unwrap_or(f64::NAN).abs()
                    + (p.lipid_charge * t.rho * t.grad_s_n).abs()
            },
            velocity,
        )?;
        total += part.abs();
    }
    Ok(total)
}

fn solution_checks(cfg: &RunConfig, ctx: &Context) -> Result<Vec<CheckResult>, CliError> {
    let fp = cfg.fingerprint();
    let label = cfg.geometry.kind();
    let mut out = Vec::new();
    if let Some(case) = cfg.radial_case() {
        let sol = case.solve().map_err(|e| CliError::solver(&fp, e))?;
        out.push(CheckResult::upper_bound(
            "newton_residual",
            sol.diagnostics.residual,
            cfg.numerics.newton_tol,
        ));
        let n = cfg.verify.tests;
        let seed = ctx.seed;
        for (name, r) in [
            ("mst", check_mst_equivalence(label, &sol)),
            (
                "weak_form",
                check_weak_form(label, &sol, n, seed, BumpPlacement::AwayFromFaces).map(|c| vec![c]),
            ),
            ("maximizer", check_maximizer(label, &sol, n, seed, 1e-2).map(|c| vec![c])),
        ] {
            match r {
                Ok(c) => out.extend(c),
                Err(e) => out.push(failed_check(&format!("{name}[{label}]"), e, ctx)),
            }
        }
        let name = format!("shape_derivative[{label}]");
        let velocity = case.reference_velocity();
        match fd_shape_derivative(&case, &velocity, 1e-3)
            .and_then(|fd| Ok((fd, pressure_scale(&sol, &velocity)?)))
        {
            Ok((fd, pressure)) => {
                // Relative to |FD| unless the derivative vanishes next to the
                // pressures it is built from, as with a uniform dielectric.
                let scale = fd.fd_value.abs().max(1e-3 * pressure);
                out.push(CheckResult::upper_bound(name, fd.abs_discrepancy / scale, 1e-2));
                out.push(CheckResult::report(
                    format!("shape_derivative_vs_fd[{label}]"),
                    fd.rel_discrepancy,
                    0.0,
                ));
            }
            Err(e) => out.push(failed_check(&name, e, ctx)),
        }
        return Ok(out);
    }
    let GeometryConfig::Sdf3d { r_c, r_e, half_width } = cfg.geometry else {
        unreachable!("non-radial geometry is sdf3d");
    };
    // The grid is checked against the spherical reduction, which also
    // supplies its boundary data.
    let case = ConcentricCase {
        params: cfg.physics.clone(),
        source: cfg.source.clone(),
        radii: [r_c, r_e],
        half_width,
        reference_outer: 1.01 * half_width * 3f64.sqrt(),
        reference_cells: 8192,
        quadrature: cfg.numerics.quadrature_rule(),
        options: cfg.numerics.solver3d_options(),
    };
    let reference = case.solve_reference().map_err(|e| CliError::solver(&fp, e))?;
    let cmp = case
        .compare(&reference, cfg.numerics.grid)
        .map_err(|e| CliError::solver(&fp, e))?;
    out.push(CheckResult::upper_bound(
        "grid_field_vs_spherical",
        cmp.field_rel_linf,
        2e-2,
    ));
    out.push(CheckResult::upper_bound(
        "grid_traces_vs_spherical",
        cmp.trace_error(),
        5e-2,
    ));
    let grid = case
        .solve_grid(&reference, cfg.numerics.grid)
        .map_err(|e| CliError::solver(&fp, e))?;
    let rows = face_rows(cfg, &Solved::Grid(grid))?;
    let profile = ForceProfile {
        samples: rows.iter().map(|r| r.force).collect(),
    };
    out.extend(mst_checks(label, &profile, 1e-10));
    Ok(out)
}

pub fn cmd_verify(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let start = Instant::now();
    let fp = cfg.fingerprint();
    let mut report = VerificationReport::new(fp.clone(), ctx.seed);
    let v = &cfg.verify;
    for suite in &v.suites {
        match suite {
            Suite::Geometry => {
                let q = QuadratureRule::new(v.geometry_quadrature, v.geometry_quadrature);
                let fail = |e: memforce::Error| CliError::solver(&fp, e);
                report.extend(geometry_suite(q, v.tau).map_err(fail)?);
                report.extend(lemma_checks(q).map_err(fail)?);
                report.extend(volume_transform_checks(ctx.seed, 10, v.tau).map_err(fail)?);
            }
            Suite::Solution => report.extend(solution_checks(cfg, ctx)?),
        }
    }
    write_json(&artifact(&ctx.out, &cfg.output.prefix, "verify.json")?, &report)?;
    report.runtime_seconds = Some(start.elapsed().as_secs_f64());
    if !ctx.quiet {
        print!("{}", report.table());
    }
    match report.failures().count() {
        0 => Ok(()),
        n => Err(CliError::Verification(n)),
    }
}

/// Face averages of one sweep point.
#[derive(Debug, Clone, Copy)]
struct SweepRow {
    g: f64,
    pi: f64,
    /// `[F_paper, F_alt, F_mst, q_l ρ ∇φˢ·n]` per face.
    faces: [[f64; 4]; 2],
}

fn sweep_point(cfg: &RunConfig) -> Result<SweepRow, CliError> {
    let solved = solve(cfg)?;
    let e = energy(cfg, &solved)?;
    let rows = face_rows(cfg, &solved)?;
    let q_l = cfg.physics.lipid_charge;
    let mut faces = [[0.0; 4]; 2];
    for face in Face::BOTH {
        let rs: Vec<&FaceRow> = rows.iter().filter(|r| r.force.face == face).collect();
        let area: f64 = rs.iter().map(|r| r.weight).sum();
        for r in rs {
            let f = &r.force;
            let w = r.weight / area;
            let vals = [
                f.f_paper,
                f.f_alt,
                f.f_mst,
                q_l * f.trace.rho * f.trace.grad_s_n,
            ];
            for (acc, v) in faces[face.index()].iter_mut().zip(vals) {
                *acc += w * v;
            }
        }
    }
    Ok(SweepRow {
        g: e.g,
        pi: e.pi,
        faces,
    })
}

pub fn cmd_sweep(text: &str, cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep needs a [sweep] block".into()))?;
    let points = sweep
        .values
        .iter()
        .map(|v| {
            with_override(text, &sweep.key, *v).map_err(|e| match e {
                CliError::Invalid(list) => CliError::Invalid(
                    list.into_iter()
                        .map(|(f, r)| (f, format!("{r} (sweep {} = {v})", sweep.key)))
                        .collect(),
                ),
                other => other,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.workers)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<SweepRow, CliError>> = pool.install(|| {
        points
            .par_iter()
            .zip(&sweep.values)
            .map(|(p, v)| {
                let r = sweep_point(p);
                if r.is_ok() {
                    ctx.note(format!("sweep: {} = {v} done", sweep.key));
                }
                r
            })
            .collect()
    });

    let mut header = vec![sweep.key.clone(), "G".into(), "Pi".into()];
    for face in Face::BOTH {
        for col in ["F_paper", "F_alt", "F_mst", "lipid_term"] {
            header.push(format!("{}.{col}", face.name()));
        }
    }
    let mut t = Table::new("memforce.sweep", header);
    let mut failures = Vec::new();
    for (v, r) in sweep.values.iter().zip(results) {
        match r {
            Ok(row) => {
                let mut cells = vec![num(*v), num(row.g), num(row.pi)];
                cells.extend(row.faces.iter().flatten().map(|x| num(*x)));
                t.push(cells);
            }
            Err(e) => failures.push((*v, e)),
        }
    }
    let n = sweep.values.len();
    if failures.is_empty() {
        t.footer(format!("complete: {n} of {n} points"));
    } else {
        t.footer(format!(
            "incomplete: {} of {n} points; failed {}",
            n - failures.len(),
            failures
                .iter()
                .map(|(v, _)| format!("{} = {v}", sweep.key))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    let path = artifact(&ctx.out, &cfg.output.prefix, "sweep.csv")?;
    t.write(&path)?;
    ctx.note(format!("sweep: {} rows -> {}", n - failures.len(), path.display()));
    match failures.into_iter().next() {
        None => Ok(()),
        Some((_, e)) => Err(e),
    }
}
