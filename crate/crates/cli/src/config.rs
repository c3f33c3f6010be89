//! Run configuration: TOML text to a validated [`RunConfig`].

use memforce::energy::BendingParams;
use memforce::geometry::QuadratureRule;
use memforce::grid3d::{ChargeSpreading, GridTraceMethod, RegionSdf, Solver3dOptions};
use memforce::model::{BoundaryData, PhysicalParams, SourceCharge};
use memforce::radial::{Grading, Linearization, RadialGeometry, SolverOptions, TraceMethod};
use memforce::verify::{fingerprint, RadialCase};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub physics: PhysicalParams,
    #[serde(default)]
    pub source: SourceCharge,
    #[serde(default)]
    pub boundary: BoundaryData,
    #[serde(default)]
    pub numerics: Numerics,
    /// Adds the Canham-Helfrich energy of both faces to `Π`.
    #[serde(default)]
    pub bending: Option<BendingParams>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub verify: VerifyConfig,
}

/// Membrane layout. Faces are `[Γ_c, Γ_e]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometryConfig {
    /// Spherical shell `r_c < r < r_e` inside a ball of radius `outer`.
    Spherical {
        r_c: f64,
        r_e: f64,
        outer: f64,
        #[serde(default)]
        cavity: Option<f64>,
    },
    /// Slab `z_c < z < z_e` in `0 < z < length`.
    Planar { z_c: f64, z_e: f64, length: f64 },
    /// Spherical shell on an `n³` grid over `[-half_width, half_width]³`.
    Sdf3d { r_c: f64, r_e: f64, half_width: f64 },
}

impl GeometryConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            GeometryConfig::Spherical { .. } => "spherical",
            GeometryConfig::Planar { .. } => "planar",
            GeometryConfig::Sdf3d { .. } => "sdf3d",
        }
    }

    pub fn faces(&self) -> [f64; 2] {
        match *self {
            GeometryConfig::Spherical { r_c, r_e, .. } | GeometryConfig::Sdf3d { r_c, r_e, .. } => {
                [r_c, r_e]
            }
            GeometryConfig::Planar { z_c, z_e, .. } => [z_c, z_e],
        }
    }

    fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let (names, faces, outer) = match *self {
            GeometryConfig::Spherical { r_c, r_e, outer, cavity } => {
                if let Some(p) = cavity {
                    if !(p > 0.0 && p < r_c) {
                        out.push((
                            "geometry.cavity, geometry.r_c".into(),
                            format!("need 0 < cavity < r_c, got cavity = {p}, r_c = {r_c}"),
                        ));
                    }
                }
                (["r_c", "r_e", "outer"], [r_c, r_e], outer)
            }
            GeometryConfig::Planar { z_c, z_e, length } => {
                (["z_c", "z_e", "length"], [z_c, z_e], length)
            }
            GeometryConfig::Sdf3d { r_c, r_e, half_width } => {
                (["r_c", "r_e", "half_width"], [r_c, r_e], half_width)
            }
        };
        let [c, e] = faces;
        let [nc, ne, no] = names;
        if !(c > 0.0 && c.is_finite()) {
            out.push((format!("geometry.{nc}"), format!("must be positive, got {c}")));
        }
        if !(c < e) {
            out.push((
                format!("geometry.{nc}, geometry.{ne}"),
                format!("need {nc} < {ne}, got {nc} = {c}, {ne} = {e}"),
            ));
        }
        if !(e < outer && outer.is_finite()) {
            out.push((
                format!("geometry.{ne}, geometry.{no}"),
                format!("need {ne} < {no}, got {ne} = {e}, {no} = {outer}"),
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    /// Cells of the one-dimensional mesh.
    pub cells: usize,
    /// Graded mesh clustered at the interfaces; uniform segments otherwise.
    pub graded: bool,
    pub linearized: bool,
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Relaxation of the lipid-density fixed point.
    pub damping: f64,
    pub rho_tol: f64,
    pub max_fixed_point: usize,
    /// Nodes per axis of the 3D grid.
    pub grid: usize,
    pub grid_newton_tol: f64,
    pub linear_tol: f64,
    pub max_linear: usize,
    pub spreading: ChargeSpreading,
    pub grid_traces: GridTraceMethod,
    /// Nodes per chart direction on each face.
    pub quadrature: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        let one = SolverOptions::default();
        let three = Solver3dOptions::default();
        Self {
            cells: 4096,
            graded: true,
            linearized: false,
            newton_tol: one.newton_tol,
            max_newton: one.max_newton,
            damping: one.damping,
            rho_tol: one.rho_tol,
            max_fixed_point: one.max_fixed_point,
            grid: 65,
            grid_newton_tol: three.newton_tol,
            linear_tol: three.linear_tol,
            max_linear: three.max_linear,
            spreading: three.spreading,
            grid_traces: GridTraceMethod::default(),
            quadrature: 32,
        }
    }
}

impl Numerics {
    fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                out.push((format!("numerics.{name}"), format!("must be positive, got {v}")));
            }
        };
        positive("newton_tol", self.newton_tol);
        positive("rho_tol", self.rho_tol);
        positive("grid_newton_tol", self.grid_newton_tol);
        positive("linear_tol", self.linear_tol);
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            out.push((
                "numerics.damping".into(),
                format!("must lie in (0, 1], got {}", self.damping),
            ));
        }
        for (name, v, min) in [
            ("cells", self.cells, 16),
            ("grid", self.grid, 9),
            ("quadrature", self.quadrature, 2),
            ("max_newton", self.max_newton, 1),
            ("max_fixed_point", self.max_fixed_point, 1),
            ("max_linear", self.max_linear, 1),
        ] {
            if v < min {
                out.push((format!("numerics.{name}"), format!("must be at least {min}, got {v}")));
            }
        }
        out
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            newton_tol: self.newton_tol,
            max_newton: self.max_newton,
            damping: self.damping,
            rho_tol: self.rho_tol,
            max_fixed_point: self.max_fixed_point,
            linearization: if self.linearized {
                Linearization::Linearized
            } else {
                Linearization::Nonlinear
            },
            traces: TraceMethod::FluxRecovery,
        }
    }

    pub fn solver3d_options(&self) -> Solver3dOptions {
        Solver3dOptions {
            newton_tol: self.grid_newton_tol,
            max_newton: self.max_newton,
            linear_tol: self.linear_tol,
            max_linear: self.max_linear,
            spreading: self.spreading,
        }
    }

    pub fn quadrature_rule(&self) -> QuadratureRule {
        QuadratureRule::new(self.quadrature, self.quadrature)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// File stem of every artifact, e.g. `run.phi.csv`.
    pub prefix: String,
    /// Also write the raw 3D field and region labels as binary files.
    pub dump: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            prefix: "run".into(),
            dump: false,
        }
    }
}

/// One run per value of a dotted config key, e.g. `physics.lipid_pool.cytosolic`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub key: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Surface calculus corpus, lemma diagnostic and volume rates.
    Geometry,
    /// Checks on the configured solution.
    Solution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub suites: Vec<Suite>,
    /// Finite-difference step of the geometry and shape-derivative checks.
    pub tau: f64,
    /// Chart nodes per direction in the geometry suite.
    pub geometry_quadrature: usize,
    /// Seeded test functions per weak-form and maximizer check.
    pub tests: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            suites: vec![Suite::Geometry, Suite::Solution],
            tau: 1e-5,
            geometry_quadrature: 128,
            tests: 20,
        }
    }
}

impl RunConfig {
    /// Every violated invariant as `(path, reason)`.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = self.geometry.violations();
        out.extend(prefixed("physics", self.physics.violations()));
        out.extend(prefixed("source", self.source.violations()));
        out.extend(prefixed("boundary", self.boundary.violations()));
        out.extend(self.numerics.violations());
        if let Some(b) = &self.bending {
            out.extend(b.violations());
        }
        if let GeometryConfig::Sdf3d { .. } = self.geometry {
            if let Some(s) = self.sdf() {
                out.extend(prefixed("geometry", s.violations()));
            }
            if self.numerics.grid % 2 == 0 {
                out.push((
                    "numerics.grid".into(),
                    format!("must be odd so the centre is a node, got {}", self.numerics.grid),
                ));
            }
        } else if let Some(g) = self.radial() {
            // Resolution limits the layout checks above do not cover.
            if self.geometry.violations().is_empty() {
                if let Err(e) = g.segment_counts() {
                    out.push(("numerics.cells".into(), e.to_string()));
                }
            }
        }
        if self.output.prefix.is_empty() || self.output.prefix.contains(['/', '\\']) {
            out.push((
                "output.prefix".into(),
                "must be a non-empty file stem without separators".into(),
            ));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                out.push(("sweep.values".into(), "must not be empty".into()));
            }
            if s.key.starts_with("sweep") {
                out.push(("sweep.key".into(), "cannot sweep the sweep block".into()));
            }
        }
        if !(self.verify.tau > 0.0) {
            out.push(("verify.tau".into(), "must be positive".into()));
        }
        if self.verify.geometry_quadrature < 8 {
            out.push(("verify.geometry_quadrature".into(), "must be at least 8".into()));
        }
        out
    }

    /// The one-dimensional layout, `None` for grid geometries.
    pub fn radial(&self) -> Option<RadialGeometry> {
        let grading = self.numerics.graded.then(Grading::default);
        let g = match self.geometry {
            GeometryConfig::Spherical { r_c, r_e, outer, cavity } => {
                let mut g = RadialGeometry::spherical(r_c, r_e, outer, self.numerics.cells);
                g.cavity = cavity;
                g
            }
            GeometryConfig::Planar { z_c, z_e, length } => {
                RadialGeometry::planar(z_c, z_e, length, self.numerics.cells)
            }
            GeometryConfig::Sdf3d { .. } => return None,
        };
        Some(g.with_grading(grading))
    }

    pub fn sdf(&self) -> Option<RegionSdf> {
        match self.geometry {
            GeometryConfig::Sdf3d { r_c, r_e, half_width } => {
                Some(RegionSdf::concentric(r_c, r_e, half_width, self.numerics.grid))
            }
            _ => None,
        }
    }

    pub fn radial_case(&self) -> Option<RadialCase> {
        Some(RadialCase {
            params: self.physics.clone(),
            geometry: self.radial()?,
            source: self.source.clone(),
            bc: self.boundary.clone(),
            options: self.numerics.solver_options(),
        })
    }

    /// Short hash of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        fingerprint(&serde_json::to_vec(self).unwrap_or_default())
    }
}

/// Qualifies field names from an embedded type with its section.
fn prefixed(section: &str, v: Vec<(String, String)>) -> Vec<(String, String)> {
    v.into_iter()
        .map(|(f, r)| {
            if f.starts_with(section) {
                (f, r)
            } else {
                (format!("{section}.{f}"), r)
            }
        })
        .collect()
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = toml::de::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            CliError::Config(inner.to_string())
        } else {
            CliError::Config(format!("at `{path}`: {inner}"))
        }
    })?;
    let v = config.violations();
    if v.is_empty() {
        Ok(config)
    } else {
        Err(CliError::Invalid(v))
    }
}

/// Sets the dotted `key` to `value` and parses the result. Integer fields
/// stay integers.
pub fn with_override(text: &str, key: &str, value: f64) -> Result<RunConfig, CliError> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts
        .split_last()
        .ok_or_else(|| CliError::Config("empty sweep key".into()))?;
    let mut node = &mut table;
    for p in path {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("sweep key `{key}`: `{p}` is not a table")))?;
    }
    let new = match node.get(*last) {
        Some(toml::Value::Integer(_)) if value.fract() == 0.0 => toml::Value::Integer(value as i64),
        _ => toml::Value::Float(value),
    };
    node.insert(last.to_string(), new);
    parse_config(&table.to_string())
}
