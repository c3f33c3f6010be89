//! Vertex-centred Cartesian solver for geometries given by signed-distance
//! functions.
//!
//! Each node owns the cube of side `h` around it. Edge conductances use
//! the harmonic mean of the two dielectric values weighted by where the
//! level set cuts the edge, the ionic term is weighted by the solvent
//! fraction of the cube, and lipid charge is spread over the faces with a
//! cosine delta. The discrete system is the stationarity condition of a
//! discrete `G_h`, which Newton maximises with a Jacobi-preconditioned
//! conjugate gradient for each step.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{pool_name, EnergyBreakdown, NamedTerm};
use crate::error::{Error, Result};
use crate::force::TraceSample;
use crate::geometry::{ParametricSurface, Vec3};
use crate::lipid::{self, Face, FaceSamples};
use crate::model::{
    b_double_prime, b_energy, b_prime, BoundaryData, GammaKind, PhysicalParams, SourceCharge,
};
use crate::radial::Region;

/// Signed distance, positive outside a sphere or on the side a plane's
/// normal points to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sdf {
    Sphere { center: [f64; 3], radius: f64 },
    Plane { point: [f64; 3], normal: [f64; 3] },
    Complement { inner: Box<Sdf> },
}

impl Sdf {
    pub fn sphere(radius: f64) -> Self {
        Sdf::Sphere {
            center: [0.0; 3],
            radius,
        }
    }

    pub fn complement(self) -> Self {
        Sdf::Complement {
            inner: Box::new(self),
        }
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        match self {
            Sdf::Sphere { center, radius } => (x - Vec3::from(*center)).norm() - radius,
            Sdf::Plane { point, normal } => {
                (x - Vec3::from(*point)).dot(&Vec3::from(*normal).normalize())
            }
            Sdf::Complement { inner } => -inner.value(x),
        }
    }

    /// Unit gradient; undefined at a sphere's centre, where `e_z` is returned.
    pub fn gradient(&self, x: &Vec3) -> Vec3 {
        match self {
            Sdf::Sphere { center, .. } => {
                let d = x - Vec3::from(*center);
                let n = d.norm();
                if n == 0.0 {
                    Vec3::z()
                } else {
                    d / n
                }
            }
            Sdf::Plane { normal, .. } => Vec3::from(*normal).normalize(),
            Sdf::Complement { inner } => -inner.gradient(x),
        }
    }

    fn violations(&self, field: &str) -> Vec<(String, String)> {
        match self {
            Sdf::Sphere { radius, center }
                if !(*radius > 0.0) || center.iter().any(|c| !c.is_finite()) =>
            {
                vec![(
                    field.into(),
                    format!("sphere needs a positive radius, got {radius}"),
                )]
            }
            Sdf::Plane { normal, .. } if !(Vec3::from(*normal).norm() > 0.0) => {
                vec![(field.into(), "plane normal must be non-zero".into())]
            }
            Sdf::Complement { inner } => inner.violations(field),
            _ => Vec::new(),
        }
    }
}

/// Uniform node grid; `dims` counts nodes along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    /// `n³` nodes on `[-half_width, half_width]³`.
    pub fn cube(half_width: f64, n: usize) -> Self {
        Self {
            origin: [-half_width; 3],
            spacing: 2.0 * half_width / (n.max(2) - 1) as f64,
            dims: [n; 3],
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.spacing;
        Vec3::new(
            self.origin[0] + i as f64 * h,
            self.origin[1] + j as f64 * h,
            self.origin[2] + k as f64 * h,
        )
    }

    pub fn is_boundary(&self, i: usize, j: usize, k: usize) -> bool {
        i == 0
            || j == 0
            || k == 0
            || i + 1 == self.dims[0]
            || j + 1 == self.dims[1]
            || k + 1 == self.dims[2]
    }

    fn upper(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + (self.dims[a] - 1) as f64 * self.spacing)
    }

    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            out.push((
                "grid.spacing".into(),
                format!("must be positive, got {}", self.spacing),
            ));
        }
        if self.dims.iter().any(|d| *d < 5) {
            out.push((
                "grid.dims".into(),
                format!("need at least 5 nodes per axis, got {:?}", self.dims),
            ));
        }
        out
    }
}

/// Regions of a Cartesian problem.
///
/// Each face level set is positive on its solvent side, so the membrane is
/// where both are negative and the face normal `∇sdf` points into the
/// solvent. The protein is where its level set is negative and takes
/// precedence over the other regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSdf {
    pub grid: GridSpec,
    /// `[Γ_c, Γ_e]`.
    #[serde(default)]
    pub faces: Option<[Sdf; 2]>,
    #[serde(default)]
    pub protein: Option<Sdf>,
}

impl RegionSdf {
    /// Spherical membrane shell between radii `r_c < r_e`, solvent inside
    /// and outside, on an `n³` cube.
    pub fn concentric(r_c: f64, r_e: f64, half_width: f64, n: usize) -> Self {
        Self {
            grid: GridSpec::cube(half_width, n),
            faces: Some([Sdf::sphere(r_c).complement(), Sdf::sphere(r_e)]),
            protein: None,
        }
    }

    /// Signed distance to the solvent: positive in solvent.
    fn solvent_distance(&self, x: &Vec3) -> f64 {
        let mut d = match &self.faces {
            Some([c, e]) => c.value(x).max(e.value(x)),
            None => f64::INFINITY,
        };
        if let Some(p) = &self.protein {
            d = d.min(p.value(x));
        }
        d
    }

    pub fn classify(&self, x: &Vec3) -> Region {
        if self.protein.as_ref().is_some_and(|p| p.value(x) < 0.0) {
            Region::Protein
        } else if self.solvent_distance(x) < 0.0 {
            Region::Membrane
        } else {
            Region::Solvent
        }
    }

    pub fn labels(&self) -> Vec<Region> {
        let g = self.grid;
        (0..g.len())
            .map(|idx| {
                let [i, j, k] = g.coords(idx);
                self.classify(&g.point(i, j, k))
            })
            .collect()
    }

    pub fn face_sdf(&self, face: Face) -> Option<&Sdf> {
        self.faces.as_ref().map(|f| &f[face.index()])
    }

    /// Level set separating two different regions.
    fn interface_value(&self, a: Region, b: Region, x: &Vec3) -> f64 {
        if a == Region::Protein || b == Region::Protein {
            self.protein.as_ref().map_or(0.0, |p| p.value(x))
        } else {
            self.solvent_distance(x)
        }
    }

    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = self.grid.violations();
        if let Some([c, e]) = &self.faces {
            out.extend(c.violations("regions.faces[0]"));
            out.extend(e.violations("regions.faces[1]"));
        }
        if let Some(p) = &self.protein {
            out.extend(p.violations("regions.protein"));
        }
        if !out.is_empty() {
            return out;
        }
        let g = self.grid;
        let h = g.spacing;
        let Some([c, e]) = &self.faces else {
            return out;
        };
        // Shell thickness: next to either face the other level set must be
        // at least 3h away, and both must have unit slope there.
        let mut thin = f64::INFINITY;
        let mut slope_error = 0.0f64;
        for idx in 0..g.len() {
            let [i, j, k] = g.coords(idx);
            let x = g.point(i, j, k);
            for (near, far) in [(c, e), (e, c)] {
                let d = near.value(&x);
                if d.abs() <= 0.5 * h && far.value(&x) < 0.0 {
                    thin = thin.min(-far.value(&x) - d.abs());
                    let fd = Vec3::from(std::array::from_fn::<f64, 3, _>(|a| {
                        let mut dx = Vec3::zeros();
                        dx[a] = 0.25 * h;
                        (near.value(&(x + dx)) - near.value(&(x - dx))) / (0.5 * h)
                    }));
                    slope_error = slope_error.max((fd.norm() - 1.0).abs());
                }
            }
        }
        if thin.is_finite() && thin < 3.0 * h {
            out.push((
                "regions.faces".into(),
                format!(
                    "membrane thickness {thin:.3e} is below 3h = {:.3e}",
                    3.0 * h
                ),
            ));
        }
        if !thin.is_finite() {
            out.push((
                "regions.faces".into(),
                "no membrane nodes on the grid".into(),
            ));
        }
        if slope_error > 1e-2 {
            out.push((
                "regions.faces".into(),
                format!("level sets are not distance functions near the faces (||∇d| - 1| = {slope_error:.2e})"),
            ));
        }
        out
    }
}

/// Cosine delta of support `[-h, h]`, integrating to one.
pub fn cosine_delta(d: f64, h: f64) -> f64 {
    if d.abs() >= h {
        0.0
    } else {
        0.5 / h * (1.0 + (std::f64::consts::PI * d / h).cos())
    }
}

/// How lipid charge reaches the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChargeSpreading {
    /// Each grid edge cut by a face carries the area `h²|n_a|`. Its
    /// interface potential and its charge are shared by the two end nodes
    /// in the ratio `ε / distance`, as eliminating the interface value from
    /// a flux-continuous edge gives.
    #[default]
    EdgeCrossing,
    /// Cosine delta of support `[-h, h]` in the level-set value, one site
    /// per node.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Solver3dOptions {
    /// Target for `max|R_i| / max_i Σ|terms of R_i|`.
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Relative residual reduction asked of each inner solve.
    pub linear_tol: f64,
    pub max_linear: usize,
    #[serde(default)]
    pub spreading: ChargeSpreading,
}

impl Default for Solver3dOptions {
    fn default() -> Self {
        Self {
            newton_tol: 1e-10,
            max_newton: 40,
            linear_tol: 1e-8,
            max_linear: 20_000,
            spreading: ChargeSpreading::default(),
        }
    }
}

/// A piece of face area whose potential is a weighted sum of node values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceSite {
    pub area: f64,
    /// `(node, weight)`, weights summing to one.
    pub nodes: Vec<(usize, f64)>,
}

impl FaceSite {
    fn phi(&self, phi: &[f64]) -> f64 {
        self.nodes.iter().map(|(i, w)| w * phi[*i]).sum()
    }
}

/// Lipid pool spread over grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPool {
    pub faces: Vec<Face>,
    pub pool: f64,
    pub sites: Vec<FaceSite>,
}

impl GridPool {
    pub fn area(&self) -> f64 {
        self.sites.iter().map(|s| s.area).sum()
    }

    /// Largest exponent and `Σ A e^{-q_l β φ - top}` over the sites.
    fn weights(&self, params: &PhysicalParams, phi: &[f64]) -> (f64, Vec<f64>, f64) {
        let s = -params.lipid_charge * params.beta;
        let e: Vec<f64> = self.sites.iter().map(|site| s * site.phi(phi)).collect();
        let top = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = e.iter().map(|e| (e - top).exp()).collect();
        let total = w
            .iter()
            .zip(&self.sites)
            .map(|(w, site)| w * site.area)
            .sum();
        (top, w, total)
    }

    /// `ρ = C w / Σ A w` at each site, with `w = e^{-q_l β φ}`.
    pub fn density(&self, params: &PhysicalParams, phi: &[f64]) -> Vec<f64> {
        let (_, w, total) = self.weights(params, phi);
        w.into_iter().map(|w| self.pool * w / total).collect()
    }

    /// `ρ` at a point where the potential is `phi_at`.
    pub fn density_at(&self, params: &PhysicalParams, phi: &[f64], phi_at: f64) -> f64 {
        let (top, _, total) = self.weights(params, phi);
        self.pool * (-params.lipid_charge * params.beta * phi_at - top).exp() / total
    }

    fn entropy(&self, params: &PhysicalParams, phi: &[f64]) -> f64 {
        let (top, _, total) = self.weights(params, phi);
        -self.pool / params.beta * (top + (total / self.area()).ln())
    }
}

/// The assembled Cartesian system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridProblem {
    pub params: PhysicalParams,
    pub regions: RegionSdf,
    pub labels: Vec<Region>,
    /// Conductance `ε_e h` of the edge from each node to its `+x`, `+y`,
    /// `+z` neighbour; zero past the last node.
    pub conductance: [Vec<f64>; 3],
    /// Solvent volume of each node's cube.
    pub solvent_volume: Vec<f64>,
    /// Fixed charge in each node's cube.
    pub source: Vec<f64>,
    /// Dirichlet values, used on boundary nodes only.
    pub dirichlet: Vec<f64>,
    pub pools: Vec<GridPool>,
}

fn eps_of(params: &PhysicalParams, r: Region) -> f64 {
    match r {
        Region::Solvent => params.eps_s,
        Region::Membrane => params.eps_m,
        Region::Protein => params.eps_p,
    }
}

impl GridProblem {
    pub fn assemble(
        params: &PhysicalParams,
        regions: &RegionSdf,
        source: &SourceCharge,
        bc: &BoundaryData,
        spreading: ChargeSpreading,
    ) -> Result<Self> {
        let mut v = params.violations();
        v.extend(regions.violations());
        v.extend(source.violations());
        v.extend(bc.violations());
        if let Some((field, reason)) = v.into_iter().next() {
            return Err(Error::Invalid { field, reason });
        }
        if !matches!(params.gamma_kind, GammaKind::Boltzmann) {
            return Err(Error::invalid(
                "gamma_kind",
                "the Cartesian solver supports the Boltzmann kind only",
            ));
        }
        let g = regions.grid;
        let h = g.spacing;
        let labels = regions.labels();
        let n = g.len();
        let points: Vec<Vec3> = (0..n)
            .map(|idx| {
                let [i, j, k] = g.coords(idx);
                g.point(i, j, k)
            })
            .collect();

        let mut conductance = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (axis, cond) in conductance.iter_mut().enumerate() {
            let stride = [1, g.dims[0], g.dims[0] * g.dims[1]][axis];
            for idx in 0..n {
                if g.coords(idx)[axis] + 1 == g.dims[axis] {
                    continue;
                }
                let jdx = idx + stride;
                let (ra, rb) = (labels[idx], labels[jdx]);
                let (ea, eb) = (eps_of(params, ra), eps_of(params, rb));
                let eps = if ra == rb {
                    ea
                } else {
                    let (da, db) = (
                        regions.interface_value(ra, rb, &points[idx]),
                        regions.interface_value(ra, rb, &points[jdx]),
                    );
                    let theta = if da == db {
                        0.5
                    } else {
                        (da / (da - db)).clamp(0.0, 1.0)
                    };
                    1.0 / (theta / ea + (1.0 - theta) / eb)
                };
                cond[idx] = eps * h;
            }
        }

        let cube = h * h * h;
        let has_ions = !params.ions.is_empty();
        let solvent_volume: Vec<f64> = points
            .iter()
            .map(|x| {
                if has_ions {
                    cube * (0.5 + regions.solvent_distance(x) / h).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let source_density: Vec<f64> = points
            .iter()
            .map(|x| {
                let lo = [x.x - 0.5 * h, x.y - 0.5 * h, x.z - 0.5 * h];
                let hi = [x.x + 0.5 * h, x.y + 0.5 * h, x.z + 0.5 * h];
                if source.is_empty() {
                    0.0
                } else {
                    source.box_charge(lo, hi)
                }
            })
            .collect();
        let dirichlet: Vec<f64> = points
            .iter()
            .map(|x| bc.eval([x.x, x.y, x.z], source))
            .collect();

        let mut pools = Vec::new();
        if regions.faces.is_some() && params.lipid_charge != 0.0 {
            for (faces, pool) in lipid::pool_groups(params) {
                if pool == 0.0 {
                    continue;
                }
                let mut sites = Vec::new();
                for face in &faces {
                    let sdf = regions.face_sdf(*face).expect("faces present");
                    let values: Vec<f64> = points.iter().map(|x| sdf.value(x)).collect();
                    match spreading {
                        ChargeSpreading::Cosine => {
                            for (idx, d) in values.iter().enumerate() {
                                let area = cosine_delta(*d, h) * cube;
                                if area > 0.0 {
                                    sites.push(FaceSite {
                                        area,
                                        nodes: vec![(idx, 1.0)],
                                    });
                                }
                            }
                        }
                        ChargeSpreading::EdgeCrossing => {
                            let st = [1, g.dims[0], g.dims[0] * g.dims[1]];
                            for idx in 0..n {
                                let c = g.coords(idx);
                                for a in 0..3 {
                                    if c[a] + 1 == g.dims[a] {
                                        continue;
                                    }
                                    let jdx = idx + st[a];
                                    let (di, dj) = (values[idx], values[jdx]);
                                    if (di >= 0.0) == (dj >= 0.0) {
                                        continue;
                                    }
                                    let theta = di / (di - dj);
                                    let mut cut = points[idx];
                                    cut[a] += theta * h;
                                    let area = h * h * sdf.gradient(&cut)[a].abs();
                                    let (ei, ej) =
                                        (eps_of(params, labels[idx]), eps_of(params, labels[jdx]));
                                    let wi = ei * (1.0 - theta) / (ei * (1.0 - theta) + ej * theta);
                                    sites.push(FaceSite {
                                        area,
                                        nodes: vec![(idx, wi), (jdx, 1.0 - wi)],
                                    });
                                }
                            }
                        }
                    }
                }
                for site in &sites {
                    for (idx, _) in &site.nodes {
                        let [i, j, k] = g.coords(*idx);
                        if g.is_boundary(i, j, k) {
                            return Err(Error::UnderResolved(
                                "a lipid face reaches the box boundary".into(),
                            ));
                        }
                    }
                }
                if sites.is_empty() {
                    return Err(Error::UnderResolved(
                        "lipid face misses every grid node".into(),
                    ));
                }
                pools.push(GridPool { faces, pool, sites });
            }
        }

        Ok(Self {
            params: params.clone(),
            regions: regions.clone(),
            labels,
            conductance,
            solvent_volume,
            source: source_density,
            dirichlet,
            pools,
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.regions.grid
    }

    fn interior(&self) -> Vec<bool> {
        let g = self.grid();
        (0..g.len())
            .map(|idx| {
                let [i, j, k] = g.coords(idx);
                !g.is_boundary(i, j, k)
            })
            .collect()
    }

    fn strides(&self) -> [usize; 3] {
        let d = self.grid().dims;
        [1, d[0], d[0] * d[1]]
    }

    /// Residual `R_i = ∂G_h/∂φ_i` at interior nodes and its scale
    /// `Σ|terms|`; zero on the boundary.
    pub fn residual(&self, phi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = phi.len();
        let g = self.grid();
        let st = self.strides();
        let mut res = vec![0.0; n];
        let mut scale = vec![0.0; n];
        let p = &self.params;
        for idx in 0..n {
            let c = g.coords(idx);
            if g.is_boundary(c[0], c[1], c[2]) {
                continue;
            }
            let mut r = self.source[idx];
            let mut s = self.source[idx].abs();
            for a in 0..3 {
                let (up, down) = (idx + st[a], idx - st[a]);
                let (cu, cd) = (self.conductance[a][idx], self.conductance[a][down]);
                r += cu * (phi[up] - phi[idx]) + cd * (phi[down] - phi[idx]);
                s +=
                    cu * (phi[up].abs() + phi[idx].abs()) + cd * (phi[down].abs() + phi[idx].abs());
            }
            let v = self.solvent_volume[idx];
            if v > 0.0 {
                let b = v * b_prime(phi[idx], p)?;
                r -= b;
                s += b.abs();
            }
            res[idx] = r;
            scale[idx] = s;
        }
        for pool in &self.pools {
            let rho = pool.density(p, phi);
            for (site, rho) in pool.sites.iter().zip(rho) {
                for (idx, w) in &site.nodes {
                    let c = g.coords(*idx);
                    if g.is_boundary(c[0], c[1], c[2]) {
                        continue;
                    }
                    let q = p.lipid_charge * site.area * rho * w;
                    res[*idx] += q;
                    scale[*idx] += q.abs();
                }
            }
        }
        Ok((res, scale))
    }

    fn normalised(res: &[f64], scale: &[f64]) -> f64 {
        let r = res.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let s = scale.iter().fold(0.0f64, |m, v| m.max(*v));
        if s == 0.0 {
            0.0
        } else {
            r / s
        }
    }

    /// Discrete `G_h[φ]` by cell sums.
    pub fn energy(&self, phi: &[f64]) -> Result<EnergyBreakdown> {
        let g = self.grid();
        let st = self.strides();
        let p = &self.params;
        let mut field = 0.0;
        let mut source = 0.0;
        let mut ionic = 0.0;
        for idx in 0..phi.len() {
            let c = g.coords(idx);
            for a in 0..3 {
                if c[a] + 1 < g.dims[a] {
                    field += self.conductance[a][idx] * (phi[idx + st[a]] - phi[idx]).powi(2);
                }
            }
            source += self.source[idx] * phi[idx];
            let v = self.solvent_volume[idx];
            if v > 0.0 {
                ionic += v * b_energy(phi[idx], p)?;
            }
        }
        let entropy = self
            .pools
            .iter()
            .map(|pool| NamedTerm::new(pool_name(&pool.faces), pool.entropy(p, phi)))
            .collect();
        Ok(EnergyBreakdown::new(-0.5 * field, source, -ionic, entropy))
    }

    /// `y = -H p` for the Newton matrix at `φ`, with `p` zero on the boundary.
    fn apply(&self, jac: &Jacobian, p: &[f64], y: &mut [f64]) {
        let g = self.grid();
        let st = self.strides();
        let plane = g.dims[0] * g.dims[1];
        y.par_chunks_mut(plane).enumerate().for_each(|(k, out)| {
            if k == 0 || k + 1 == g.dims[2] {
                out.fill(0.0);
                return;
            }
            for (local, o) in out.iter_mut().enumerate() {
                let idx = k * plane + local;
                if !jac.interior[idx] {
                    *o = 0.0;
                    continue;
                }
                let mut acc = jac.diag_extra[idx] * p[idx];
                for a in 0..3 {
                    let (up, down) = (idx + st[a], idx - st[a]);
                    acc += self.conductance[a][idx] * (p[idx] - p[up])
                        + self.conductance[a][down] * (p[idx] - p[down]);
                }
                *o = acc;
            }
        });
        for pool in &jac.pools {
            let mut total = 0.0;
            for (nodes, coef) in &pool.blocks {
                let d: f64 = nodes.iter().map(|(i, w)| w * p[*i]).sum();
                total += coef * d;
                for (i, w) in nodes {
                    if jac.interior[*i] {
                        y[*i] += coef * w * d;
                    }
                }
            }
            for (nodes, coef) in &pool.blocks {
                for (i, w) in nodes {
                    if jac.interior[*i] {
                        y[*i] -= coef * w * total / pool.divisor;
                    }
                }
            }
        }
    }

    fn jacobian(&self, phi: &[f64], interior: &[bool]) -> Result<Jacobian> {
        let p = &self.params;
        let mut diag_extra = vec![0.0; phi.len()];
        for (idx, v) in self.solvent_volume.iter().enumerate() {
            if *v > 0.0 && interior[idx] {
                diag_extra[idx] = v * b_double_prime(phi[idx], p)?;
            }
        }
        // Each site adds coef ω ωᵀ, each pool -(Σ coef ω)(Σ coef ω)ᵀ / (β q_l² C).
        let coupling = p.beta * p.lipid_charge * p.lipid_charge;
        let mut site_diag = vec![0.0; phi.len()];
        let mut pools = Vec::new();
        for pool in &self.pools {
            let rho = pool.density(p, phi);
            let blocks: Vec<(Vec<(usize, f64)>, f64)> = pool
                .sites
                .iter()
                .zip(rho)
                .map(|(site, r)| (site.nodes.clone(), coupling * site.area * r))
                .collect();
            for (nodes, coef) in &blocks {
                for (i, w) in nodes {
                    site_diag[*i] += coef * w * w;
                }
            }
            pools.push(PoolJacobian {
                blocks,
                divisor: coupling * pool.pool,
            });
        }
        let st = self.strides();
        let precond = (0..phi.len())
            .map(|idx| {
                if !interior[idx] {
                    return 1.0;
                }
                let mut d = diag_extra[idx] + site_diag[idx];
                for a in 0..3 {
                    d += self.conductance[a][idx] + self.conductance[a][idx - st[a]];
                }
                1.0 / d
            })
            .collect();
        Ok(Jacobian {
            diag_extra,
            pools,
            precond,
            interior: interior.to_vec(),
        })
    }

    /// Jacobi-preconditioned conjugate gradient for `-H δ = r`.
    fn pcg(
        &self,
        jac: &Jacobian,
        rhs: &[f64],
        opts: &Solver3dOptions,
    ) -> Result<(Vec<f64>, usize)> {
        let n = rhs.len();
        let mut x = vec![0.0; n];
        let mut r = rhs.to_vec();
        let norm0 = dot(&r, &r).sqrt();
        if norm0 == 0.0 {
            return Ok((x, 0));
        }
        let mut z: Vec<f64> = r.iter().zip(&jac.precond).map(|(a, b)| a * b).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; n];
        for it in 1..=opts.max_linear {
            self.apply(jac, &p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            x.par_iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
            r.par_iter_mut().zip(&ap).for_each(|(r, a)| *r -= alpha * a);
            let rel = dot(&r, &r).sqrt() / norm0;
            if rel <= opts.linear_tol {
                return Ok((x, it));
            }
            z.par_iter_mut()
                .zip(&r)
                .zip(&jac.precond)
                .for_each(|((z, r), m)| *z = r * m);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            p.par_iter_mut()
                .zip(&z)
                .for_each(|(p, z)| *p = z + beta * *p);
        }
        Err(Error::LinearSolverStagnation {
            iterations: opts.max_linear,
            residual: dot(&r, &r).sqrt() / norm0,
        })
    }

    /// Initial field: Dirichlet data on the boundary, zero inside.
    pub fn initial_guess(&self) -> Vec<f64> {
        let interior = self.interior();
        self.dirichlet
            .iter()
            .zip(&interior)
            .map(|(g, inside)| if *inside { 0.0 } else { *g })
            .collect()
    }
}

struct PoolJacobian {
    blocks: Vec<(Vec<(usize, f64)>, f64)>,
    divisor: f64,
}

struct Jacobian {
    diag_extra: Vec<f64>,
    pools: Vec<PoolJacobian>,
    precond: Vec<f64>,
    interior: Vec<bool>,
}

/// Fixed chunks summed in order, so the result does not depend on the thread count.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    const CHUNK: usize = 4096;
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(a, b)| a.iter().zip(b).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    partial.iter().sum()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Solve3dDiagnostics {
    pub newton_iterations: usize,
    pub linear_iterations: Vec<usize>,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub damping_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSolution {
    pub problem: GridProblem,
    pub phi: Vec<f64>,
    pub diagnostics: Solve3dDiagnostics,
}

pub fn assemble_and_solve_3d(
    params: &PhysicalParams,
    regions: &RegionSdf,
    source: &SourceCharge,
    bc: &BoundaryData,
    opts: &Solver3dOptions,
) -> Result<GridSolution> {
    solve_grid(
        GridProblem::assemble(params, regions, source, bc, opts.spreading)?,
        opts,
    )
}

pub fn solve_grid(problem: GridProblem, opts: &Solver3dOptions) -> Result<GridSolution> {
    let interior = problem.interior();
    let mut phi = problem.initial_guess();
    let (mut res, mut scale) = problem.residual(&phi)?;
    let mut history = vec![GridProblem::normalised(&res, &scale)];
    let mut damping = Vec::new();
    let mut linear = Vec::new();
    while *history.last().unwrap() > opts.newton_tol {
        if damping.len() >= opts.max_newton {
            return Err(Error::NewtonDiverged {
                iterations: damping.len(),
                residual: *history.last().unwrap(),
                damping,
            });
        }
        let jac = problem.jacobian(&phi, &interior)?;
        let (delta, its) = problem.pcg(&jac, &res, opts)?;
        linear.push(its);
        let norm0 = dot(&res, &res).sqrt();
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = phi
                .iter()
                .zip(&delta)
                .map(|(p, d)| p + lambda * d)
                .collect();
            match problem.residual(&trial) {
                Ok((r, s))
                    if dot(&r, &r).sqrt() <= (1.0 - 1e-4 * lambda) * norm0
                        || GridProblem::normalised(&r, &s) <= opts.newton_tol =>
                {
                    phi = trial;
                    res = r;
                    scale = s;
                    break;
                }
                Ok(_) | Err(Error::Range { .. }) => {
                    lambda *= 0.5;
                    if lambda < 1e-10 {
                        return Err(Error::NewtonDiverged {
                            iterations: damping.len(),
                            residual: *history.last().unwrap(),
                            damping,
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        }
        damping.push(lambda);
        history.push(GridProblem::normalised(&res, &scale));
        log::debug!(
            "newton {}: residual {:e}, {} CG iterations",
            damping.len(),
            history.last().unwrap(),
            its
        );
    }
    Ok(GridSolution {
        diagnostics: Solve3dDiagnostics {
            newton_iterations: damping.len(),
            linear_iterations: linear,
            residual: *history.last().unwrap(),
            residual_history: history,
            damping_history: damping,
        },
        problem,
        phi,
    })
}

impl GridSolution {
    pub fn grid(&self) -> GridSpec {
        self.problem.grid()
    }

    /// Trilinear interpolation of `φ`.
    pub fn eval(&self, x: &Vec3) -> Result<f64> {
        let g = self.grid();
        let h = g.spacing;
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let s = (x[a] - g.origin[a]) / h;
            if !(s >= 0.0 && s <= (g.dims[a] - 1) as f64) {
                return Err(Error::invalid(
                    "point",
                    format!("{x:?} lies outside the grid"),
                ));
            }
            let b = (s.floor() as usize).min(g.dims[a] - 2);
            base[a] = b;
            t[a] = s - b as f64;
        }
        let mut v = 0.0;
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let w: f64 = (0..3)
                .map(|a| if o[a] == 1 { t[a] } else { 1.0 - t[a] })
                .product();
            if w != 0.0 {
                v += w * self.phi[g.index(base[0] + o[0], base[1] + o[1], base[2] + o[2])];
            }
        }
        Ok(v)
    }

    pub fn energy(&self) -> Result<EnergyBreakdown> {
        self.problem.energy(&self.phi)
    }

    /// Pool densities at their face sites.
    pub fn grid_density(&self) -> Vec<Vec<f64>> {
        self.problem
            .pools
            .iter()
            .map(|p| p.density(&self.problem.params, &self.phi))
            .collect()
    }

    /// Lipid count the sites put on the grid per pool, `Σ A ρ`.
    pub fn spread_charge(&self) -> Vec<f64> {
        self.problem
            .pools
            .iter()
            .zip(self.grid_density())
            .map(|(p, rho)| p.sites.iter().zip(rho).map(|(site, r)| site.area * r).sum())
            .collect()
    }
}

/// Offsets of the one-sided probes, in grid spacings.
pub const PROBE_OFFSETS: [f64; 3] = [1.5, 2.5, 3.5];

/// Value and slope at 0 of the parabola through `(s_k, f_k)`.
fn extrapolate(s: [f64; 3], f: [f64; 3]) -> (f64, f64) {
    let mut value = 0.0;
    let mut slope = 0.0;
    for k in 0..3 {
        let (a, b) = ((k + 1) % 3, (k + 2) % 3);
        let denom = (s[k] - s[a]) * (s[k] - s[b]);
        value += f[k] * s[a] * s[b] / denom;
        slope += f[k] * -(s[a] + s[b]) / denom;
    }
    (value, slope)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTraces {
    pub face: Face,
    pub positions: Vec<[f64; 3]>,
    pub samples: Vec<TraceSample>,
    pub jump_residuals: Vec<f64>,
}

impl GridTraces {
    pub fn max_jump_residual(&self) -> f64 {
        self.jump_residuals
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// How normal traces are read off the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridTraceMethod {
    /// Probe extrapolation on the low-ε side, the other side from the
    /// jump condition. The recovered trace inherits the probe error
    /// scaled by the ε ratio.
    #[default]
    JumpRecovery,
    /// Probe extrapolation on both sides.
    Probes,
}

/// Traces at the quadrature nodes of `surface`, whose normal must point
/// into the solvent.
pub fn extract_traces_3d(
    solution: &GridSolution,
    face: Face,
    surface: &ParametricSurface,
) -> Result<GridTraces> {
    extract_traces_3d_with(solution, face, surface, GridTraceMethod::default())
}

pub fn extract_traces_3d_with(
    solution: &GridSolution,
    face: Face,
    surface: &ParametricSurface,
    method: GridTraceMethod,
) -> Result<GridTraces> {
    let regions = &solution.problem.regions;
    let sdf = regions
        .face_sdf(face)
        .ok_or_else(|| Error::invalid("regions.faces", "solution has no membrane faces"))?;
    let h = solution.grid().spacing;
    let params = &solution.problem.params;
    let expect = |x: &Vec3, region: Region, offset: f64| {
        if regions.classify(x) == region {
            Ok(())
        } else {
            Err(Error::ProbeOutsideRegion {
                offset,
                side: if region == Region::Solvent {
                    "solvent"
                } else {
                    "membrane"
                },
            })
        }
    };
    // φ and its normal slope on each side at a surface point.
    let sides = |x: &Vec3, n: &Vec3| -> Result<[(f64, f64); 2]> {
        let mut out = [(0.0, 0.0); 2];
        for (side, (sign, region)) in [(1.0, Region::Solvent), (-1.0, Region::Membrane)]
            .into_iter()
            .enumerate()
        {
            let mut f = [0.0; 3];
            for (k, o) in PROBE_OFFSETS.iter().enumerate() {
                let p = x + n * (sign * o * h);
                expect(&p, region, sign * o * h)?;
                f[k] = solution.eval(&p)?;
            }
            let (v, slope) = extrapolate(PROBE_OFFSETS.map(|o| sign * o * h), f);
            out[side] = (v, slope);
        }
        Ok(out)
    };

    let frames = surface.frames()?;
    let nodes = surface.nodes();
    let mut positions = Vec::with_capacity(frames.len());
    let mut phis = Vec::with_capacity(frames.len());
    let mut normals = Vec::with_capacity(frames.len());
    let mut tangential = Vec::with_capacity(frames.len());
    for (fr, node) in frames.iter().zip(&nodes) {
        if (sdf.value(&fr.r)).abs() > h {
            return Err(Error::invalid(
                "surface",
                format!(
                    "node {:?} is {:.3e} from the {} level set",
                    fr.r,
                    sdf.value(&fr.r),
                    face.name()
                ),
            ));
        }
        if fr.n.dot(&sdf.gradient(&fr.r)) <= 0.0 {
            return Err(Error::invalid(
                "surface",
                "normal must point into the solvent",
            ));
        }
        let [(vs, a), (vm, b)] = sides(&fr.r, &fr.n)?;
        // Tangential gradient from central differences of the face value
        // along the chart, one grid spacing apart in space.
        // The chart normal can flip past a pole, so offset points probe
        // along the level-set normal.
        let face_value = |u: f64, v: f64| -> Result<f64> {
            let r = surface.frame(u, v)?.r;
            let [(vs, _), (vm, _)] = sides(&r, &sdf.gradient(&r))?;
            Ok(0.5 * (vs + vm))
        };
        let du = h / (fr.r_u.norm()).max(1e-300);
        let dv = h / (fr.r_v.norm()).max(1e-300);
        let gu = (face_value(node.u + du, node.v)? - face_value(node.u - du, node.v)?) / (2.0 * du);
        let gv = (face_value(node.u, node.v + dv)? - face_value(node.u, node.v - dv)?) / (2.0 * dv);
        let gt = fr.gradient_from_partials(gu, gv);
        positions.push([fr.r.x, fr.r.y, fr.r.z]);
        phis.push(0.5 * (vs + vm));
        normals.push((a, b));
        tangential.push([gt.x, gt.y, gt.z]);
    }
    let pool = match face {
        Face::Cytosolic => params.lipid_pool.cytosolic,
        Face::Exoplasmic => params.lipid_pool.exoplasmic,
    };
    let rho = if params.lipid_pool.shared {
        // The density of a shared pool needs the other face too; use the
        // grid normalisation, which covers both.
        match solution
            .problem
            .pools
            .iter()
            .find(|p| p.faces.contains(&face))
        {
            Some(gp) => phis
                .iter()
                .map(|v| gp.density_at(params, &solution.phi, *v))
                .collect(),
            None => vec![0.0; phis.len()],
        }
    } else if pool == 0.0 {
        vec![0.0; phis.len()]
    } else {
        let weights = surface.area_weights()?;
        lipid::density(
            params,
            pool,
            &[FaceSamples {
                weights: &weights,
                phi: &phis,
            }],
        )?
        .pop()
        .unwrap_or_default()
    };
    let samples: Vec<TraceSample> = phis
        .iter()
        .zip(&normals)
        .zip(&tangential)
        .zip(&rho)
        .map(|(((phi, (a, b)), t), rho)| {
            let (mut a, mut b) = (*a, *b);
            if method == GridTraceMethod::JumpRecovery {
                let q = params.lipid_charge * rho;
                if params.eps_s >= params.eps_m {
                    a = (params.eps_m * b - q) / params.eps_s;
                } else {
                    b = (params.eps_s * a + q) / params.eps_m;
                }
            }
            TraceSample {
                phi: *phi,
                grad_s_n: a,
                grad_m_n: b,
                grad_t: Some(*t),
                rho: *rho,
            }
        })
        .collect();
    let jump_residuals = samples.iter().map(|s| s.jump_residual(params)).collect();
    Ok(GridTraces {
        face,
        positions,
        samples,
        jump_residuals,
    })
}

/// Header written next to a binary field dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub schema_version: u32,
    pub dims: [usize; 3],
    pub spacing: f64,
    pub origin: [f64; 3],
    /// Index `i + nx (j + ny k)`.
    pub layout: String,
    pub phi_file: String,
    pub phi_dtype: String,
    pub region_file: String,
    pub region_codes: Vec<(String, u8)>,
}

/// Writes `<stem>.phi.bin` (little-endian f64), `<stem>.regions.bin` (u8)
/// and `<stem>.json` into `dir`. Returns the header path.
pub fn write_dump(solution: &GridSolution, dir: &Path, stem: &str) -> std::io::Result<PathBuf> {
    let g = solution.grid();
    let phi_file = format!("{stem}.phi.bin");
    let region_file = format!("{stem}.regions.bin");
    let mut bytes = Vec::with_capacity(8 * solution.phi.len());
    for v in &solution.phi {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(&phi_file), bytes)?;
    let codes: Vec<u8> = solution.problem.labels.iter().map(|r| r.code()).collect();
    fs::write(dir.join(&region_file), codes)?;
    let header = DumpHeader {
        schema_version: 1,
        dims: g.dims,
        spacing: g.spacing,
        origin: g.origin,
        layout: "x-fastest".into(),
        phi_file,
        phi_dtype: "f64-le".into(),
        region_file,
        region_codes: [Region::Solvent, Region::Membrane, Region::Protein]
            .iter()
            .map(|r| (format!("{r:?}").to_lowercase(), r.code()))
            .collect(),
    };
    let path = dir.join(format!("{stem}.json"));
    let mut f = fs::File::create(&path)?;
    f.write_all(
        serde_json::to_string_pretty(&header)
            .map_err(std::io::Error::other)?
            .as_bytes(),
    )?;
    Ok(path)
}

/// Reads back a dump written by [`write_dump`].
pub fn read_dump(header_path: &Path) -> std::io::Result<(DumpHeader, Vec<f64>, Vec<u8>)> {
    let header: DumpHeader =
        serde_json::from_slice(&fs::read(header_path)?).map_err(std::io::Error::other)?;
    let dir = header_path.parent().unwrap_or(Path::new("."));
    let raw = fs::read(dir.join(&header.phi_file))?;
    let phi = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let regions = fs::read(dir.join(&header.region_file))?;
    Ok((header, phi, regions))
}

impl GridSpec {
    /// True when `x` lies inside the box.
    pub fn contains(&self, x: &Vec3) -> bool {
        let hi = self.upper();
        (0..3).all(|a| x[a] >= self.origin[a] && x[a] <= hi[a])
    }
}
