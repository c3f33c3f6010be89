use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const DEGENERATE_AREA: f64 = 1e-12;

/// Closed-form charts in the surface corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// `u` polar angle in `[0, π]`, `v` azimuth in `[0, 2π)`.
    Sphere { center: [f64; 3], radius: f64 },
    /// Same angles as the sphere with semi-axes `(a, b, c)`.
    Ellipsoid { center: [f64; 3], axes: [f64; 3] },
    /// `u` around the symmetry axis, `v` around the tube.
    Torus {
        center: [f64; 3],
        major: f64,
        minor: f64,
    },
    /// `origin + u e1 + v e2` for `(u, v)` in `[0, extent[0]] × [0, extent[1]]`.
    PlanePatch {
        origin: [f64; 3],
        e1: [f64; 3],
        e2: [f64; 3],
        extent: [f64; 2],
    },
}

/// Chart position with first and second partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartJet {
    pub r: Vec3,
    pub r_u: Vec3,
    pub r_v: Vec3,
    pub r_uu: Vec3,
    pub r_uv: Vec3,
    pub r_vv: Vec3,
}

impl Shape {
    pub fn sphere(radius: f64) -> Self {
        Shape::Sphere {
            center: [0.0; 3],
            radius,
        }
    }

    pub fn ellipsoid(a: f64, b: f64, c: f64) -> Self {
        Shape::Ellipsoid {
            center: [0.0; 3],
            axes: [a, b, c],
        }
    }

    pub fn torus(major: f64, minor: f64) -> Self {
        Shape::Torus {
            center: [0.0; 3],
            major,
            minor,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Sphere { .. } => "sphere",
            Shape::Ellipsoid { .. } => "ellipsoid",
            Shape::Torus { .. } => "torus",
            Shape::PlanePatch { .. } => "plane_patch",
        }
    }

    pub fn domain(&self) -> [[f64; 2]; 2] {
        match self {
            Shape::Sphere { .. } | Shape::Ellipsoid { .. } => [[0.0, PI], [0.0, 2.0 * PI]],
            Shape::Torus { .. } => [[0.0, 2.0 * PI], [0.0, 2.0 * PI]],
            Shape::PlanePatch { extent, .. } => [[0.0, extent[0]], [0.0, extent[1]]],
        }
    }

    pub fn periodic(&self) -> [bool; 2] {
        match self {
            Shape::Sphere { .. } | Shape::Ellipsoid { .. } => [false, true],
            Shape::Torus { .. } => [true, true],
            Shape::PlanePatch { .. } => [false, false],
        }
    }

    pub fn is_closed(&self) -> bool {
        !matches!(self, Shape::PlanePatch { .. })
    }

    /// Euler characteristic of the closed surface.
    pub fn euler_characteristic(&self) -> Option<i32> {
        match self {
            Shape::Sphere { .. } | Shape::Ellipsoid { .. } => Some(2),
            Shape::Torus { .. } => Some(0),
            Shape::PlanePatch { .. } => None,
        }
    }

    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        match self {
            Shape::Sphere { radius, .. } if !(*radius > 0.0) => {
                out.push(("radius".into(), format!("must be positive, got {radius}")))
            }
            Shape::Ellipsoid { axes, .. } if axes.iter().any(|a| !(*a > 0.0)) => {
                out.push(("axes".into(), "semi-axes must be positive".into()))
            }
            Shape::Torus { major, minor, .. } if !(*minor > 0.0 && major > minor) => {
                out.push(("minor".into(), "need 0 < minor < major".into()))
            }
            Shape::PlanePatch { e1, e2, extent, .. } => {
                let n = Vec3::from(*e1).cross(&Vec3::from(*e2)).norm();
                if n < DEGENERATE_AREA {
                    out.push(("e1".into(), "e1 and e2 must be independent".into()));
                }
                if extent.iter().any(|e| !(*e > 0.0)) {
                    out.push(("extent".into(), "must be positive".into()));
                }
            }
            _ => {}
        }
        out
    }

    pub fn point(&self, u: f64, v: f64) -> Vec3 {
        self.jet(u, v).r
    }

    pub fn jet(&self, u: f64, v: f64) -> ChartJet {
        match self {
            Shape::Sphere { center, radius } => ellipsoid_jet(*center, [*radius; 3], u, v),
            Shape::Ellipsoid { center, axes } => ellipsoid_jet(*center, *axes, u, v),
            Shape::Torus {
                center,
                major,
                minor,
            } => {
                let (su, cu) = u.sin_cos();
                let (sv, cv) = v.sin_cos();
                let a = major + minor * cv;
                ChartJet {
                    r: Vec3::from(*center) + Vec3::new(a * cu, a * su, minor * sv),
                    r_u: Vec3::new(-a * su, a * cu, 0.0),
                    r_v: *minor * Vec3::new(-sv * cu, -sv * su, cv),
                    r_uu: Vec3::new(-a * cu, -a * su, 0.0),
                    r_uv: *minor * Vec3::new(sv * su, -sv * cu, 0.0),
                    r_vv: *minor * Vec3::new(-cv * cu, -cv * su, -sv),
                }
            }
            Shape::PlanePatch { origin, e1, e2, .. } => {
                let e1 = Vec3::from(*e1);
                let e2 = Vec3::from(*e2);
                ChartJet {
                    r: Vec3::from(*origin) + u * e1 + v * e2,
                    r_u: e1,
                    r_v: e2,
                    r_uu: Vec3::zeros(),
                    r_uv: Vec3::zeros(),
                    r_vv: Vec3::zeros(),
                }
            }
        }
    }

    /// Closed-form area where one is available.
    pub fn exact_area(&self) -> Option<f64> {
        match self {
            Shape::Sphere { radius, .. } => Some(4.0 * PI * radius * radius),
            Shape::Torus { major, minor, .. } => Some(4.0 * PI * PI * major * minor),
            Shape::PlanePatch { e1, e2, extent, .. } => {
                Some(Vec3::from(*e1).cross(&Vec3::from(*e2)).norm() * extent[0] * extent[1])
            }
            Shape::Ellipsoid { .. } => None,
        }
    }
}

fn ellipsoid_jet(center: [f64; 3], axes: [f64; 3], u: f64, v: f64) -> ChartJet {
    let (st, ct) = u.sin_cos();
    let (sp, cp) = v.sin_cos();
    let [a, b, c] = axes;
    ChartJet {
        r: Vec3::from(center) + Vec3::new(a * st * cp, b * st * sp, c * ct),
        r_u: Vec3::new(a * ct * cp, b * ct * sp, -c * st),
        r_v: Vec3::new(-a * st * sp, b * st * cp, 0.0),
        r_uu: Vec3::new(-a * st * cp, -b * st * sp, -c * ct),
        r_uv: Vec3::new(-a * ct * sp, b * ct * cp, 0.0),
        r_vv: Vec3::new(-a * st * cp, -b * st * sp, 0.0),
    }
}

/// Node placement along a non-periodic parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRule {
    #[default]
    GaussLegendre,
    Midpoint,
}

/// Tensor-product rule. Periodic directions always use the uniform
/// midpoint rule, which is spectrally accurate for smooth periodic data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureRule {
    pub n_u: usize,
    pub n_v: usize,
    #[serde(default)]
    pub edge_rule: EdgeRule,
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self {
            n_u: 128,
            n_v: 128,
            edge_rule: EdgeRule::GaussLegendre,
        }
    }
}

impl QuadratureRule {
    pub fn new(n_u: usize, n_v: usize) -> Self {
        Self {
            n_u,
            n_v,
            edge_rule: EdgeRule::GaussLegendre,
        }
    }

    pub fn midpoint(n_u: usize, n_v: usize) -> Self {
        Self {
            n_u,
            n_v,
            edge_rule: EdgeRule::Midpoint,
        }
    }
}

/// A quadrature node in parameter space with its `du dv` weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartNode {
    pub u: f64,
    pub v: f64,
    pub weight: f64,
}

fn rule_1d(n: usize, lo: f64, hi: f64, periodic: bool, edge: EdgeRule) -> Vec<(f64, f64)> {
    let len = hi - lo;
    if periodic || edge == EdgeRule::Midpoint {
        let h = len / n as f64;
        return (0..n).map(|i| (lo + (i as f64 + 0.5) * h, h)).collect();
    }
    let gl = GaussLegendre::new(NonZeroUsize::new(n).expect("node count is positive"));
    let mut pairs: Vec<(f64, f64)> = gl
        .as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| (lo + 0.5 * len * (x + 1.0), 0.5 * len * w))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs
}

/// Local differential-geometric data at a chart point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceFrame {
    pub u: f64,
    pub v: f64,
    pub r: Vec3,
    pub r_u: Vec3,
    pub r_v: Vec3,
    /// Unit normal after applying the orientation flag.
    pub n: Vec3,
    /// `|r_u × r_v|`.
    pub area_weight: f64,
    /// Mean curvature, positive on a sphere with outward normal.
    pub h: f64,
    /// Gaussian curvature.
    pub k: f64,
    /// First fundamental form `(E, F, G)`.
    pub metric: [f64; 3],
}

impl SurfaceFrame {
    fn metric_det(&self) -> f64 {
        let [e, f, g] = self.metric;
        e * g - f * f
    }

    /// Contravariant metric `(a^{uu}, a^{uv}, a^{vv})`.
    pub fn inverse_metric(&self) -> [f64; 3] {
        let [e, f, g] = self.metric;
        let det = self.metric_det();
        [g / det, -f / det, e / det]
    }

    /// Surface gradient of a chart function from its parameter partials.
    pub fn gradient_from_partials(&self, g_u: f64, g_v: f64) -> Vec3 {
        let [e, f, g] = self.metric;
        let det = self.metric_det();
        ((g * g_u - f * g_v) * self.r_u + (e * g_v - f * g_u) * self.r_v) / det
    }

    /// Tangential projection `∇g - (∇g·n) n` of an ambient gradient.
    pub fn project(&self, grad: &Vec3) -> Vec3 {
        grad - self.n * self.n.dot(grad)
    }

    /// `∇·F - n·(∇F) n` for a field with ambient Jacobian `jac`.
    pub fn divergence(&self, jac: &Matrix3<f64>) -> f64 {
        jac.trace() - self.n.dot(&(jac * self.n))
    }
}

/// A chart with orientation and a quadrature rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametricSurface {
    pub shape: Shape,
    /// `+1` keeps `r_u × r_v`, `-1` flips it.
    pub orientation: f64,
    #[serde(default)]
    pub quadrature: QuadratureRule,
}

impl ParametricSurface {
    pub fn new(shape: Shape) -> Self {
        Self {
            shape,
            orientation: 1.0,
            quadrature: QuadratureRule::default(),
        }
    }

    pub fn with_quadrature(mut self, quadrature: QuadratureRule) -> Self {
        self.quadrature = quadrature;
        self
    }

    pub fn flipped(mut self) -> Self {
        self.orientation = -self.orientation;
        self
    }

    pub fn is_closed(&self) -> bool {
        self.shape.is_closed()
    }

    pub fn frame(&self, u: f64, v: f64) -> Result<SurfaceFrame> {
        let jet = self.shape.jet(u, v);
        let cross = jet.r_u.cross(&jet.r_v);
        let area_weight = cross.norm();
        if area_weight < DEGENERATE_AREA {
            return Err(Error::DegenerateMetric {
                u,
                v,
                area: area_weight,
            });
        }
        let n = cross * (self.orientation.signum() / area_weight);
        let e = jet.r_u.dot(&jet.r_u);
        let f = jet.r_u.dot(&jet.r_v);
        let g = jet.r_v.dot(&jet.r_v);
        let l = jet.r_uu.dot(&n);
        let m = jet.r_uv.dot(&n);
        let nn = jet.r_vv.dot(&n);
        let det = e * g - f * f;
        Ok(SurfaceFrame {
            u,
            v,
            r: jet.r,
            r_u: jet.r_u,
            r_v: jet.r_v,
            n,
            area_weight,
            h: -(e * nn - 2.0 * f * m + g * l) / (2.0 * det),
            k: (l * nn - m * m) / det,
            metric: [e, f, g],
        })
    }

    /// Parameter values along each direction, with their 1-D weights.
    pub fn axes(&self) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
        let [[u0, u1], [v0, v1]] = self.shape.domain();
        let [pu, pv] = self.shape.periodic();
        let q = &self.quadrature;
        (
            rule_1d(q.n_u, u0, u1, pu, q.edge_rule),
            rule_1d(q.n_v, v0, v1, pv, q.edge_rule),
        )
    }

    /// Nodes in `u`-major order.
    pub fn nodes(&self) -> Vec<ChartNode> {
        let (us, vs) = self.axes();
        let mut out = Vec::with_capacity(us.len() * vs.len());
        for &(u, wu) in &us {
            for &(v, wv) in &vs {
                out.push(ChartNode {
                    u,
                    v,
                    weight: wu * wv,
                });
            }
        }
        out
    }

    pub fn frames(&self) -> Result<Vec<SurfaceFrame>> {
        self.nodes().iter().map(|n| self.frame(n.u, n.v)).collect()
    }

    /// `dS` weights at the nodes, parallel to [`Self::nodes`].
    pub fn area_weights(&self) -> Result<Vec<f64>> {
        self.nodes()
            .iter()
            .map(|n| Ok(n.weight * self.frame(n.u, n.v)?.area_weight))
            .collect()
    }

    /// `∫ f dS` by the tensor-product rule, summed in node order.
    pub fn integrate<F>(&self, mut f: F) -> Result<f64>
    where
        F: FnMut(&SurfaceFrame) -> f64,
    {
        let mut sum = 0.0;
        for node in self.nodes() {
            let frame = self.frame(node.u, node.v)?;
            sum += node.weight * frame.area_weight * f(&frame);
        }
        Ok(sum)
    }

    /// Integral over a closed surface; open patches are accepted with a
    /// logged warning.
    pub fn closed_surface_integral<F>(&self, f: F) -> Result<f64>
    where
        F: FnMut(&SurfaceFrame) -> f64,
    {
        if !self.is_closed() {
            log::warn!(
                "closed-surface integral requested on open {}",
                self.shape.name()
            );
        }
        self.integrate(f)
    }

    pub fn area(&self) -> Result<f64> {
        self.integrate(|_| 1.0)
    }

    /// Integrated Gaussian curvature; `2π χ` on a closed surface.
    pub fn total_gaussian_curvature(&self) -> Result<f64> {
        self.integrate(|fr| fr.k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unit_sphere_frame() {
        let s = ParametricSurface::new(Shape::sphere(1.0));
        let f = s.frame(0.7, 1.9).unwrap();
        assert_relative_eq!(f.h, 1.0, epsilon = 1e-13);
        assert_relative_eq!(f.k, 1.0, epsilon = 1e-13);
        assert_relative_eq!(f.n.norm(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(f.n.dot(&f.r), 1.0, epsilon = 1e-14);
        let inward = s.clone().flipped().frame(0.7, 1.9).unwrap();
        assert_relative_eq!(inward.h, -1.0, epsilon = 1e-13);
        assert_relative_eq!(inward.k, 1.0, epsilon = 1e-13);
    }

    #[test]
    fn plane_is_flat() {
        let s = ParametricSurface::new(Shape::PlanePatch {
            origin: [0.0; 3],
            e1: [1.0, 0.0, 0.0],
            e2: [0.0, 1.0, 0.0],
            extent: [2.0, 3.0],
        });
        let f = s.frame(0.3, 0.4).unwrap();
        assert_eq!(f.h, 0.0);
        assert_eq!(f.k, 0.0);
        assert_relative_eq!(s.area().unwrap(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn pole_is_degenerate() {
        let s = ParametricSurface::new(Shape::sphere(1.0));
        assert!(matches!(
            s.frame(0.0, 1.0),
            Err(Error::DegenerateMetric { .. })
        ));
    }

    #[test]
    fn sphere_area_converges() {
        for rule in [EdgeRule::GaussLegendre, EdgeRule::Midpoint] {
            let mut errs = Vec::new();
            for n in [16, 32, 64] {
                let s =
                    ParametricSurface::new(Shape::sphere(2.0)).with_quadrature(QuadratureRule {
                        n_u: n,
                        n_v: n,
                        edge_rule: rule,
                    });
                errs.push((s.area().unwrap() - 16.0 * PI).abs());
            }
            assert!(
                errs[2] <= errs[1] / 3.9 || errs[2] < 1e-12,
                "{rule:?}: {errs:?}"
            );
        }
    }

    #[test]
    fn torus_curvature_integrates_to_zero() {
        let s = ParametricSurface::new(Shape::torus(2.0, 0.5))
            .with_quadrature(QuadratureRule::new(64, 64));
        assert!(s.total_gaussian_curvature().unwrap().abs() < 1e-12);
        assert_relative_eq!(s.area().unwrap(), 4.0 * PI * PI, max_relative = 1e-13);
    }

    #[test]
    fn torus_outer_equator_curvatures() {
        // Outer equator: principal curvatures 1/r and 1/(R+r).
        let s = ParametricSurface::new(Shape::torus(2.0, 0.5));
        let f = s.frame(0.3, 0.0).unwrap();
        assert_relative_eq!(f.k, 1.0 / (0.5 * 2.5), epsilon = 1e-12);
        assert_relative_eq!(f.h, 0.5 * (2.0 + 1.0 / 2.5), epsilon = 1e-12);
    }

    #[test]
    fn surface_gradient_of_height_on_sphere() {
        let s = ParametricSurface::new(Shape::sphere(1.0));
        let (theta, phi) = (1.1, 0.4);
        let f = s.frame(theta, phi).unwrap();
        // g = z = cos θ
        let grad = f.gradient_from_partials(-theta.sin(), 0.0);
        let expected = f.project(&Vec3::z());
        assert_relative_eq!((grad - expected).norm(), 0.0, epsilon = 1e-14);
        assert_relative_eq!(grad.norm(), theta.sin(), epsilon = 1e-14);
        assert!(grad.dot(&f.n).abs() < 1e-12);
    }
}
