//! Parametric surfaces, velocity fields and the transformation `T_t`.

mod surface;
mod transform;
mod velocity;

pub use surface::{
    ChartJet, ChartNode, EdgeRule, ParametricSurface, QuadratureRule, Shape, SurfaceFrame, Vec3,
};
pub use transform::{
    normal_rate0, normal_rate0_ambient, surface_jacobian_fd, surface_jacobian_rate0,
    TransformState, TransformTensor, VolumeJacobian,
};
pub use velocity::{bump, VelocityField};

use crate::error::Result;

/// `∫ ∇_s·F dS` and the curvature oracle `∫ 2H (F·n) dS` for an ambient field.
pub fn divergence_integrals(
    surface: &ParametricSurface,
    field: &VelocityField,
) -> Result<(f64, f64)> {
    let div = surface.closed_surface_integral(|fr| fr.divergence(&field.jacobian(&fr.r)))?;
    let curv = surface.closed_surface_integral(|fr| 2.0 * fr.h * field.eval(&fr.r).dot(&fr.n))?;
    Ok((div, curv))
}
