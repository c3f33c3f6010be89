use nalgebra::Matrix3;

use super::surface::{ParametricSurface, SurfaceFrame, Vec3};
use super::velocity::VelocityField;
use crate::error::{Error, Result};

/// The first-order map `T_t(X) = X + t V(X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformState<'a> {
    pub t: f64,
    pub velocity: &'a VelocityField,
}

/// `J_t` with its time derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeJacobian {
    pub j: f64,
    /// `J_t (∇·V)(T_t X)`.
    pub dj_dt: f64,
    /// Exact `t`-derivative of `det(I + t∇V(X))`; equals `dj_dt` at `t = 0`.
    pub dj_dt_map: f64,
}

/// `A(t) = J_t (∇T_t)⁻¹ (∇T_t)⁻ᵀ` and `A'(0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformTensor {
    pub a: Matrix3<f64>,
    pub a_prime_0: Matrix3<f64>,
}

impl<'a> TransformState<'a> {
    pub fn new(t: f64, velocity: &'a VelocityField) -> Self {
        Self { t, velocity }
    }

    pub fn map(&self, x: &Vec3) -> Vec3 {
        x + self.velocity.eval(x) * self.t
    }

    /// `∇T_t = I + t ∇V`.
    pub fn gradient(&self, x: &Vec3) -> Matrix3<f64> {
        Matrix3::identity() + self.velocity.jacobian(x) * self.t
    }

    fn checked_gradient(&self, x: &Vec3) -> Result<(Matrix3<f64>, f64)> {
        let g = self.gradient(x);
        let det = g.determinant();
        if !(det > 0.0) {
            return Err(Error::NonInvertible { det });
        }
        Ok((g, det))
    }

    pub fn volume_jacobian(&self, x: &Vec3) -> Result<VolumeJacobian> {
        let (g, j) = self.checked_gradient(x)?;
        let inv = g.try_inverse().ok_or(Error::NonInvertible { det: j })?;
        let dv = self.velocity.jacobian(x);
        Ok(VolumeJacobian {
            j,
            dj_dt: j * self.velocity.divergence(&self.map(x)),
            dj_dt_map: j * (inv * dv).trace(),
        })
    }

    pub fn transform_tensor(&self, x: &Vec3) -> Result<TransformTensor> {
        let (g, j) = self.checked_gradient(x)?;
        let inv = g.try_inverse().ok_or(Error::NonInvertible { det: j })?;
        let dv = self.velocity.jacobian(x);
        Ok(TransformTensor {
            a: inv * inv.transpose() * j,
            a_prime_0: Matrix3::identity() * dv.trace() - dv - dv.transpose(),
        })
    }

    /// `J_s = det(∇T_t) |∇T_t⁻ᵀ n|` at the frame's point.
    pub fn surface_jacobian(&self, frame: &SurfaceFrame) -> Result<f64> {
        let (g, det) = self.checked_gradient(&frame.r)?;
        let inv = g.try_inverse().ok_or(Error::NonInvertible { det })?;
        Ok(det * (inv.transpose() * frame.n).norm())
    }
}

/// `dJ_s/dt` at `t = 0`, the surface divergence of `V`.
pub fn surface_jacobian_rate0(frame: &SurfaceFrame, velocity: &VelocityField) -> f64 {
    frame.divergence(&velocity.jacobian(&frame.r))
}

/// `dn/dt` at `t = 0` from the chart: `(R - n(n·R))/|r_u × r_v|` with
/// `R = (∂_t s_u) × r_v + r_u × (∂_t s_v)`.
pub fn normal_rate0(
    surface: &ParametricSurface,
    frame: &SurfaceFrame,
    velocity: &VelocityField,
) -> Vec3 {
    let dv = velocity.jacobian(&frame.r);
    let r = (dv * frame.r_u).cross(&frame.r_v) + frame.r_u.cross(&(dv * frame.r_v));
    (r - frame.n * frame.n.dot(&r)) * (surface.orientation.signum() / frame.area_weight)
}

/// Closed-form `dn/dt = -(∇V)ᵀ n + (n·∇V n) n`.
pub fn normal_rate0_ambient(frame: &SurfaceFrame, velocity: &VelocityField) -> Vec3 {
    let dv = velocity.jacobian(&frame.r);
    let m = dv.transpose() * frame.n;
    frame.n * frame.n.dot(&m) - m
}

/// Central difference of `J_s` in `t` at one frame.
pub fn surface_jacobian_fd(
    frame: &SurfaceFrame,
    velocity: &VelocityField,
    tau: f64,
) -> Result<f64> {
    let plus = TransformState::new(tau, velocity).surface_jacobian(frame)?;
    let minus = TransformState::new(-tau, velocity).surface_jacobian(frame)?;
    Ok((plus - minus) / (2.0 * tau))
}

#[cfg(test)]
mod tests {
    use super::super::surface::Shape;
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_map() {
        let v = VelocityField::zero();
        let x = Vec3::new(0.3, -1.0, 2.0);
        let jac = TransformState::new(0.7, &v).volume_jacobian(&x).unwrap();
        assert_eq!((jac.j, jac.dj_dt), (1.0, 0.0));
        let a = TransformState::new(0.7, &v).transform_tensor(&x).unwrap();
        assert_eq!(a.a, Matrix3::identity());
        assert_eq!(a.a_prime_0, Matrix3::zeros());
    }

    #[test]
    fn dilation_values() {
        let v = VelocityField::dilation();
        let x = Vec3::new(0.3, -1.0, 2.0);
        let j0 = TransformState::new(0.0, &v).volume_jacobian(&x).unwrap();
        assert_eq!(j0.j, 1.0);
        assert_relative_eq!(j0.dj_dt, 3.0);
        let j1 = TransformState::new(0.1, &v).volume_jacobian(&x).unwrap();
        assert_relative_eq!(j1.j, 1.331, epsilon = 1e-14);
        let a = TransformState::new(0.0, &v).transform_tensor(&x).unwrap();
        assert_eq!(a.a_prime_0, Matrix3::identity());

        let s = ParametricSurface::new(Shape::sphere(1.0));
        let f = s.frame(0.4, 2.0).unwrap();
        assert_eq!(
            TransformState::new(0.0, &v).surface_jacobian(&f).unwrap(),
            1.0
        );
        assert_relative_eq!(
            TransformState::new(0.1, &v).surface_jacobian(&f).unwrap(),
            1.21,
            epsilon = 1e-14
        );
        assert_relative_eq!(surface_jacobian_rate0(&f, &v), 2.0, epsilon = 1e-14);
        assert!(normal_rate0(&s, &f, &v).norm() < 1e-14);
    }

    #[test]
    fn translation_preserves_area() {
        let v = VelocityField::Uniform {
            v: [1.0, -2.0, 0.5],
        };
        let s = ParametricSurface::new(Shape::ellipsoid(1.0, 2.0, 0.5));
        let f = s.frame(1.0, 1.0).unwrap();
        assert_relative_eq!(
            TransformState::new(0.3, &v).surface_jacobian(&f).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_eq!(surface_jacobian_rate0(&f, &v), 0.0);
    }

    #[test]
    fn collapse_is_rejected() {
        let v = VelocityField::dilation();
        let err = TransformState::new(-1.0, &v).volume_jacobian(&Vec3::zeros());
        assert!(matches!(err, Err(Error::NonInvertible { .. })));
    }
}
