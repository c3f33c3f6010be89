use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::surface::Vec3;
use crate::error::{Error, Result};

/// Smooth deformation fields with analytic Jacobians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VelocityField {
    /// `V(x) = v`.
    Uniform { v: [f64; 3] },
    /// `V(x) = A x + b`; covers dilation, rotation and shear.
    Linear { a: [[f64; 3]; 3], b: [f64; 3] },
    /// `V(x) = L x + a sin(k·x)`.
    Trig {
        l: [[f64; 3]; 3],
        amplitude: [f64; 3],
        wave: [f64; 3],
    },
    /// `V(x) = m(x) (x - P(x))` where `P` projects onto the core circle of a
    /// torus about the `z` axis, and `m(x) = amplitude (1 + modulation sin(k·x))`.
    /// On the torus surface this is everywhere normal.
    TorusNormalBump {
        major: f64,
        amplitude: f64,
        modulation: f64,
        wave: [f64; 3],
    },
    /// Radial field `Σ a_i ψ((|x - c| - R_i)/d) x̂` with the C∞ bump `ψ`.
    RadialBumps {
        center: [f64; 3],
        radii: Vec<f64>,
        amplitudes: Vec<f64>,
        support: f64,
    },
    /// `Σ a_i ψ((z - z_i)/d) ẑ`.
    PlanarBumps {
        positions: Vec<f64>,
        amplitudes: Vec<f64>,
        support: f64,
    },
}

/// `ψ(s) = exp(1 - 1/(1 - s²))` on `|s| < 1`, zero outside; `ψ(0) = 1`.
pub fn bump(s: f64) -> (f64, f64) {
    if s.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let q = 1.0 - s * s;
    let val = (1.0 - 1.0 / q).exp();
    (val, -2.0 * s / (q * q) * val)
}

fn mat(a: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| a[i][j])
}

impl VelocityField {
    pub fn zero() -> Self {
        VelocityField::Uniform { v: [0.0; 3] }
    }

    pub fn dilation() -> Self {
        VelocityField::Linear {
            a: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            b: [0.0; 3],
        }
    }

    /// Rigid rotation `ω × x`.
    pub fn rotation(omega: [f64; 3]) -> Self {
        let [wx, wy, wz] = omega;
        VelocityField::Linear {
            a: [[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]],
            b: [0.0; 3],
        }
    }

    /// Simple shear `V = γ (y, 0, 0)` plus a small `z` stretch.
    pub fn shear(rate: f64) -> Self {
        VelocityField::Linear {
            a: [[0.0, rate, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.5 * rate]],
            b: [0.0; 3],
        }
    }

    pub fn eval(&self, x: &Vec3) -> Vec3 {
        match self {
            VelocityField::Uniform { v } => Vec3::from(*v),
            VelocityField::Linear { a, b } => mat(a) * x + Vec3::from(*b),
            VelocityField::Trig { l, amplitude, wave } => {
                mat(l) * x + Vec3::from(*amplitude) * Vec3::from(*wave).dot(x).sin()
            }
            VelocityField::TorusNormalBump {
                major,
                amplitude,
                modulation,
                wave,
            } => {
                let (w, _) = torus_offset(*major, x);
                let m = amplitude * (1.0 + modulation * Vec3::from(*wave).dot(x).sin());
                m * w
            }
            VelocityField::RadialBumps {
                center,
                radii,
                amplitudes,
                support,
            } => {
                let d = x - Vec3::from(*center);
                let rho = d.norm();
                let (f, _) = radial_profile(radii, amplitudes, *support, rho);
                if f == 0.0 {
                    Vec3::zeros()
                } else {
                    d * (f / rho)
                }
            }
            VelocityField::PlanarBumps {
                positions,
                amplitudes,
                support,
            } => Vec3::new(
                0.0,
                0.0,
                radial_profile(positions, amplitudes, *support, x[2]).0,
            ),
        }
    }

    /// `(∇V)_{ij} = ∂V_i/∂x_j`.
    pub fn jacobian(&self, x: &Vec3) -> Matrix3<f64> {
        match self {
            VelocityField::Uniform { .. } => Matrix3::zeros(),
            VelocityField::Linear { a, .. } => mat(a),
            VelocityField::Trig { l, amplitude, wave } => {
                let k = Vec3::from(*wave);
                mat(l) + Vec3::from(*amplitude) * k.transpose() * k.dot(x).cos()
            }
            VelocityField::TorusNormalBump {
                major,
                amplitude,
                modulation,
                wave,
            } => {
                let k = Vec3::from(*wave);
                let (w, dw) = torus_offset(*major, x);
                let m = amplitude * (1.0 + modulation * k.dot(x).sin());
                let dm = k * (amplitude * modulation * k.dot(x).cos());
                w * dm.transpose() + dw * m
            }
            VelocityField::RadialBumps {
                center,
                radii,
                amplitudes,
                support,
            } => {
                let d = x - Vec3::from(*center);
                let rho = d.norm();
                let (f, df) = radial_profile(radii, amplitudes, *support, rho);
                if f == 0.0 && df == 0.0 {
                    return Matrix3::zeros();
                }
                let e = d / rho;
                let p = e * e.transpose();
                p * df + (Matrix3::identity() - p) * (f / rho)
            }
            VelocityField::PlanarBumps {
                positions,
                amplitudes,
                support,
            } => {
                let mut j = Matrix3::zeros();
                j[(2, 2)] = radial_profile(positions, amplitudes, *support, x[2]).1;
                j
            }
        }
    }

    pub fn divergence(&self, x: &Vec3) -> f64 {
        self.jacobian(x).trace()
    }

    /// Support distance `d` for compactly supported fields.
    pub fn support_distance(&self) -> Option<f64> {
        match self {
            VelocityField::RadialBumps { support, .. }
            | VelocityField::PlanarBumps { support, .. } => Some(*support),
            VelocityField::Uniform { v } if v.iter().all(|c| *c == 0.0) => Some(0.0),
            _ => None,
        }
    }

    /// Normal velocity `v_i = a_i` carried by bump `i` at its own face,
    /// assuming bumps do not overlap.
    pub fn bump_amplitudes(&self) -> Option<&[f64]> {
        match self {
            VelocityField::RadialBumps { amplitudes, .. }
            | VelocityField::PlanarBumps { amplitudes, .. } => Some(amplitudes),
            _ => None,
        }
    }

    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        match self {
            VelocityField::RadialBumps {
                radii,
                amplitudes,
                support,
                ..
            } => {
                if radii.len() != amplitudes.len() {
                    out.push(("velocity.amplitudes".into(), "must match radii".into()));
                }
                if !(*support > 0.0) {
                    out.push(("velocity.support".into(), "must be positive".into()));
                }
                if radii.iter().any(|r| *r - support <= 0.0) {
                    out.push((
                        "velocity.radii".into(),
                        "bump support must exclude the origin".into(),
                    ));
                }
            }
            VelocityField::PlanarBumps {
                positions,
                amplitudes,
                support,
            } => {
                if positions.len() != amplitudes.len() {
                    out.push(("velocity.amplitudes".into(), "must match positions".into()));
                }
                if !(*support > 0.0) {
                    out.push(("velocity.support".into(), "must be positive".into()));
                }
            }
            VelocityField::TorusNormalBump { major, .. } if !(*major > 0.0) => {
                out.push(("velocity.major".into(), "must be positive".into()))
            }
            _ => {}
        }
        out
    }

    /// Checks the separation condition for a field acting on the faces at
    /// `faces` (radii or heights): supports of distinct bumps must not
    /// overlap, must not reach other faces, and must stay at least `margin`
    /// away from the source support and the outer boundary.
    pub fn check_separation(&self, faces: &[f64], source_extent: f64, outer: f64) -> Result<()> {
        let (centres, support) = match self {
            VelocityField::RadialBumps { radii, support, .. } => (radii, *support),
            VelocityField::PlanarBumps {
                positions, support, ..
            } => (positions, *support),
            _ => return Ok(()),
        };
        for (i, c) in centres.iter().enumerate() {
            for f in faces {
                let gap = (c - f).abs();
                if gap > 1e-12 && gap < support {
                    return Err(Error::SupportViolation(format!(
                        "bump {i} at {c} reaches face {f} (d = {support})"
                    )));
                }
            }
            if c - support <= source_extent {
                return Err(Error::SupportViolation(format!(
                    "bump {i} at {c} overlaps the source support ({source_extent})"
                )));
            }
            if c + support >= outer {
                return Err(Error::SupportViolation(format!(
                    "bump {i} at {c} reaches the outer boundary ({outer})"
                )));
            }
        }
        Ok(())
    }
}

fn radial_profile(centres: &[f64], amplitudes: &[f64], support: f64, rho: f64) -> (f64, f64) {
    let mut f = 0.0;
    let mut df = 0.0;
    for (c, a) in centres.iter().zip(amplitudes) {
        let (b, db) = bump((rho - c) / support);
        f += a * b;
        df += a * db / support;
    }
    (f, df)
}

/// Offset from the core circle of radius `major` in the `xy` plane, and its
/// Jacobian `I - (R/ρ) e_φ e_φᵀ`.
fn torus_offset(major: f64, x: &Vec3) -> (Vec3, Matrix3<f64>) {
    let rho = x[0].hypot(x[1]);
    let w = Vec3::new(x[0] * (1.0 - major / rho), x[1] * (1.0 - major / rho), x[2]);
    let e_phi = Vec3::new(-x[1] / rho, x[0] / rho, 0.0);
    (
        w,
        Matrix3::identity() - e_phi * e_phi.transpose() * (major / rho),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd_jacobian(v: &VelocityField, x: &Vec3) -> Matrix3<f64> {
        let h = 1e-6;
        let mut j = Matrix3::zeros();
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let d = (v.eval(&(x + e)) - v.eval(&(x - e))) / (2.0 * h);
            j.set_column(k, &d);
        }
        j
    }

    #[test]
    fn analytic_jacobians_match_differences() {
        let fields = [
            VelocityField::shear(0.7),
            VelocityField::Trig {
                l: [[0.1, 0.2, 0.0], [0.0, -0.3, 0.1], [0.2, 0.0, 0.4]],
                amplitude: [0.3, -0.2, 0.5],
                wave: [1.0, 0.5, -0.7],
            },
            VelocityField::TorusNormalBump {
                major: 2.0,
                amplitude: 0.4,
                modulation: 0.5,
                wave: [0.3, 0.9, 1.1],
            },
            VelocityField::RadialBumps {
                center: [0.1, 0.0, -0.2],
                radii: vec![2.0],
                amplitudes: vec![1.5],
                support: 0.8,
            },
        ];
        let x = Vec3::new(1.3, 0.9, 0.4);
        for v in &fields {
            let err = (v.jacobian(&x) - fd_jacobian(v, &x)).abs().max();
            assert!(err < 1e-7, "{v:?}: {err}");
        }
    }

    #[test]
    fn torus_bump_is_normal_on_torus() {
        let v = VelocityField::TorusNormalBump {
            major: 2.0,
            amplitude: 1.0,
            modulation: 0.0,
            wave: [0.0; 3],
        };
        let (u, w) = (0.8f64, 2.1f64);
        let a = 2.0 + 0.5 * w.cos();
        let x = Vec3::new(a * u.cos(), a * u.sin(), 0.5 * w.sin());
        let n = Vec3::new(w.cos() * u.cos(), w.cos() * u.sin(), w.sin());
        assert_relative_eq!((v.eval(&x) - 0.5 * n).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn bump_vanishes_outside_support() {
        assert_eq!(bump(1.0), (0.0, 0.0));
        assert_eq!(bump(-1.5), (0.0, 0.0));
        assert_eq!(bump(0.0).0, 1.0);
        let v = VelocityField::PlanarBumps {
            positions: vec![3.0],
            amplitudes: vec![1.0],
            support: 0.5,
        };
        assert_eq!(v.eval(&Vec3::new(0.0, 0.0, 3.6)), Vec3::zeros());
        assert_eq!(v.eval(&Vec3::new(5.0, 1.0, 3.0)), Vec3::z());
    }

    #[test]
    fn separation_is_checked() {
        let v = VelocityField::RadialBumps {
            center: [0.0; 3],
            radii: vec![5.0, 7.0],
            amplitudes: vec![1.0, 1.0],
            support: 0.5,
        };
        assert!(v.check_separation(&[5.0, 7.0], 3.0, 20.0).is_ok());
        assert!(v.check_separation(&[5.0, 7.2], 3.0, 20.0).is_err());
        assert!(v.check_separation(&[5.0, 7.0], 4.8, 20.0).is_err());
    }
}
