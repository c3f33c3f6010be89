use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    /// Concentric spheres, coordinate `r ∈ [0, R_outer]`.
    Spherical,
    /// Parallel slabs, coordinate `z ∈ [0, L]`.
    Planar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Solvent,
    Membrane,
    Protein,
}

impl Region {
    pub fn code(self) -> u8 {
        match self {
            Region::Solvent => 0,
            Region::Membrane => 1,
            Region::Protein => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Solvent => "s",
            Region::Membrane => "m",
            Region::Protein => "p",
        }
    }
}

/// Node clustering around the origin and the interfaces.
///
/// Within every segment the nodes equidistribute the density
/// `1/max_spacing + Σ_f 1/(scale_f + growth |x - x_f|)`, so spacing grows
/// linearly away from each feature `x_f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grading {
    pub growth: f64,
    pub interface_scale: f64,
    pub origin_scale: f64,
    pub max_spacing: f64,
}

impl Default for Grading {
    fn default() -> Self {
        Self {
            growth: 0.25,
            interface_scale: 0.5,
            origin_scale: 0.25,
            max_spacing: 2.0,
        }
    }
}

const MIN_SEGMENT_CELLS: usize = 4;

/// Layout of a one-dimensional reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadialGeometry {
    pub symmetry: Symmetry,
    /// Faces `[Γ_c, Γ_e]`; `None` gives a single solvent region.
    pub membrane: Option<[f64; 2]>,
    /// Radius of a protein cavity around the origin (spherical only).
    #[serde(default)]
    pub cavity: Option<f64>,
    /// `R_outer` or slab length `L`.
    pub outer: f64,
    /// Number of cells.
    pub cells: usize,
    /// `None` gives a uniform mesh within each segment.
    #[serde(default)]
    pub grading: Option<Grading>,
    /// Cells per segment, overriding the split derived from the grading.
    /// Shape perturbations keep this fixed so the discrete energy varies
    /// smoothly with the face positions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_cells: Option<Vec<usize>>,
}

impl RadialGeometry {
    pub fn spherical(r_c: f64, r_e: f64, r_outer: f64, cells: usize) -> Self {
        Self {
            symmetry: Symmetry::Spherical,
            membrane: Some([r_c, r_e]),
            cavity: None,
            outer: r_outer,
            cells,
            grading: Some(Grading::default()),
            segment_cells: None,
        }
    }

    pub fn planar(z_c: f64, z_e: f64, length: f64, cells: usize) -> Self {
        Self {
            symmetry: Symmetry::Planar,
            membrane: Some([z_c, z_e]),
            cavity: None,
            outer: length,
            cells,
            grading: Some(Grading::default()),
            segment_cells: None,
        }
    }

    /// A ball of solvent with no membrane.
    pub fn solvent_ball(r_outer: f64, cells: usize) -> Self {
        Self {
            symmetry: Symmetry::Spherical,
            membrane: None,
            cavity: None,
            outer: r_outer,
            cells,
            grading: Some(Grading::default()),
            segment_cells: None,
        }
    }

    pub fn with_cells(mut self, cells: usize) -> Self {
        self.cells = cells;
        self
    }

    pub fn with_grading(mut self, grading: Option<Grading>) -> Self {
        self.grading = grading;
        self
    }

    pub fn with_segment_cells(mut self, counts: Option<Vec<usize>>) -> Self {
        if let Some(c) = &counts {
            self.cells = c.iter().sum();
        }
        self.segment_cells = counts;
        self
    }

    pub fn with_faces(mut self, faces: [f64; 2]) -> Self {
        self.membrane = Some(faces);
        self
    }

    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if !(self.outer > 0.0 && self.outer.is_finite()) {
            out.push((
                "geometry.outer".into(),
                format!("must be positive, got {}", self.outer),
            ));
        }
        if let Some([c, e]) = self.membrane {
            if !(c > 0.0) {
                out.push(("geometry.r_c".into(), format!("must be positive, got {c}")));
            }
            if !(c < e) {
                out.push((
                    "geometry.r_c, geometry.r_e".into(),
                    format!("need r_c < r_e, got r_c = {c}, r_e = {e}"),
                ));
            }
            if !(e < self.outer) {
                out.push((
                    "geometry.r_e, geometry.outer".into(),
                    format!("need r_e < outer, got r_e = {e}, outer = {}", self.outer),
                ));
            }
        }
        if let Some(p) = self.cavity {
            if self.symmetry == Symmetry::Planar {
                out.push((
                    "geometry.cavity".into(),
                    "only supported in spherical symmetry".into(),
                ));
            }
            let limit = self.membrane.map(|m| m[0]).unwrap_or(self.outer);
            if !(p > 0.0 && p < limit) {
                out.push((
                    "geometry.cavity".into(),
                    format!("need 0 < cavity < {limit}, got {p}"),
                ));
            }
        }
        if self.cells < 8 {
            out.push((
                "numerics.cells".into(),
                format!("need at least 8 cells, got {}", self.cells),
            ));
        }
        if let Some(counts) = &self.segment_cells {
            let nseg = self.segments().1.len();
            if counts.len() != nseg || counts.iter().any(|c| *c < MIN_SEGMENT_CELLS) {
                out.push((
                    "numerics.segment_cells".into(),
                    format!("need {nseg} entries of at least {MIN_SEGMENT_CELLS}, got {counts:?}"),
                ));
            } else if counts.iter().sum::<usize>() != self.cells {
                out.push((
                    "numerics.segment_cells".into(),
                    format!("must sum to cells = {}", self.cells),
                ));
            }
        }
        if let Some(g) = self.grading {
            if !(g.growth > 0.0
                && g.interface_scale > 0.0
                && g.origin_scale > 0.0
                && g.max_spacing > 0.0)
            {
                out.push((
                    "numerics.grading".into(),
                    "all grading parameters must be positive".into(),
                ));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            None => Ok(()),
            Some((field, reason)) => Err(Error::Invalid { field, reason }),
        }
    }

    /// Segment end points and the region of each segment.
    pub fn segments(&self) -> (Vec<f64>, Vec<Region>) {
        let mut points = vec![0.0];
        let mut regions = Vec::new();
        if let Some(p) = self.cavity {
            points.push(p);
            regions.push(Region::Protein);
        }
        if let Some([c, e]) = self.membrane {
            points.extend([c, e]);
            regions.extend([Region::Solvent, Region::Membrane]);
        }
        points.push(self.outer);
        regions.push(Region::Solvent);
        (points, regions)
    }

    fn density(&self, points: &[f64]) -> Density {
        let features: Vec<(f64, f64)> = match self.grading {
            None => Vec::new(),
            Some(g) => {
                let mut f: Vec<(f64, f64)> = points[1..points.len() - 1]
                    .iter()
                    .map(|x| (*x, g.interface_scale))
                    .collect();
                match self.symmetry {
                    Symmetry::Spherical => f.push((0.0, g.origin_scale)),
                    // Dirichlet data generally differs from the bulk value, so both ends carry layers.
                    Symmetry::Planar => {
                        f.push((points[0], g.interface_scale));
                        f.push((points[points.len() - 1], g.interface_scale));
                    }
                }
                f
            }
        };
        Density {
            features,
            growth: self.grading.map(|g| g.growth).unwrap_or(1.0),
            base: self.grading.map(|g| 1.0 / g.max_spacing).unwrap_or(1.0),
        }
    }

    /// Cells in each segment, from the override or the grading.
    pub fn segment_counts(&self) -> Result<Vec<usize>> {
        self.validate()?;
        if let Some(c) = &self.segment_cells {
            return Ok(c.clone());
        }
        let (points, regions) = self.segments();
        let density = self.density(&points);
        let nseg = regions.len();
        let masses: Vec<f64> = (0..nseg)
            .map(|s| density.cumulative(points[s + 1]) - density.cumulative(points[s]))
            .collect();
        let total: f64 = masses.iter().sum();
        if self.cells < MIN_SEGMENT_CELLS * nseg {
            return Err(Error::UnderResolved(format!(
                "{} cells cannot cover {nseg} segments",
                self.cells
            )));
        }
        let mut counts: Vec<usize> = masses
            .iter()
            .map(|m| ((self.cells as f64 * m / total).round() as usize).max(MIN_SEGMENT_CELLS))
            .collect();
        // Put the rounding surplus on the largest segment.
        let assigned: usize = counts.iter().sum();
        let largest = (0..nseg)
            .max_by(|a, b| counts[*a].cmp(&counts[*b]))
            .unwrap_or(0);
        counts[largest] =
            (counts[largest] as isize + self.cells as isize - assigned as isize) as usize;
        Ok(counts)
    }

    pub fn build_mesh(&self) -> Result<RadialMesh> {
        let counts = self.segment_counts()?;
        let (points, regions) = self.segments();
        let density = self.density(&points);
        let nseg = regions.len();
        let mut nodes = vec![points[0]];
        let mut cell_region = Vec::with_capacity(self.cells);
        let mut interface_nodes = Vec::new();
        for s in 0..nseg {
            let (a, b) = (points[s], points[s + 1]);
            let (ia, ib) = (density.cumulative(a), density.cumulative(b));
            for k in 1..=counts[s] {
                let x = if k == counts[s] {
                    b
                } else {
                    density.invert(ia + (ib - ia) * k as f64 / counts[s] as f64, a, b)
                };
                nodes.push(x);
                cell_region.push(regions[s]);
            }
            if s + 1 < nseg {
                interface_nodes.push(nodes.len() - 1);
            }
        }
        let membrane_faces = self.membrane.map(|_| {
            let k = interface_nodes.len();
            [interface_nodes[k - 2], interface_nodes[k - 1]]
        });
        Ok(RadialMesh {
            symmetry: self.symmetry,
            nodes,
            cell_region,
            membrane_faces,
        })
    }
}

struct Density {
    features: Vec<(f64, f64)>,
    growth: f64,
    base: f64,
}

impl Density {
    /// Antiderivative of `base + Σ 1/(scale + growth |x - x_f|)`.
    fn cumulative(&self, x: f64) -> f64 {
        let g = self.growth;
        self.base * x
            + self
                .features
                .iter()
                .map(|(xf, s)| {
                    let d = x - xf;
                    d.signum() * (1.0 + g * d.abs() / s).ln() / g
                })
                .sum::<f64>()
    }

    fn invert(&self, target: f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cumulative(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(1.0) {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

/// An interface-fitted mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialMesh {
    pub symmetry: Symmetry,
    pub nodes: Vec<f64>,
    pub cell_region: Vec<Region>,
    /// Node indices of `[Γ_c, Γ_e]`.
    pub membrane_faces: Option<[usize; 2]>,
}

impl RadialMesh {
    pub fn cells(&self) -> usize {
        self.cell_region.len()
    }

    /// Index of the node sitting exactly at `x`.
    pub fn node_at(&self, x: f64) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| *n == x)
            .ok_or(Error::MeshNotFitted { position: x })
    }

    pub fn max_spacing(&self) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Regions on the left and right of node `i`, `None` past the ends.
    pub fn sides(&self, i: usize) -> (Option<Region>, Option<Region>) {
        let left = if i == 0 {
            None
        } else {
            Some(self.cell_region[i - 1])
        };
        (left, self.cell_region.get(i).copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_is_fitted_and_monotone() {
        let g = RadialGeometry::spherical(5.0, 7.0, 30.0, 400);
        let m = g.build_mesh().unwrap();
        assert_eq!(m.cells(), 400);
        assert!(m.nodes.windows(2).all(|w| w[1] > w[0]));
        let [c, e] = m.membrane_faces.unwrap();
        assert_eq!(m.nodes[c], 5.0);
        assert_eq!(m.nodes[e], 7.0);
        assert_eq!(m.node_at(7.0).unwrap(), e);
        assert_eq!(m.sides(c), (Some(Region::Solvent), Some(Region::Membrane)));
        assert_eq!(m.sides(e), (Some(Region::Membrane), Some(Region::Solvent)));
        assert_eq!(*m.nodes.last().unwrap(), 30.0);
    }

    #[test]
    fn cavity_and_uniform_layout() {
        let mut g = RadialGeometry::spherical(5.0, 7.0, 10.0, 100).with_grading(None);
        g.cavity = Some(2.0);
        let m = g.build_mesh().unwrap();
        assert_eq!(m.cell_region[0], Region::Protein);
        assert!(m.node_at(2.0).is_ok());
        let spacing: Vec<f64> = m.nodes.windows(2).map(|w| w[1] - w[0]).collect();
        assert!((spacing[0] - spacing[5]).abs() < 1e-12);
    }

    #[test]
    fn invalid_radii_name_both_fields() {
        let g = RadialGeometry::spherical(7.0, 5.0, 30.0, 100);
        let v = g.violations();
        assert!(v.iter().any(|(f, _)| f == "geometry.r_c, geometry.r_e"));
        assert!(g.build_mesh().is_err());
    }

    #[test]
    fn refinement_halves_spacing() {
        let g = RadialGeometry::spherical(5.0, 7.0, 30.0, 512);
        let a = g.build_mesh().unwrap().max_spacing();
        let b = g
            .clone()
            .with_cells(1024)
            .build_mesh()
            .unwrap()
            .max_spacing();
        assert!((a / b - 2.0).abs() < 0.05, "{a} {b}");
    }
}
