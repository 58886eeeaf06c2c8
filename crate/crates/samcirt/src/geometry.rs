use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parallel-beam acquisition geometry.
///
/// Conventions (fixed once so runs are reproducible):
/// * angle 0 projects along the +y axis; the detector axis at angle `theta`
///   is `e = (cos theta, sin theta)` and the ray direction is
///   `d = (-sin theta, cos theta)`;
/// * the detector is centered on the rotation axis;
/// * in 3D the rotation axis is z, detector rows run along z and
///   `det_count = [columns, rows]`, `det_spacing = [column pitch, row pitch]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Projection angles in radians, in acquisition order.
    pub angles: Vec<f64>,
    /// Detector elements: `[n]` for 2D scans, `[cols, rows]` for 3D.
    pub det_count: Vec<usize>,
    /// Detector pitch per detector axis, physical units.
    pub det_spacing: Vec<f64>,
}

impl Geometry {
    pub fn parallel_2d(angles: Vec<f64>, det_count: usize, det_spacing: f64) -> Self {
        Geometry {
            angles,
            det_count: vec![det_count],
            det_spacing: vec![det_spacing],
        }
    }

    pub fn parallel_3d(angles: Vec<f64>, det_count: [usize; 2], det_spacing: [f64; 2]) -> Self {
        Geometry {
            angles,
            det_count: det_count.to_vec(),
            det_spacing: det_spacing.to_vec(),
        }
    }

    /// Dimensionality of the volumes this geometry projects (2 or 3).
    pub fn ndim(&self) -> usize {
        self.det_count.len() + 1
    }

    /// Detector elements per projection angle.
    pub fn det_elems(&self) -> usize {
        self.det_count.iter().product()
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.angles.is_empty() {
            return Err(Error::invalid("geometry", "empty angle list".to_string()));
        }
        if self.angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("geometry", "non-finite angle".to_string()));
        }
        let d = self.det_count.len();
        if d != 1 && d != 2 {
            return Err(Error::invalid(
                "geometry",
                format!("{} detector axes, expected 1 or 2", d),
            ));
        }
        if self.det_spacing.len() != d {
            return Err(Error::invalid(
                "geometry",
                "det_spacing length must match det_count".to_string(),
            ));
        }
        if self.det_count.iter().any(|&n| n < 1) {
            return Err(Error::invalid("geometry", "det_count must be >= 1".to_string()));
        }
        if self.det_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("geometry", "det_spacing must be positive".to_string()));
        }
        Ok(())
    }
}

/// Validate subscan bounds: half-open `[start, end)` angle-index ranges that
/// are non-empty, ordered and cover `0..n_angles` exactly once.
pub fn validate_subscan_bounds(bounds: &[(usize, usize)], n_angles: usize) -> Result<()> {
    if bounds.is_empty() {
        return Err(Error::invalid("subscan_bounds", "empty".to_string()));
    }
    let mut cursor = 0usize;
    for &(s, e) in bounds {
        if s != cursor || e <= s {
            return Err(Error::invalid(
                "subscan_bounds",
                format!("range ({s}, {e}) breaks contiguous coverage at {cursor}"),
            ));
        }
        cursor = e;
    }
    if cursor != n_angles {
        return Err(Error::invalid(
            "subscan_bounds",
            format!("bounds cover {cursor} angles, geometry has {n_angles}"),
        ));
    }
    Ok(())
}

/// Stack of projection images with subscan boundaries.
///
/// `data` is angle-major: projection `a` occupies
/// `data[a * det_elems .. (a + 1) * det_elems]`, row-major within an angle
/// (`rows x cols` for 3D).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjStack {
    pub geometry: Geometry,
    /// Half-open `[start, end)` angle-index ranges, in order.
    pub subscan_bounds: Vec<(usize, usize)>,
    pub data: Vec<f64>,
}

impl ProjStack {
    pub fn new(
        geometry: Geometry,
        subscan_bounds: Vec<(usize, usize)>,
        data: Vec<f64>,
    ) -> Result<Self> {
        let stack = ProjStack {
            geometry,
            subscan_bounds,
            data,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        validate_subscan_bounds(&self.subscan_bounds, self.geometry.n_angles())?;
        let expect = self.geometry.n_angles() * self.geometry.det_elems();
        if self.data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "projection data length {} != angles x detector = {}",
                self.data.len(),
                expect
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("projections", "non-finite value".to_string()));
        }
        Ok(())
    }

    pub fn n_subscans(&self) -> usize {
        self.subscan_bounds.len()
    }

    /// Projection image for one angle.
    pub fn angle_slice(&self, angle: usize) -> &[f64] {
        let det = self.geometry.det_elems();
        &self.data[angle * det..(angle + 1) * det]
    }

    /// All projections of subscan `i`, contiguous.
    pub fn subscan_slice(&self, i: usize) -> Result<&[f64]> {
        let &(s, e) = self
            .subscan_bounds
            .get(i)
            .ok_or_else(|| Error::IndexOutOfRange(format!("subscan {i}")))?;
        let det = self.geometry.det_elems();
        Ok(&self.data[s * det..e * det])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_must_tile_the_angle_list() {
        assert!(validate_subscan_bounds(&[(0, 3), (3, 5)], 5).is_ok());
        assert!(validate_subscan_bounds(&[(0, 3), (4, 5)], 5).is_err());
        assert!(validate_subscan_bounds(&[(0, 3), (3, 3)], 5).is_err());
        assert!(validate_subscan_bounds(&[(0, 3)], 5).is_err());
        assert!(validate_subscan_bounds(&[], 0).is_err());
    }

    #[test]
    fn stack_shape_checked() {
        let g = Geometry::parallel_2d(vec![0.0, 0.5], 4, 1.0);
        assert!(ProjStack::new(g.clone(), vec![(0, 2)], vec![0.0; 8]).is_ok());
        assert!(ProjStack::new(g, vec![(0, 2)], vec![0.0; 7]).is_err());
    }
}
