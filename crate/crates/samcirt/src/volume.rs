use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular voxel grid: extents, physical voxel pitch and the rotation/warp
/// center, given in voxel coordinates.
///
/// Voxel `u` sits at physical position `u * spacing` per axis; the grid is a
/// lattice of sample points interpolated by the projector and warp operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub center: Vec<f64>,
}

impl GridSpec {
    /// Unit spacing, center at the grid midpoint `(dims - 1) / 2`.
    pub fn uniform(dims: &[usize]) -> Self {
        GridSpec {
            dims: dims.to_vec(),
            spacing: vec![1.0; dims.len()],
            center: dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect(),
        }
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Total number of voxels.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims.len();
        if d != 2 && d != 3 {
            return Err(Error::invalid("grid", format!("{} axes, expected 2 or 3", d)));
        }
        if self.spacing.len() != d || self.center.len() != d {
            return Err(Error::invalid(
                "grid",
                "spacing/center length must match dims".to_string(),
            ));
        }
        if self.dims.iter().any(|&n| n < 1) {
            return Err(Error::invalid("grid", "all extents must be >= 1".to_string()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("grid", "spacing must be positive".to_string()));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("grid", "center must be finite".to_string()));
        }
        Ok(())
    }
}

/// Dense scalar field on a [`GridSpec`], stored row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: GridSpec,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: GridSpec) -> Result<Self> {
        grid.validate()?;
        let n = grid.len();
        Ok(Volume {
            grid,
            data: vec![0.0; n],
        })
    }

    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        let vol = Volume { grid, data };
        vol.validate()?;
        Ok(vol)
    }

    /// Unit spacing, centered grid.
    pub fn from_dims(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Volume::new(GridSpec::uniform(dims), data)
    }

    pub fn ndim(&self) -> usize {
        self.grid.ndim()
    }

    pub fn dims(&self) -> &[usize] {
        &self.grid.dims
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.data.len() != self.grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match grid {:?}",
                self.data.len(),
                self.grid.dims
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("volume", "non-finite voxel value".to_string()));
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
