//! Phantom generation and dynamic-scan simulation.
//!
//! A simulated scan projects the phantom once per subscan, warped by that
//! subscan's motion parameters, then adds Gaussian noise whose standard
//! deviation is a fraction of the peak clean projection value. Noise is
//! drawn from one counter-based stream per angle, so parallel generation is
//! seed-deterministic.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Geometry, ProjStack};
use crate::model::ScanModel;
use crate::projector::forward_project;
use crate::volume::{GridSpec, Volume};
use crate::warp::{warp_apply, AffineParams, InterpKernel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    /// Sum of seeded random Gaussian bumps, normalized to peak 1. Smooth
    /// enough for gradient checks at any blur level.
    GaussianBlobs { count: usize },
    /// Union of ellipsoids; `count = 1` is a single centered ellipsoid.
    /// Binary before blurring.
    Ellipsoids { count: usize },
    /// The classic head-phantom ellipse arrangement, 2D or 3D.
    SheppLoganLike,
    /// Faceted convex solid (octahedron clipped by a box), binary.
    BinaryDiamondLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub dims: Vec<usize>,
    pub seed: u64,
    /// Gaussian blur standard deviation in voxels; 0 disables blurring.
    pub smoothness: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.dims.len();
        if d != 2 && d != 3 {
            return Err(Error::invalid("phantom", format!("{d} axes, expected 2 or 3")));
        }
        if self.dims.iter().any(|&n| n < 8) {
            return Err(Error::invalid("phantom", "extents must be >= 8".to_string()));
        }
        if !(self.smoothness >= 0.0) || !self.smoothness.is_finite() {
            return Err(Error::invalid("phantom", "smoothness must be >= 0".to_string()));
        }
        Ok(())
    }
}

fn voxel_coords(i: usize, dims: &[usize], out: &mut [f64]) {
    let mut rem = i;
    for ax in (0..dims.len()).rev() {
        out[ax] = (rem % dims[ax]) as f64;
        rem /= dims[ax];
    }
}

/// Separable truncated-Gaussian blur with boundary renormalization; convex
/// weights keep values inside `[0, 1]`.
fn gaussian_blur(data: &mut Vec<f64>, dims: &[usize], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let s2 = 2.0 * sigma * sigma;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / s2).exp()).collect();
    let n_total = data.len();
    for axis in 0..dims.len() {
        let n = dims[axis] as isize;
        let stride: usize = dims[axis + 1..].iter().product();
        let mut out = vec![0.0; n_total];
        for (i, o) in out.iter_mut().enumerate() {
            let pos = ((i / stride) % dims[axis]) as isize;
            let base = i - pos as usize * stride;
            let mut acc = 0.0;
            let mut mass = 0.0;
            for (ki, w) in kernel.iter().enumerate() {
                let j = pos + ki as isize - r;
                if j >= 0 && j < n {
                    acc += w * data[base + j as usize * stride];
                    mass += w;
                }
            }
            *o = acc / mass;
        }
        *data = out;
    }
}

/// 2D ellipses of the classic head phantom: (value, a, b, x0, y0, phi_deg).
const HEAD_ELLIPSES_2D: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// 3D ellipsoids: (value, a, b, c, x0, y0, z0, phi_deg about z).
const HEAD_ELLIPSOIDS_3D: [(f64, f64, f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.81, 0.0, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.78, 0.0, -0.0184, 0.0, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.22, 0.0, 0.0, -18.0),
    (-0.2, 0.16, 0.41, 0.28, -0.22, 0.0, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.41, 0.0, 0.35, -0.15, 0.0),
    (0.1, 0.046, 0.046, 0.05, 0.0, 0.1, 0.25, 0.0),
    (0.1, 0.046, 0.046, 0.05, 0.0, -0.1, 0.25, 0.0),
    (0.1, 0.046, 0.023, 0.05, -0.08, -0.605, 0.0, 0.0),
    (0.1, 0.023, 0.023, 0.02, 0.0, -0.606, 0.0, 0.0),
    (0.1, 0.023, 0.046, 0.02, 0.06, -0.605, 0.0, 0.0),
];

/// Deterministic phantom with values in `[0, 1]`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let grid = GridSpec::uniform(&spec.dims);
    let dims = &spec.dims;
    let nd = dims.len();
    let center = grid.center.clone();
    let mut data = vec![0.0; grid.len()];
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    match &spec.kind {
        PhantomKind::GaussianBlobs { count } => {
            if *count == 0 {
                return Err(Error::invalid("phantom", "blob count must be >= 1".to_string()));
            }
            let min_dim = *dims.iter().min().unwrap() as f64;
            let blobs: Vec<(Vec<f64>, f64, f64)> = (0..*count)
                .map(|_| {
                    let c: Vec<f64> = dims
                        .iter()
                        .map(|&d| (0.28 + 0.44 * rng.gen::<f64>()) * d as f64)
                        .collect();
                    let sigma = (0.05 + 0.06 * rng.gen::<f64>()) * min_dim;
                    let amp = 0.4 + 0.6 * rng.gen::<f64>();
                    (c, sigma, amp)
                })
                .collect();
            let mut u = vec![0.0; nd];
            for (i, v) in data.iter_mut().enumerate() {
                voxel_coords(i, dims, &mut u);
                for (c, sigma, amp) in &blobs {
                    let r2: f64 = u.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
                    *v += amp * (-r2 / (2.0 * sigma * sigma)).exp();
                }
            }
            let max = data.iter().cloned().fold(0.0, f64::max);
            if max > 0.0 {
                for v in data.iter_mut() {
                    *v /= max;
                }
            }
        }
        PhantomKind::Ellipsoids { count } => {
            if *count == 0 {
                return Err(Error::invalid("phantom", "ellipsoid count must be >= 1".to_string()));
            }
            let mut shapes: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(*count);
            // First ellipsoid is centered with generous semi-axes.
            shapes.push((
                center.clone(),
                dims.iter().map(|&d| 0.3 * d as f64).collect(),
            ));
            for _ in 1..*count {
                let c: Vec<f64> = dims
                    .iter()
                    .map(|&d| (0.3 + 0.4 * rng.gen::<f64>()) * d as f64)
                    .collect();
                let semi: Vec<f64> = dims
                    .iter()
                    .map(|&d| (0.08 + 0.12 * rng.gen::<f64>()) * d as f64)
                    .collect();
                shapes.push((c, semi));
            }
            let mut u = vec![0.0; nd];
            for (i, v) in data.iter_mut().enumerate() {
                voxel_coords(i, dims, &mut u);
                for (c, semi) in &shapes {
                    let q: f64 = u
                        .iter()
                        .zip(c.iter().zip(semi))
                        .map(|(uu, (cc, ss))| ((uu - cc) / ss).powi(2))
                        .sum();
                    if q <= 1.0 {
                        *v = 1.0;
                        break;
                    }
                }
            }
        }
        PhantomKind::SheppLoganLike => {
            let half: Vec<f64> = dims.iter().map(|&d| d as f64 / 2.0).collect();
            let mut u = vec![0.0; nd];
            for (i, v) in data.iter_mut().enumerate() {
                voxel_coords(i, dims, &mut u);
                // Normalized coordinates in [-1, 1] per axis.
                let x = (u[0] - center[0]) / half[0];
                let y = (u[1] - center[1]) / half[1];
                let mut val = 0.0;
                if nd == 2 {
                    for &(a_val, a, b, x0, y0, phi) in &HEAD_ELLIPSES_2D {
                        let (s, c) = phi.to_radians().sin_cos();
                        let xr = c * (x - x0) + s * (y - y0);
                        let yr = -s * (x - x0) + c * (y - y0);
                        if (xr / a).powi(2) + (yr / b).powi(2) <= 1.0 {
                            val += a_val;
                        }
                    }
                } else {
                    let z = (u[2] - center[2]) / half[2];
                    for &(a_val, a, b, cc, x0, y0, z0, phi) in &HEAD_ELLIPSOIDS_3D {
                        let (s, c) = phi.to_radians().sin_cos();
                        let xr = c * (x - x0) + s * (y - y0);
                        let yr = -s * (x - x0) + c * (y - y0);
                        let zr = z - z0;
                        if (xr / a).powi(2) + (yr / b).powi(2) + (zr / cc).powi(2) <= 1.0 {
                            val += a_val;
                        }
                    }
                }
                *v = val.clamp(0.0, 1.0);
            }
        }
        PhantomKind::BinaryDiamondLike => {
            let half: Vec<f64> = dims.iter().map(|&d| d as f64 / 2.0).collect();
            let mut u = vec![0.0; nd];
            for (i, v) in data.iter_mut().enumerate() {
                voxel_coords(i, dims, &mut u);
                let xi: Vec<f64> = (0..nd).map(|ax| (u[ax] - center[ax]) / half[ax]).collect();
                let l1: f64 = xi.iter().map(|a| a.abs()).sum();
                let linf = xi.iter().map(|a| a.abs()).fold(0.0, f64::max);
                if l1 <= 0.9 && linf <= 0.55 {
                    *v = 1.0;
                }
            }
        }
    }
    gaussian_blur(&mut data, dims, spec.smoothness);
    Volume::new(grid, data)
}

/// Per-subscan motion plus the Gaussian noise level as a fraction of the
/// peak clean projection value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSchedule {
    pub params: Vec<AffineParams>,
    pub noise_std_fraction: f64,
}

impl MotionSchedule {
    pub fn noiseless(params: Vec<AffineParams>) -> Self {
        MotionSchedule {
            params,
            noise_std_fraction: 0.0,
        }
    }
}

/// Simulate a dynamic scan: `b_i = W_i M(p_i) x + noise`, deterministic for
/// a fixed seed and thread-count independent.
pub fn simulate_scan(
    phantom: &Volume,
    scan: &ScanModel,
    schedule: &MotionSchedule,
    seed: u64,
) -> Result<ProjStack> {
    scan.validate()?;
    phantom.validate()?;
    if phantom.dims() != scan.grid.dims.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "phantom dims {:?} != scan grid {:?}",
            phantom.dims(),
            scan.grid.dims
        )));
    }
    if schedule.params.len() != scan.n_subscans() {
        return Err(Error::ShapeMismatch(format!(
            "{} schedule entries for {} subscans",
            schedule.params.len(),
            scan.n_subscans()
        )));
    }
    if !(schedule.noise_std_fraction >= 0.0) {
        return Err(Error::invalid("schedule", "noise fraction must be >= 0".to_string()));
    }
    let det = scan.geometry.det_elems();
    let mut data = vec![0.0; scan.geometry.n_angles() * det];
    for (i, p) in schedule.params.iter().enumerate() {
        let (s, e) = scan.subscan_bounds[i];
        let moved = warp_apply(phantom, p, scan.kernel)?;
        let proj = forward_project(&moved, &scan.geometry, s..e)?;
        data[s * det..e * det].copy_from_slice(&proj);
    }
    if schedule.noise_std_fraction > 0.0 {
        let peak = data.iter().cloned().fold(0.0, f64::max);
        let std = schedule.noise_std_fraction * peak;
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("positive std");
            data.par_chunks_mut(det).enumerate().for_each(|(angle, chunk)| {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                rng.set_stream(angle as u64 + 1);
                for v in chunk.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            });
        }
    }
    ProjStack::new(scan.geometry.clone(), scan.subscan_bounds.clone(), data)
}

fn default_span() -> f64 {
    std::f64::consts::PI
}

/// Projection angles for a scenario: an explicit list or a uniform sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AngleSpec {
    List(Vec<f64>),
    Uniform {
        count: usize,
        #[serde(default)]
        start: f64,
        #[serde(default = "default_span")]
        span: f64,
    },
}

impl AngleSpec {
    pub fn angles(&self) -> Vec<f64> {
        match self {
            AngleSpec::List(list) => list.clone(),
            AngleSpec::Uniform { count, start, span } => (0..*count)
                .map(|i| start + span * i as f64 / *count as f64)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub angles: AngleSpec,
    pub det_count: Vec<usize>,
    pub det_spacing: Vec<f64>,
}

/// A complete simulated experiment, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub phantom: PhantomSpec,
    pub geometry: GeometrySpec,
    /// Angle count per subscan, summing to the total number of angles.
    pub subscans: Vec<usize>,
    pub schedule: Vec<AffineParams>,
    #[serde(default)]
    pub noise_std_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub kernel: Option<InterpKernel>,
}

impl Scenario {
    pub fn build(&self) -> Result<(Volume, ScanModel, MotionSchedule)> {
        let phantom = make_phantom(&self.phantom)?;
        let angles = self.geometry.angles.angles();
        let geometry = Geometry {
            angles,
            det_count: self.geometry.det_count.clone(),
            det_spacing: self.geometry.det_spacing.clone(),
        };
        geometry.validate()?;
        let total: usize = self.subscans.iter().sum();
        if total != geometry.n_angles() {
            return Err(Error::invalid(
                "scenario",
                format!("subscan counts sum to {total}, geometry has {} angles", geometry.n_angles()),
            ));
        }
        let mut bounds = Vec::with_capacity(self.subscans.len());
        let mut cursor = 0;
        for &count in &self.subscans {
            bounds.push((cursor, cursor + count));
            cursor += count;
        }
        let model = self
            .schedule
            .first()
            .ok_or_else(|| Error::invalid("scenario", "empty schedule".to_string()))?
            .model;
        let scan = ScanModel {
            geometry,
            subscan_bounds: bounds,
            motion_model: model,
            kernel: self.kernel.unwrap_or(InterpKernel::Cubic),
            grid: phantom.grid.clone(),
        };
        let schedule = MotionSchedule {
            params: self.schedule.clone(),
            noise_std_fraction: self.noise_std_fraction,
        };
        Ok((phantom, scan, schedule))
    }
}
