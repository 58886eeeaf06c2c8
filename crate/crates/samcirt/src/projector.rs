//! Parallel-beam forward projector and its exact adjoint.
//!
//! Line integrals are evaluated Joseph-style: rays are sampled at every voxel
//! slab along the dominant axis (one voxel-edge step), with linear
//! interpolation transverse to it, and each sample is weighted by the ray
//! length per slab, `spacing_dom / |d_dom|`. Voxels outside the grid
//! contribute zero. The adjoint scatters exactly the same weights, so
//! `<W x, y> = <x, W^T y>` holds to rounding error.
//!
//! Angle 0 projects along +y; see [`crate::geometry::Geometry`] for the full
//! set of conventions.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::volume::{GridSpec, Volume};

/// Ray description shared by the forward and adjoint paths: transverse voxel
/// coordinate is affine in the slab index, `tv(k) = t0 + k * dt`.
struct Ray {
    dom: usize,
    t0: f64,
    dt: f64,
    /// Constant z voxel coordinate (3D only).
    vz: f64,
    /// Ray length per dominant-axis slab.
    step_len: f64,
}

fn make_ray(grid: &GridSpec, theta: f64, tau: f64, zeta: f64) -> Ray {
    let sp = &grid.spacing;
    let c = &grid.center;
    let (sin_t, cos_t) = theta.sin_cos();
    let d = [-sin_t, cos_t];
    let e = [cos_t, sin_t];
    // Point the ray passes through, physical coordinates (in-plane part).
    let q = [c[0] * sp[0] + tau * e[0], c[1] * sp[1] + tau * e[1]];
    let dom = if (d[0] / sp[0]).abs() >= (d[1] / sp[1]).abs() { 0 } else { 1 };
    let oth = 1 - dom;
    let ratio = d[oth] / d[dom];
    let t0 = (q[oth] - q[dom] * ratio) / sp[oth];
    let dt = sp[dom] * ratio / sp[oth];
    let vz = if grid.ndim() == 3 {
        c[2] + zeta / sp[2]
    } else {
        0.0
    };
    Ray {
        dom,
        t0,
        dt,
        vz,
        step_len: (sp[dom] / d[dom]).abs(),
    }
}

/// Walk one ray, calling `visit(flat_voxel_index, weight)` for every
/// interpolation tap. Weights include the per-slab ray length.
fn visit_ray(grid: &GridSpec, ray: &Ray, mut visit: impl FnMut(usize, f64)) {
    let dims = &grid.dims;
    let dom = ray.dom;
    let oth = 1 - dom;
    let n_oth = dims[oth] as isize;
    match grid.ndim() {
        2 => {
            // Flat index = u0 * dims[1] + u1.
            let (stride_dom, stride_oth) = if dom == 0 {
                (dims[1], 1)
            } else {
                (1, dims[1])
            };
            for k in 0..dims[dom] {
                let tv = ray.t0 + k as f64 * ray.dt;
                let i0 = tv.floor();
                let f = tv - i0;
                let i0 = i0 as isize;
                let base = k * stride_dom;
                if i0 >= 0 && i0 < n_oth {
                    visit(base + i0 as usize * stride_oth, (1.0 - f) * ray.step_len);
                }
                if i0 + 1 >= 0 && i0 + 1 < n_oth {
                    visit(base + (i0 + 1) as usize * stride_oth, f * ray.step_len);
                }
            }
        }
        3 => {
            let strides = [dims[1] * dims[2], dims[2], 1];
            let n_z = dims[2] as isize;
            let iz0 = ray.vz.floor();
            let fz = ray.vz - iz0;
            let iz0 = iz0 as isize;
            let z_taps = [(iz0, 1.0 - fz), (iz0 + 1, fz)];
            for k in 0..dims[dom] {
                let tv = ray.t0 + k as f64 * ray.dt;
                let i0 = tv.floor();
                let f = tv - i0;
                let i0 = i0 as isize;
                let o_taps = [(i0, 1.0 - f), (i0 + 1, f)];
                for &(io, wo) in &o_taps {
                    if io < 0 || io >= n_oth {
                        continue;
                    }
                    let base = k * strides[dom] + io as usize * strides[oth];
                    for &(iz, wz) in &z_taps {
                        if iz < 0 || iz >= n_z {
                            continue;
                        }
                        visit(base + iz as usize * strides[2], wo * wz * ray.step_len);
                    }
                }
            }
        }
        _ => unreachable!("grid validated to 2 or 3 axes"),
    }
}

/// Detector offsets are centered: element `t` sits at
/// `(t - (n - 1) / 2) * pitch` from the rotation axis.
fn det_offset(t: usize, n: usize, pitch: f64) -> f64 {
    (t as f64 - (n as f64 - 1.0) / 2.0) * pitch
}

fn check_args(grid: &GridSpec, geom: &Geometry, angle_range: &Range<usize>) -> Result<()> {
    grid.validate()?;
    geom.validate()?;
    if grid.ndim() != geom.ndim() {
        return Err(Error::DimensionMismatch(format!(
            "volume is {}D but geometry is {}D",
            grid.ndim(),
            geom.ndim()
        )));
    }
    if angle_range.is_empty() {
        return Err(Error::invalid("angle_range", "empty".to_string()));
    }
    if angle_range.end > geom.n_angles() {
        return Err(Error::IndexOutOfRange(format!(
            "angle range {:?} exceeds {} angles",
            angle_range,
            geom.n_angles()
        )));
    }
    Ok(())
}

/// Project one angle of a volume into `out` (length `det_elems`).
fn forward_one_angle(vol: &Volume, geom: &Geometry, angle: usize, out: &mut [f64]) {
    let grid = &vol.grid;
    let theta = geom.angles[angle];
    match geom.ndim() {
        2 => {
            let n = geom.det_count[0];
            for (t, o) in out.iter_mut().enumerate() {
                let tau = det_offset(t, n, geom.det_spacing[0]);
                let ray = make_ray(grid, theta, tau, 0.0);
                let mut acc = 0.0;
                visit_ray(grid, &ray, |idx, w| acc += w * vol.data[idx]);
                *o = acc;
            }
        }
        3 => {
            let (n_c, n_r) = (geom.det_count[0], geom.det_count[1]);
            for r in 0..n_r {
                let zeta = det_offset(r, n_r, geom.det_spacing[1]);
                for t in 0..n_c {
                    let tau = det_offset(t, n_c, geom.det_spacing[0]);
                    let ray = make_ray(grid, theta, tau, zeta);
                    let mut acc = 0.0;
                    visit_ray(grid, &ray, |idx, w| acc += w * vol.data[idx]);
                    out[r * n_c + t] = acc;
                }
            }
        }
        _ => unreachable!(),
    }
}

/// Line integrals of the interpolated volume for every angle in
/// `angle_range`, angle-major. Linear in `vol.data`.
pub fn forward_project(vol: &Volume, geom: &Geometry, angle_range: Range<usize>) -> Result<Vec<f64>> {
    check_args(&vol.grid, geom, &angle_range)?;
    let det = geom.det_elems();
    let mut out = vec![0.0; angle_range.len() * det];
    // Each angle writes its own slice, so this is deterministic under any
    // thread count.
    out.par_chunks_mut(det)
        .zip(angle_range.clone().into_par_iter())
        .for_each(|(chunk, angle)| forward_one_angle(vol, geom, angle, chunk));
    Ok(out)
}

fn back_one_angle(proj: &[f64], grid: &GridSpec, geom: &Geometry, angle: usize, acc: &mut [f64]) {
    let theta = geom.angles[angle];
    match geom.ndim() {
        2 => {
            let n = geom.det_count[0];
            for (t, &p) in proj.iter().enumerate() {
                let tau = det_offset(t, n, geom.det_spacing[0]);
                let ray = make_ray(grid, theta, tau, 0.0);
                visit_ray(grid, &ray, |idx, w| acc[idx] += w * p);
            }
        }
        3 => {
            let (n_c, n_r) = (geom.det_count[0], geom.det_count[1]);
            for r in 0..n_r {
                let zeta = det_offset(r, n_r, geom.det_spacing[1]);
                for t in 0..n_c {
                    let tau = det_offset(t, n_c, geom.det_spacing[0]);
                    let ray = make_ray(grid, theta, tau, zeta);
                    let p = proj[r * n_c + t];
                    visit_ray(grid, &ray, |idx, w| acc[idx] += w * p);
                }
            }
        }
        _ => unreachable!(),
    }
}

/// Exact transpose of [`forward_project`] as a linear map.
///
/// `proj` must be shaped `angle_range x detector grid`. Per-angle partial
/// images are accumulated in angle order so the result is bit-stable across
/// thread counts.
pub fn back_project(
    proj: &[f64],
    grid: &GridSpec,
    geom: &Geometry,
    angle_range: Range<usize>,
) -> Result<Volume> {
    check_args(grid, geom, &angle_range)?;
    let det = geom.det_elems();
    if proj.len() != angle_range.len() * det {
        return Err(Error::ShapeMismatch(format!(
            "projection buffer has {} values, expected {} angles x {}",
            proj.len(),
            angle_range.len(),
            det
        )));
    }
    let partials: Vec<Vec<f64>> = angle_range
        .clone()
        .into_par_iter()
        .enumerate()
        .map(|(i, angle)| {
            let mut acc = vec![0.0; grid.len()];
            back_one_angle(&proj[i * det..(i + 1) * det], grid, geom, angle, &mut acc);
            acc
        })
        .collect();
    let mut data = vec![0.0; grid.len()];
    for part in partials {
        for (d, v) in data.iter_mut().zip(part) {
            *d += v;
        }
    }
    Ok(Volume {
        grid: grid.clone(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::dot;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn random_volume(dims: &[usize], seed: u64) -> Volume {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let grid = GridSpec::uniform(dims);
        let data = (0..grid.len()).map(|_| rng.gen::<f64>()).collect();
        Volume::new(grid, data).unwrap()
    }

    fn angles(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 * std::f64::consts::PI / n as f64).collect()
    }

    #[test]
    fn zero_volume_projects_to_zero() {
        let vol = Volume::zeros(GridSpec::uniform(&[8, 8])).unwrap();
        let geom = Geometry::parallel_2d(angles(4), 12, 1.0);
        let proj = forward_project(&vol, &geom, 0..4).unwrap();
        assert!(proj.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_projections_backproject_to_zero() {
        let geom = Geometry::parallel_2d(angles(4), 12, 1.0);
        let grid = GridSpec::uniform(&[8, 8]);
        let vol = back_project(&vec![0.0; 48], &grid, &geom, 0..4).unwrap();
        assert!(vol.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_linear() {
        let x = random_volume(&[16, 16], 1);
        let y = random_volume(&[16, 16], 2);
        let geom = Geometry::parallel_2d(angles(6), 24, 1.0);
        let (a, b) = (0.7, -1.3);
        let mut comb = x.clone();
        for (c, (xv, yv)) in comb.data.iter_mut().zip(x.data.iter().zip(&y.data)) {
            *c = a * xv + b * yv;
        }
        let px = forward_project(&x, &geom, 0..6).unwrap();
        let py = forward_project(&y, &geom, 0..6).unwrap();
        let pc = forward_project(&comb, &geom, 0..6).unwrap();
        for i in 0..pc.len() {
            let want = a * px[i] + b * py[i];
            assert!(
                (pc[i] - want).abs() <= 1e-10 * want.abs().max(1.0),
                "linearity broke at {i}: {} vs {}",
                pc[i],
                want
            );
        }
    }

    #[test]
    fn adjoint_identity_2d() {
        let x = random_volume(&[16, 16], 3);
        let geom = Geometry::parallel_2d(angles(12), 24, 1.0);
        let wx = forward_project(&x, &geom, 0..12).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let y: Vec<f64> = (0..wx.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let wty = back_project(&y, &x.grid, &geom, 0..12).unwrap();
        let lhs = dot(&wx, &y);
        let rhs = dot(&x.data, &wty.data);
        let scale = crate::volume::norm(&wx) * crate::volume::norm(&y);
        assert!(
            (lhs - rhs).abs() / scale <= 1e-6,
            "adjoint broke: {lhs} vs {rhs}"
        );
    }

    #[test]
    fn block_concatenation_matches_full_range() {
        let x = random_volume(&[16, 16], 5);
        let geom = Geometry::parallel_2d(angles(9), 24, 1.0);
        let full = forward_project(&x, &geom, 0..9).unwrap();
        let mut cat = forward_project(&x, &geom, 0..4).unwrap();
        cat.extend(forward_project(&x, &geom, 4..9).unwrap());
        assert_eq!(full, cat);
    }

    #[test]
    fn opposite_angle_flips_detector() {
        let x = random_volume(&[32, 32], 6);
        let theta = 0.37;
        let geom = Geometry::parallel_2d(vec![theta, theta + std::f64::consts::PI], 48, 1.0);
        let proj = forward_project(&x, &geom, 0..2).unwrap();
        let (a, b) = proj.split_at(48);
        for t in 0..48 {
            let diff = (a[t] - b[47 - t]).abs();
            assert!(diff <= 1e-6 * a[t].abs().max(1.0), "t={t}: {} vs {}", a[t], b[47 - t]);
        }
    }

    #[test]
    fn disk_projection_matches_chord_length() {
        // Centered disk of radius r, unit intensity: projection at offset tau
        // is the chord length 2 sqrt(r^2 - tau^2).
        let n = 128;
        let r = 40.0;
        let grid = GridSpec::uniform(&[n, n]);
        let c = &grid.center.clone();
        let data: Vec<f64> = (0..n * n)
            .map(|i| {
                let (u0, u1) = ((i / n) as f64, (i % n) as f64);
                if (u0 - c[0]).powi(2) + (u1 - c[1]).powi(2) <= r * r {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let vol = Volume::new(grid, data).unwrap();
        let geom = Geometry::parallel_2d(vec![0.0, 0.9, 2.2], n, 1.0);
        let proj = forward_project(&vol, &geom, 0..3).unwrap();
        for a in 0..3 {
            for t in 0..n {
                let tau = det_offset(t, n, 1.0);
                if tau.abs() < 0.8 * r {
                    let want = 2.0 * (r * r - tau * tau).sqrt();
                    let got = proj[a * n + t];
                    assert!(
                        (got - want).abs() <= 2.0,
                        "angle {a}, tau {tau}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let vol = Volume::zeros(GridSpec::uniform(&[8, 8])).unwrap();
        let geom = Geometry::parallel_2d(angles(4), 12, 1.0);
        assert!(forward_project(&vol, &geom, 0..0).is_err());
        assert!(forward_project(&vol, &geom, 0..5).is_err());
        let geom3 = Geometry::parallel_3d(angles(4), [8, 8], [1.0, 1.0]);
        assert!(forward_project(&vol, &geom3, 0..4).is_err());
        assert!(back_project(&vec![0.0; 7], &vol.grid, &geom, 0..4).is_err());
    }
}
