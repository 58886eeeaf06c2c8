//! Independent oracles for the integration suites. Everything here is
//! derived from first principles (documented conventions only) with naive
//! loops, deliberately avoiding the library's computational paths.

#![allow(dead_code)]

use samcirt::geometry::Geometry;
use samcirt::projector::{back_project, forward_project};
use samcirt::volume::{GridSpec, Volume};
use samcirt::warp::{AffineParams, InterpKernel};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got
        .iter()
        .zip(want)
        .map(|(g, w)| (g - w).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / l2(want).max(1e-30)
}

/// Smooth multi-blob phantom for convergence and gradient tests.
pub fn blob_phantom(dims: &[usize], seed: u64) -> Volume {
    samcirt::simulation::make_phantom(&samcirt::simulation::PhantomSpec {
        kind: samcirt::simulation::PhantomKind::GaussianBlobs { count: 5 },
        dims: dims.to_vec(),
        seed,
        smoothness: 1.0,
    })
    .unwrap()
}

/// Dense projection matrix assembled row by row from the documented ray
/// conventions: angle 0 along +y, detector axis `(cos, sin)`, rays sampled
/// at unit slabs along the dominant axis with linear transverse
/// interpolation, each sample weighted by the per-slab ray length. 2D only.
pub fn dense_projector_matrix(grid: &GridSpec, geom: &Geometry) -> Vec<Vec<f64>> {
    assert_eq!(grid.ndim(), 2);
    let (n0, n1) = (grid.dims[0], grid.dims[1]);
    let n_det = geom.det_count[0];
    let pitch = geom.det_spacing[0];
    let sp = &grid.spacing;
    let c = &grid.center;
    let mut rows = Vec::new();
    for &theta in &geom.angles {
        let d = [-theta.sin(), theta.cos()];
        let e = [theta.cos(), theta.sin()];
        for t in 0..n_det {
            let tau = (t as f64 - (n_det as f64 - 1.0) / 2.0) * pitch;
            // A point on the ray, physical coordinates.
            let q = [c[0] * sp[0] + tau * e[0], c[1] * sp[1] + tau * e[1]];
            let dom = if (d[0] / sp[0]).abs() >= (d[1] / sp[1]).abs() { 0 } else { 1 };
            let oth = 1 - dom;
            let n_dom = if dom == 0 { n0 } else { n1 };
            let n_oth = if dom == 0 { n1 } else { n0 };
            let step_len = (sp[dom] / d[dom]).abs();
            let mut row = vec![0.0; n0 * n1];
            for k in 0..n_dom {
                // Solve q + s d = k * spacing on the dominant axis.
                let s = (k as f64 * sp[dom] - q[dom]) / d[dom];
                let trans = (q[oth] + s * d[oth]) / sp[oth];
                let i0 = trans.floor();
                let frac = trans - i0;
                for (tap, w) in [(i0 as isize, 1.0 - frac), (i0 as isize + 1, frac)] {
                    if tap < 0 || tap >= n_oth as isize {
                        continue;
                    }
                    let (u0, u1) = if dom == 0 {
                        (k, tap as usize)
                    } else {
                        (tap as usize, k)
                    };
                    row[u0 * n1 + u1] += w * step_len;
                }
            }
            rows.push(row);
        }
    }
    rows
}

/// Piecewise Catmull-Rom weight as a function of distance; an independent
/// form of the per-offset polynomials used by the library.
fn catmull_rom(dist: f64) -> f64 {
    let d = dist.abs();
    if d <= 1.0 {
        1.5 * d * d * d - 2.5 * d * d + 1.0
    } else if d < 2.0 {
        -0.5 * d * d * d + 2.5 * d * d - 4.0 * d + 2.0
    } else {
        0.0
    }
}

fn linear_weight(dist: f64) -> f64 {
    let d = dist.abs();
    if d < 1.0 {
        1.0 - d
    } else {
        0.0
    }
}

/// Dense warp matrix `M[out, in]` assembled voxel by voxel from the
/// pull-back definition `out(u) = x(A u + c - A c + t)` with
/// distance-form kernel weights. 2D only.
pub fn dense_warp_matrix(grid: &GridSpec, p: &AffineParams, kernel: InterpKernel) -> Vec<Vec<f64>> {
    assert_eq!(grid.ndim(), 2);
    let (n0, n1) = (grid.dims[0], grid.dims[1]);
    let (a, t) = p.to_matrix().unwrap();
    let c = &grid.center;
    let weight = |d: f64| match kernel {
        InterpKernel::Linear => linear_weight(d),
        InterpKernel::Cubic => catmull_rom(d),
    };
    let reach = match kernel {
        InterpKernel::Linear => 1.0,
        InterpKernel::Cubic => 2.0,
    };
    let mut rows = Vec::new();
    for u0 in 0..n0 {
        for u1 in 0..n1 {
            let u = [u0 as f64, u1 as f64];
            let mut uhat = [0.0; 2];
            for i in 0..2 {
                uhat[i] = a[i][0] * (u[0] - c[0]) + a[i][1] * (u[1] - c[1]) + c[i] + t[i];
            }
            let mut row = vec![0.0; n0 * n1];
            for v0 in 0..n0 {
                for v1 in 0..n1 {
                    let d0 = uhat[0] - v0 as f64;
                    let d1 = uhat[1] - v1 as f64;
                    if d0.abs() < reach && d1.abs() < reach {
                        row[v0 * n1 + v1] = weight(d0) * weight(d1);
                    }
                }
            }
            rows.push(row);
        }
    }
    rows
}

pub fn mat_vec(rows: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    rows.iter().map(|row| dot(row, x)).collect()
}

pub fn mat_transpose_vec(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let n = rows[0].len();
    let mut out = vec![0.0; n];
    for (row, &yv) in rows.iter().zip(y) {
        for (o, &w) in out.iter_mut().zip(row) {
            *o += w * yv;
        }
    }
    out
}

/// Naive windowed-statistics SSIM: per-pixel loops over a truncated
/// Gaussian window renormalized to the in-bounds mass.
pub fn naive_ssim(a: &[f64], b: &[f64], shape: &[usize], params: &samcirt::SsimParams) -> f64 {
    let radius = ((3.0 * params.window).ceil() as isize).max(1);
    let s2 = 2.0 * params.window * params.window;
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let (n0, n1) = match shape.len() {
        1 => (shape[0] as isize, 1isize),
        _ => (shape[0] as isize, shape[1] as isize),
    };
    let idx = |i0: isize, i1: isize| (i0 * n1 + i1) as usize;
    let mut acc = 0.0;
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            let mut mass = 0.0;
            let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for k0 in -radius..=radius {
                for k1 in -radius..=radius {
                    let j0 = i0 + k0;
                    let j1 = i1 + k1;
                    if j0 < 0 || j0 >= n0 || j1 < 0 || j1 >= n1 {
                        continue;
                    }
                    if shape.len() == 1 && k1 != 0 {
                        continue;
                    }
                    let w = (-((k0 * k0) as f64) / s2).exp()
                        * if shape.len() == 1 {
                            1.0
                        } else {
                            (-((k1 * k1) as f64) / s2).exp()
                        };
                    let av = a[idx(j0, j1)];
                    let bv = b[idx(j0, j1)];
                    mass += w;
                    ma += w * av;
                    mb += w * bv;
                    maa += w * av * av;
                    mbb += w * bv * bv;
                    mab += w * av * bv;
                }
            }
            let mu_a = ma / mass;
            let mu_b = mb / mass;
            let var_a = maa / mass - mu_a * mu_a;
            let var_b = mbb / mass - mu_b * mu_b;
            let cov = mab / mass - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            acc += num / den;
        }
    }
    acc / (n0 * n1) as f64
}

/// Conjugate gradients on the normal equations `W^T W x = W^T b`, using the
/// projector pair as a black-box operator. Oracle for the static solver.
pub fn cg_normal_equations(
    grid: &GridSpec,
    geom: &Geometry,
    b: &[f64],
    iters: usize,
) -> Vec<f64> {
    let n_angles = geom.n_angles();
    let apply = |x: &[f64]| -> Vec<f64> {
        let vol = Volume::new(grid.clone(), x.to_vec()).unwrap();
        let proj = forward_project(&vol, geom, 0..n_angles).unwrap();
        back_project(&proj, grid, geom, 0..n_angles).unwrap().data
    };
    let rhs = back_project(b, grid, geom, 0..n_angles).unwrap().data;
    let mut x = vec![0.0; grid.len()];
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    for _ in 0..iters {
        if rs.sqrt() < 1e-14 {
            break;
        }
        let ap = apply(&p);
        let alpha = rs / dot(&p, &ap);
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
    }
    x
}
