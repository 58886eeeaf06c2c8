//! Self-check suites behind the `check` CLI verbs: adjoint identities,
//! gradient consistency and partition-solver agreement, with pinned
//! tolerances. Each check reports the measured error so breaches are easy to
//! diagnose.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::geometry::{Geometry, ProjStack};
use crate::model::{grad_p, grad_x, objective, JointState, ScanModel};
use crate::partition::{partition_bruteforce, partition_exact};
use crate::projector::{back_project, forward_project};
use crate::simulation::{make_phantom, PhantomKind, PhantomSpec};
use crate::volume::{dot, norm, GridSpec, Volume};
use crate::warp::{
    warp_adjoint, warp_apply, warp_derivative_jvp, warp_derivative_vjp, AffineParams,
    InterpKernel, MotionKind, MotionModel,
};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    /// Measured error (or 0/1 disagreement count for exact checks).
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckResult {
    fn new(name: String, value: f64, tolerance: f64) -> Self {
        CheckResult {
            pass: value <= tolerance,
            name,
            value,
            tolerance,
        }
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.pass)
}

fn random_volume(dims: &[usize], rng: &mut ChaCha12Rng) -> Volume {
    let grid = GridSpec::uniform(dims);
    let data = (0..grid.len()).map(|_| rng.gen::<f64>()).collect();
    Volume::new(grid, data).unwrap()
}

fn uniform_angles(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| i as f64 * std::f64::consts::PI / n as f64)
        .collect()
}

fn perturbed_params(model: MotionModel, rng: &mut ChaCha12Rng, scale: f64) -> AffineParams {
    let mut p = AffineParams::identity(model);
    for v in p.raw.iter_mut() {
        *v += scale * (rng.gen::<f64>() - 0.5);
    }
    p
}

/// Dot-product adjoint tests for the projector (grids x angle counts, 2D and
/// 3D) and the warp (grids x motion models x kernels). Tolerance 1e-6.
pub fn adjoint_checks(seed: u64) -> Vec<CheckResult> {
    let tol = 1e-6;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for nd in [2usize, 3] {
        for n in [8usize, 16, 32] {
            let dims = vec![n; nd];
            for n_angles in [4usize, 12, 36] {
                let geom = match nd {
                    2 => Geometry::parallel_2d(uniform_angles(n_angles), n + n / 2, 1.0),
                    _ => Geometry::parallel_3d(uniform_angles(n_angles), [n + n / 2, n], [1.0, 1.0]),
                };
                let x = random_volume(&dims, &mut rng);
                let wx = forward_project(&x, &geom, 0..n_angles).unwrap();
                let y: Vec<f64> = (0..wx.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
                let wty = back_project(&y, &x.grid, &geom, 0..n_angles).unwrap();
                let err = (dot(&wx, &y) - dot(&x.data, &wty.data)).abs()
                    / (norm(&wx) * norm(&y)).max(1e-30);
                results.push(CheckResult::new(
                    format!("projector adjoint {nd}D {n}^{nd} grid, {n_angles} angles"),
                    err,
                    tol,
                ));
            }
            for kind in [
                MotionKind::General,
                MotionKind::Rigid,
                MotionKind::Scaling,
                MotionKind::Translation,
            ] {
                let model = MotionModel::new(kind, nd).unwrap();
                for kernel in [InterpKernel::Linear, InterpKernel::Cubic] {
                    let x = random_volume(&dims, &mut rng);
                    let y = random_volume(&dims, &mut rng);
                    let p = perturbed_params(model, &mut rng, 0.1);
                    let mx = warp_apply(&x, &p, kernel).unwrap();
                    let mty = warp_adjoint(&y, &p, kernel).unwrap();
                    let err = (dot(&mx.data, &y.data) - dot(&x.data, &mty.data)).abs()
                        / (norm(&mx.data) * norm(&y.data)).max(1e-30);
                    results.push(CheckResult::new(
                        format!("warp adjoint {nd}D {n}^{nd} grid, {kind:?} {kernel:?}"),
                        err,
                        tol,
                    ));
                }
            }
        }
    }
    results
}

fn smooth_phantom(dims: &[usize], seed: u64) -> Volume {
    make_phantom(&PhantomSpec {
        kind: PhantomKind::GaussianBlobs { count: 5 },
        dims: dims.to_vec(),
        seed,
        smoothness: 1.0,
    })
    .unwrap()
}

fn gradient_instance(seed: u64) -> (JointState, ScanModel, ProjStack) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let scan = ScanModel {
        geometry: Geometry::parallel_2d(uniform_angles(8), 36, 1.0),
        subscan_bounds: vec![(0, 5), (5, 8)],
        motion_model: MotionModel::new(MotionKind::Rigid, 2).unwrap(),
        kernel: InterpKernel::Cubic,
        grid: GridSpec::uniform(&[24, 24]),
    };
    let x = smooth_phantom(&[24, 24], seed);
    let p: Vec<AffineParams> = (0..2)
        .map(|_| perturbed_params(scan.motion_model, &mut rng, 0.06))
        .collect();
    // Data from a nearby state, so residuals are structured but nonzero.
    let truth = JointState {
        x: x.clone(),
        p: p.iter()
            .map(|pp| {
                let mut t = pp.clone();
                t.raw.iter_mut().for_each(|v| *v += 0.02 * (rng.gen::<f64>() - 0.5));
                t
            })
            .collect(),
    };
    let det = scan.geometry.det_elems();
    let mut data = vec![0.0; scan.geometry.n_angles() * det];
    for i in 0..2 {
        let (s, e) = scan.subscan_bounds[i];
        let moved = warp_apply(&truth.x, &truth.p[i], scan.kernel).unwrap();
        let proj = forward_project(&moved, &scan.geometry, s..e).unwrap();
        data[s * det..e * det].copy_from_slice(&proj);
    }
    let b = ProjStack::new(scan.geometry.clone(), scan.subscan_bounds.clone(), data).unwrap();
    (JointState { x, p }, scan, b)
}

/// Central-difference checks of the analytic gradients and the jvp/vjp
/// duality. grad_x: 1e-6; grad_p and Jacobians: 1e-3 (cubic kernel, smooth
/// phantoms); duality: 1e-8.
pub fn gradient_checks(seed: u64) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed);
    let (state, scan, b) = gradient_instance(seed);

    // grad_x against central differences along a random direction. The
    // objective is quadratic in x, so differences are exact to rounding.
    {
        let g = grad_x(&state, &scan, &b).unwrap();
        let dir: Vec<f64> = (0..state.x.data.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let h = 1e-3;
        let mut hi = state.clone();
        let mut lo = state.clone();
        for ((a, c), d) in hi.x.data.iter_mut().zip(lo.x.data.iter_mut()).zip(&dir) {
            *a += h * d;
            *c -= h * d;
        }
        let fd =
            (objective(&hi, &scan, &b).unwrap() - objective(&lo, &scan, &b).unwrap()) / (2.0 * h);
        let analytic = dot(&g.data, &dir);
        let err = (fd - analytic).abs() / analytic.abs().max(1e-30);
        results.push(CheckResult::new("grad_x central differences".to_string(), err, 1e-6));
    }

    // grad_p against central differences, per subscan and parameter.
    for i in 0..scan.n_subscans() {
        let g = grad_p(&state, &scan, &b, i).unwrap();
        let h = 1e-4;
        let denom = g.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
        let mut worst = 0.0f64;
        for q in 0..g.len() {
            let mut hi = state.clone();
            let mut lo = state.clone();
            hi.p[i].raw[q] += h;
            lo.p[i].raw[q] -= h;
            let fd = (objective(&hi, &scan, &b).unwrap() - objective(&lo, &scan, &b).unwrap())
                / (2.0 * h);
            worst = worst.max((fd - g[q]).abs() / denom);
        }
        results.push(CheckResult::new(
            format!("grad_p central differences, subscan {i}"),
            worst,
            1e-3,
        ));
    }

    // Warp Jacobian: jvp against finite differences of warp_apply.
    {
        let x = smooth_phantom(&[20, 20, 20], seed + 1);
        let model = MotionModel::new(MotionKind::Rigid, 3).unwrap();
        let p = perturbed_params(model, &mut rng, 0.05);
        let dp: Vec<f64> = (0..model.param_count()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let jvp = warp_derivative_jvp(&x, &p, &dp, InterpKernel::Cubic).unwrap();
        let h = 1e-4;
        let mut hi = p.clone();
        let mut lo = p.clone();
        for q in 0..dp.len() {
            hi.raw[q] += h * dp[q];
            lo.raw[q] -= h * dp[q];
        }
        let whi = warp_apply(&x, &hi, InterpKernel::Cubic).unwrap();
        let wlo = warp_apply(&x, &lo, InterpKernel::Cubic).unwrap();
        let mut err2 = 0.0;
        let mut mag2 = 0.0;
        for i in 0..jvp.data.len() {
            let fd = (whi.data[i] - wlo.data[i]) / (2.0 * h);
            err2 += (fd - jvp.data[i]).powi(2);
            mag2 += fd.powi(2);
        }
        results.push(CheckResult::new(
            "warp jvp central differences".to_string(),
            (err2 / mag2.max(1e-30)).sqrt(),
            1e-3,
        ));

        // Duality <J dp, y> = <dp, J^T y>.
        let y = random_volume(&[20, 20, 20], &mut rng);
        let vjp = warp_derivative_vjp(&x, &p, &y, InterpKernel::Cubic).unwrap();
        let lhs = dot(&jvp.data, &y.data);
        let rhs = dot(&dp, &vjp);
        let err = (lhs - rhs).abs() / (norm(&jvp.data) * norm(&y.data)).max(1e-30);
        results.push(CheckResult::new("jvp/vjp duality".to_string(), err, 1e-8));
    }

    // Rigid rotation tangent at zero angles against finite differences.
    {
        let model = MotionModel::new(MotionKind::Rigid, 3).unwrap();
        let p = AffineParams::identity(model);
        let tangents = p.param_tangents().unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for q in 0..3 {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi.raw[q] += h;
            lo.raw[q] -= h;
            let (ahi, _) = hi.to_matrix().unwrap();
            let (alo, _) = lo.to_matrix().unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (ahi[i][j] - alo[i][j]) / (2.0 * h);
                    worst = worst.max((fd - tangents[q].d_a[i][j]).abs());
                }
            }
        }
        results.push(CheckResult::new(
            "rigid rotation tangent at identity".to_string(),
            worst,
            1e-8,
        ));
    }
    results
}

/// Exact agreement between the dynamic program and the brute-force
/// enumerator on random instances, plus the single-subscan guarantee for
/// `lambda <= 1`.
pub fn partition_checks(instances: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    let mut checked = 0usize;
    for _ in 0..instances {
        let n = rng.gen_range(2..=12);
        let s: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        for lambda in [1.5, 10.0, 100.0] {
            let a = partition_exact(&s, lambda, None).unwrap();
            let b = partition_bruteforce(&s, lambda, None).unwrap();
            checked += 1;
            if a.segments != b.segments || a.objective_value != b.objective_value {
                mismatches += 1;
            }
        }
    }
    let mut results = vec![CheckResult::new(
        format!("partition DP == brute force on {checked} instances"),
        mismatches as f64,
        0.0,
    )];

    let mut full_scan_misses = 0usize;
    for _ in 0..50 {
        let n = rng.gen_range(2..=12);
        let s: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        for lambda in [0.3, 1.0] {
            let plan = partition_exact(&s, lambda, None).unwrap();
            if plan.segments.len() != 1 {
                full_scan_misses += 1;
            }
        }
    }
    results.push(CheckResult::new(
        "lambda <= 1 yields a single subscan".to_string(),
        full_scan_misses as f64,
        0.0,
    ));

    let worked = partition_exact(&[0.95, 0.94, 0.30, 0.96], 100.0, None).unwrap();
    let ok = worked.segments == vec![(0, 2), (2, 3), (3, 4)]
        && (worked.objective_value - 3.0025).abs() < 1e-9;
    results.push(CheckResult::new(
        "worked partition instance".to_string(),
        if ok { 0.0 } else { 1.0 },
        0.0,
    ));
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_suite_passes() {
        let results = partition_checks(25, 3);
        assert!(all_passed(&results), "{results:?}");
    }
}
