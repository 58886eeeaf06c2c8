//! The dynamic-CT least-squares objective `g(x, p) = 1/2 sum_i || W_i M(p_i) x
//! - b_i ||^2`, its exact partial gradients, the projection-distance metric
//! and volume-domain affine registration.

use crate::error::{Error, Result};
use crate::geometry::{validate_subscan_bounds, Geometry, ProjStack};
use crate::optimizer;
use crate::projector::{back_project, forward_project};
use crate::volume::{dot, norm, GridSpec, Volume};
use crate::warp::{
    warp_adjoint, warp_apply, warp_derivative_vjp, AffineParams, InterpKernel, MotionModel,
};

/// Acquisition model: geometry, subscan layout, motion parameterization,
/// interpolation kernel and the reconstruction grid the projector blocks
/// `W_i` act on.
#[derive(Debug, Clone)]
pub struct ScanModel {
    pub geometry: Geometry,
    /// Half-open `[start, end)` angle ranges, one per subscan.
    pub subscan_bounds: Vec<(usize, usize)>,
    pub motion_model: MotionModel,
    pub kernel: InterpKernel,
    pub grid: GridSpec,
}

impl ScanModel {
    pub fn n_subscans(&self) -> usize {
        self.subscan_bounds.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.grid.validate()?;
        validate_subscan_bounds(&self.subscan_bounds, self.geometry.n_angles())?;
        if self.grid.ndim() != self.geometry.ndim() || self.motion_model.dim != self.grid.ndim() {
            return Err(Error::DimensionMismatch(format!(
                "grid {}D, geometry {}D, motion model {}D",
                self.grid.ndim(),
                self.geometry.ndim(),
                self.motion_model.dim
            )));
        }
        Ok(())
    }

    pub(crate) fn check_stack(&self, b: &ProjStack) -> Result<()> {
        if b.geometry.n_angles() != self.geometry.n_angles()
            || b.geometry.det_count != self.geometry.det_count
        {
            return Err(Error::ShapeMismatch(format!(
                "projection stack ({} angles, {:?} detector) does not match scan ({} angles, {:?})",
                b.geometry.n_angles(),
                b.geometry.det_count,
                self.geometry.n_angles(),
                self.geometry.det_count
            )));
        }
        Ok(())
    }
}

/// The unknowns: one volume plus one parameter vector per subscan.
#[derive(Debug, Clone)]
pub struct JointState {
    pub x: Volume,
    pub p: Vec<AffineParams>,
}

impl JointState {
    pub fn validate(&self, scan: &ScanModel) -> Result<()> {
        if self.p.len() != scan.n_subscans() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter sets for {} subscans",
                self.p.len(),
                scan.n_subscans()
            )));
        }
        if self.x.dims() != scan.grid.dims.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "volume dims {:?} != scan grid {:?}",
                self.x.dims(),
                scan.grid.dims
            )));
        }
        for p in &self.p {
            if p.model != scan.motion_model {
                return Err(Error::invalid(
                    "joint state",
                    "all parameter sets must share the scan's motion model".to_string(),
                ));
            }
        }
        Ok(())
    }
}

fn subscan_index(scan: &ScanModel, i: usize) -> Result<(usize, usize)> {
    scan.subscan_bounds
        .get(i)
        .copied()
        .ok_or_else(|| Error::IndexOutOfRange(format!("subscan {i} of {}", scan.n_subscans())))
}

/// `W_i M(p_i) x - b_i` for subscan `i`.
pub fn residual(state: &JointState, scan: &ScanModel, b: &ProjStack, i: usize) -> Result<Vec<f64>> {
    scan.validate()?;
    scan.check_stack(b)?;
    state.validate(scan)?;
    let (s, e) = subscan_index(scan, i)?;
    let warped = warp_apply(&state.x, &state.p[i], scan.kernel)?;
    let mut r = forward_project(&warped, &scan.geometry, s..e)?;
    let det = scan.geometry.det_elems();
    let bi = &b.data[s * det..e * det];
    for (rv, bv) in r.iter_mut().zip(bi) {
        *rv -= bv;
    }
    Ok(r)
}

/// One accumulation path shared by [`objective`] and
/// [`projection_distance`], so `2 g = sum_i PD_i^2` holds to rounding.
fn residual_norm_sq(state: &JointState, scan: &ScanModel, b: &ProjStack, i: usize) -> Result<f64> {
    let r = residual(state, scan, b, i)?;
    Ok(dot(&r, &r))
}

/// `g(x, p) = 1/2 sum_i || W_i M(p_i) x - b_i ||^2`.
pub fn objective(state: &JointState, scan: &ScanModel, b: &ProjStack) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..scan.n_subscans() {
        acc += residual_norm_sq(state, scan, b, i)?;
    }
    Ok(0.5 * acc)
}

/// `grad_x g = sum_i M(p_i)^T W_i^T [W_i M(p_i) x - b_i]`.
pub fn grad_x(state: &JointState, scan: &ScanModel, b: &ProjStack) -> Result<Volume> {
    let mut out = Volume::zeros(scan.grid.clone())?;
    for i in 0..scan.n_subscans() {
        let (s, e) = subscan_index(scan, i)?;
        let r = residual(state, scan, b, i)?;
        let z = back_project(&r, &scan.grid, &scan.geometry, s..e)?;
        let gi = warp_adjoint(&z, &state.p[i], scan.kernel)?;
        for (o, v) in out.data.iter_mut().zip(gi.data) {
            *o += v;
        }
    }
    Ok(out)
}

/// `grad_{p_i} g = [grad M(p_i) x]^T W_i^T [W_i M(p_i) x - b_i]`; depends on
/// subscan `i` only.
pub fn grad_p(state: &JointState, scan: &ScanModel, b: &ProjStack, i: usize) -> Result<Vec<f64>> {
    let (s, e) = subscan_index(scan, i)?;
    let r = residual(state, scan, b, i)?;
    let z = back_project(&r, &scan.grid, &scan.geometry, s..e)?;
    warp_derivative_vjp(&state.x, &state.p[i], &z, scan.kernel)
}

/// l2 norm of the projection difference for subscan `i`.
pub fn projection_distance(
    state: &JointState,
    scan: &ScanModel,
    b: &ProjStack,
    i: usize,
) -> Result<f64> {
    Ok(residual_norm_sq(state, scan, b, i)?.sqrt())
}

/// Objective, full x-gradient and all per-subscan p-gradients in one sweep,
/// sharing the backprojected residual between the two gradient paths.
pub(crate) fn objective_and_gradients(
    state: &JointState,
    scan: &ScanModel,
    b: &ProjStack,
) -> Result<(f64, Volume, Vec<Vec<f64>>)> {
    scan.validate()?;
    scan.check_stack(b)?;
    state.validate(scan)?;
    let mut obj_acc = 0.0;
    let mut gx = Volume::zeros(scan.grid.clone())?;
    let mut gp = Vec::with_capacity(scan.n_subscans());
    let det = scan.geometry.det_elems();
    for i in 0..scan.n_subscans() {
        let (s, e) = subscan_index(scan, i)?;
        let warped = warp_apply(&state.x, &state.p[i], scan.kernel)?;
        let mut r = forward_project(&warped, &scan.geometry, s..e)?;
        for (rv, bv) in r.iter_mut().zip(&b.data[s * det..e * det]) {
            *rv -= bv;
        }
        obj_acc += dot(&r, &r);
        let z = back_project(&r, &scan.grid, &scan.geometry, s..e)?;
        let gxi = warp_adjoint(&z, &state.p[i], scan.kernel)?;
        for (o, v) in gx.data.iter_mut().zip(gxi.data) {
            *o += v;
        }
        gp.push(warp_derivative_vjp(&state.x, &state.p[i], &z, scan.kernel)?);
    }
    Ok((0.5 * obj_acc, gx, gp))
}

/// Volume-domain affine registration: minimize `|| M(s) x1 - x2 ||^2` by
/// gradient descent with Barzilai-Borwein steps, starting from the identity.
///
/// Uses the cubic kernel so the parameter derivatives are smooth. Returns the
/// lowest-objective iterate, so the final objective never exceeds the initial
/// one.
pub fn register_affine(
    x1: &Volume,
    x2: &Volume,
    model: MotionModel,
    iters: usize,
) -> Result<AffineParams> {
    if x1.dims() != x2.dims() {
        return Err(Error::ShapeMismatch(format!(
            "registered volumes must share a grid: {:?} vs {:?}",
            x1.dims(),
            x2.dims()
        )));
    }
    if model.dim != x1.ndim() {
        return Err(Error::DimensionMismatch(format!(
            "volume is {}D but motion model is {}D",
            x1.ndim(),
            model.dim
        )));
    }
    let kernel = InterpKernel::Cubic;
    let eval = |p: &AffineParams| -> Result<(f64, Vec<f64>)> {
        let mut r = warp_apply(x1, p, kernel)?;
        for (rv, xv) in r.data.iter_mut().zip(&x2.data) {
            *rv -= xv;
        }
        let obj = 0.5 * dot(&r.data, &r.data);
        let grad = warp_derivative_vjp(x1, p, &r, kernel)?;
        Ok((obj, grad))
    };

    let groups = model.param_groups();
    let mut p = AffineParams::identity(model);
    let (mut obj, mut grad) = eval(&p)?;
    let mut best = (obj, p.clone());
    let mut prev_p = p.raw.clone();
    let mut prev_grad = grad.clone();
    // Reference step per group, set on the first iteration and used to clamp
    // the BB values afterwards.
    let mut gamma_ref = vec![0.0; groups.len()];
    let mut gamma_prev = vec![0.0; groups.len()];
    let clamp_mults = optimizer::OptConfig::default().bb_clamp;

    for k in 0..iters {
        if !obj.is_finite() {
            return Err(Error::Diverged {
                iteration: k,
                quantity: "registration objective",
            });
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration: k,
                quantity: "registration gradient",
            });
        }
        let new_prev_p = p.raw.clone();
        for (gi, (kind, range)) in groups.iter().enumerate() {
            let g = &grad[range.clone()];
            let gamma = if k == 0 {
                let n = norm(g);
                let c = optimizer::default_group_coefficient(*kind);
                let gamma = if n > 1e-30 { c / n } else { 0.0 };
                gamma_ref[gi] = gamma;
                gamma
            } else {
                optimizer::bb_step(
                    g,
                    &prev_grad[range.clone()],
                    &p.raw[range.clone()],
                    &prev_p[range.clone()],
                    gamma_prev[gi],
                    (clamp_mults.0 * gamma_ref[gi], clamp_mults.1 * gamma_ref[gi]),
                )
            };
            gamma_prev[gi] = gamma;
            for (idx, j) in range.clone().enumerate() {
                p.raw[j] -= gamma * g[idx];
            }
        }
        prev_p = new_prev_p;
        prev_grad = grad;
        let (o, g) = eval(&p)?;
        obj = o;
        grad = g;
        if obj < best.0 {
            best = (obj, p.clone());
        }
    }
    Ok(best.1)
}
