//! The joint reconstruction/motion iteration: split gradient updates for the
//! volume and the motion parameters, each with an independent
//! Barzilai-Borwein step size.
//!
//! Step sizes follow the two-point formula
//! `gamma = <dg, dv> / ||dg||^2` from the two most recent iterates, seeded on
//! the first iteration by `gamma0 = c / ||grad||` with per-block
//! proportionality coefficients. The motion block is further split by
//! parameter role (angles, translations, scales/matrix entries), mirroring
//! the different sensitivities of those parameters. The objective is not
//! required to decrease monotonically; runs use a fixed iteration budget and
//! the lowest-objective iterate is returned.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::geometry::ProjStack;
use crate::model::{objective_and_gradients, JointState, ScanModel};
use crate::projector::{back_project, forward_project};
use crate::volume::{dot, norm, Volume};
use crate::warp::{AffineParams, ParamGroupKind};

/// Configuration for the iterative solvers.
#[derive(Debug, Clone)]
pub struct OptConfig {
    /// Joint iterations.
    pub iters: usize,
    /// Iterations of the static initial reconstruction.
    pub init_iters: usize,
    /// Initial-step coefficient for the volume block.
    pub c_x: f64,
    /// Fallback initial-step coefficient for motion blocks.
    pub c_p: f64,
    /// Override for rotation-angle blocks.
    pub c_theta: Option<f64>,
    /// Override for translation blocks.
    pub c_t: Option<f64>,
    /// Override for scale and general matrix-entry blocks.
    pub c_scale: Option<f64>,
    /// Probe magnitude used when a motion block's gradient vanishes at the
    /// first iteration (per parameter, in the model's natural units).
    pub first_p_step: f64,
    /// Barzilai-Borwein safeguard, as multipliers of each block's initial
    /// step.
    pub bb_clamp: (f64, f64),
    /// Optional box bound: clamp the volume to `[0, x_max]` after each
    /// update. Off by default.
    pub clamp_x: Option<f64>,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            iters: 90,
            init_iters: 30,
            c_x: 1.0,
            c_p: 0.01,
            c_theta: Some(0.001),
            c_t: Some(0.1),
            c_scale: Some(0.01),
            first_p_step: 1e-3,
            bb_clamp: (1e-8, 1e8),
            clamp_x: None,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters < 1 {
            return Err(Error::invalid("opt config", "iters must be >= 1".to_string()));
        }
        let coeffs = [
            self.c_x,
            self.c_p,
            self.c_theta.unwrap_or(self.c_p),
            self.c_t.unwrap_or(self.c_p),
            self.c_scale.unwrap_or(self.c_p),
            self.first_p_step,
        ];
        if coeffs.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(Error::invalid("opt config", "coefficients must be positive".to_string()));
        }
        if !(self.bb_clamp.0 <= self.bb_clamp.1) || self.bb_clamp.0 < 0.0 {
            return Err(Error::invalid("opt config", "bb_clamp must satisfy 0 <= lo <= hi".to_string()));
        }
        Ok(())
    }

    pub fn coefficient_for(&self, kind: ParamGroupKind) -> f64 {
        match kind {
            ParamGroupKind::Angle => self.c_theta.unwrap_or(self.c_p),
            ParamGroupKind::Translation => self.c_t.unwrap_or(self.c_p),
            ParamGroupKind::Scale | ParamGroupKind::MatrixEntry => {
                self.c_scale.unwrap_or(self.c_p)
            }
        }
    }
}

/// Default initial-step coefficient for a parameter block.
pub fn default_group_coefficient(kind: ParamGroupKind) -> f64 {
    OptConfig::default().coefficient_for(kind)
}

/// Complete trace of a run. All per-iteration vectors have one entry per
/// iteration; `objective[k]` is the value at the start of iteration `k`.
#[derive(Debug, Clone, Default)]
pub struct RunHistory {
    pub objective: Vec<f64>,
    pub gamma_x: Vec<f64>,
    /// Step size per motion block (empty when the motion is fixed or the run
    /// is static).
    pub gamma_p: Vec<Vec<f64>>,
    /// Motion parameters after each iteration.
    pub params: Vec<Vec<AffineParams>>,
    pub wall_time: Duration,
}

/// Result of a joint run: the lowest-objective iterate and the full history.
#[derive(Debug, Clone)]
pub struct SamcirtResult {
    pub x: Volume,
    pub p: Vec<AffineParams>,
    pub history: RunHistory,
    /// Objective of the returned `(x, p)`.
    pub final_objective: f64,
}

/// Two-point Barzilai-Borwein step
/// `<g_cur - g_prev, v_cur - v_prev> / ||g_cur - g_prev||^2`, clamped to
/// `clamp`. A vanishing denominator (below 1e-30) returns `prev_step`.
pub fn bb_step(
    g_cur: &[f64],
    g_prev: &[f64],
    v_cur: &[f64],
    v_prev: &[f64],
    prev_step: f64,
    clamp: (f64, f64),
) -> f64 {
    assert_eq!(g_cur.len(), g_prev.len());
    assert_eq!(v_cur.len(), v_prev.len());
    assert_eq!(g_cur.len(), v_cur.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..g_cur.len() {
        let dg = g_cur[i] - g_prev[i];
        num += dg * (v_cur[i] - v_prev[i]);
        den += dg * dg;
    }
    if den < 1e-30 {
        return prev_step;
    }
    (num / den).clamp(clamp.0, clamp.1)
}

/// Objective and gradient of the static problem `1/2 || W x - b ||^2`, all
/// angles in one block and no warp in the path.
fn static_eval(x: &Volume, scan: &ScanModel, b: &ProjStack) -> Result<(f64, Volume)> {
    let n = scan.geometry.n_angles();
    let mut r = forward_project(x, &scan.geometry, 0..n)?;
    for (rv, bv) in r.iter_mut().zip(&b.data) {
        *rv -= bv;
    }
    let obj = 0.5 * dot(&r, &r);
    let grad = back_project(&r, &scan.grid, &scan.geometry, 0..n)?;
    Ok((obj, grad))
}

fn check_finite(value: f64, iteration: usize, quantity: &'static str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iteration, quantity })
    }
}

/// Gradient method with BB steps on the static problem, from a zero volume.
/// Returns the lowest-objective iterate.
fn static_loop(
    scan: &ScanModel,
    b: &ProjStack,
    iters: usize,
    cfg: &OptConfig,
) -> Result<(Volume, RunHistory)> {
    scan.validate()?;
    scan.check_stack(b)?;
    let t0 = Instant::now();
    let mut history = RunHistory::default();
    let mut x = Volume::zeros(scan.grid.clone())?;
    if iters == 0 {
        history.wall_time = t0.elapsed();
        return Ok((x, history));
    }
    let (mut obj, mut grad) = static_eval(&x, scan, b)?;
    let mut best = (obj, x.clone());
    let mut gamma_ref = 0.0;
    let mut gamma_prev = 0.0;
    let mut prev_x: Vec<f64> = Vec::new();
    let mut prev_g: Vec<f64> = Vec::new();
    for k in 0..iters {
        check_finite(obj, k, "static objective")?;
        check_finite(dot(&grad.data, &grad.data), k, "static gradient")?;
        let gamma = if k == 0 {
            let n = norm(&grad.data);
            gamma_ref = if n > 1e-30 { cfg.c_x / n } else { 0.0 };
            gamma_ref
        } else {
            bb_step(
                &grad.data,
                &prev_g,
                &x.data,
                &prev_x,
                gamma_prev,
                (cfg.bb_clamp.0 * gamma_ref, cfg.bb_clamp.1 * gamma_ref),
            )
        };
        history.objective.push(obj);
        history.gamma_x.push(gamma);
        gamma_prev = gamma;
        prev_x = x.data.clone();
        prev_g = grad.data.clone();
        for (xv, gv) in x.data.iter_mut().zip(&grad.data) {
            *xv -= gamma * gv;
        }
        if let Some(x_max) = cfg.clamp_x {
            for xv in x.data.iter_mut() {
                *xv = xv.clamp(0.0, x_max);
            }
        }
        let (o, g) = static_eval(&x, scan, b)?;
        obj = o;
        grad = g;
        if obj < best.0 {
            best = (obj, x.clone());
        }
    }
    history.wall_time = t0.elapsed();
    Ok((best.1, history))
}

/// Static initial reconstruction: `argmin_x || W x - b ||^2` by the gradient
/// method with BB steps, with default coefficients.
pub fn init_reconstruction(scan: &ScanModel, b: &ProjStack, init_iters: usize) -> Result<Volume> {
    let cfg = OptConfig::default();
    Ok(static_loop(scan, b, init_iters, &cfg)?.0)
}

/// The no-motion-correction baseline: same machinery as
/// [`init_reconstruction`] with the full history recorded.
pub fn run_static_gmbb(
    scan: &ScanModel,
    b: &ProjStack,
    iters: usize,
) -> Result<(Volume, RunHistory)> {
    let cfg = OptConfig::default();
    static_loop(scan, b, iters, &cfg)
}

/// One motion block: a parameter role plus its indices into the flattened
/// parameter vector (all subscans concatenated).
struct Block {
    kind: ParamGroupKind,
    idx: Vec<usize>,
}

fn motion_blocks(scan: &ScanModel) -> Vec<Block> {
    let pc = scan.motion_model.param_count();
    scan.motion_model
        .param_groups()
        .into_iter()
        .map(|(kind, range)| {
            let mut idx = Vec::new();
            for sub in 0..scan.n_subscans() {
                idx.extend(range.clone().map(|q| sub * pc + q));
            }
            Block { kind, idx }
        })
        .collect()
}

fn flatten_params(p: &[AffineParams]) -> Vec<f64> {
    p.iter().flat_map(|ap| ap.raw.iter().copied()).collect()
}

fn unflatten_params(flat: &[f64], p: &mut [AffineParams]) {
    let mut off = 0;
    for ap in p.iter_mut() {
        let n = ap.raw.len();
        ap.raw.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

fn gather(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Run the joint iteration from identity motion parameters.
pub fn samcirt_run(scan: &ScanModel, b: &ProjStack, cfg: &OptConfig) -> Result<SamcirtResult> {
    let p0: Vec<AffineParams> = (0..scan.n_subscans())
        .map(|_| AffineParams::identity(scan.motion_model))
        .collect();
    samcirt_run_from(scan, b, cfg, p0, false)
}

/// Run with known motion: `p` is held fixed and only the volume is updated.
pub fn samcirt_run_fixed(
    scan: &ScanModel,
    b: &ProjStack,
    cfg: &OptConfig,
    p: Vec<AffineParams>,
) -> Result<SamcirtResult> {
    samcirt_run_from(scan, b, cfg, p, true)
}

fn samcirt_run_from(
    scan: &ScanModel,
    b: &ProjStack,
    cfg: &OptConfig,
    p0: Vec<AffineParams>,
    fix_p: bool,
) -> Result<SamcirtResult> {
    cfg.validate()?;
    scan.validate()?;
    scan.check_stack(b)?;
    let t0 = Instant::now();
    let x0 = static_loop(scan, b, cfg.init_iters, cfg)?.0;
    let mut state = JointState { x: x0, p: p0 };
    state.validate(scan)?;

    let blocks = if fix_p { Vec::new() } else { motion_blocks(scan) };
    let mut flat_p = flatten_params(&state.p);
    let (mut obj, mut gx, gp) = objective_and_gradients(&state, scan, b)?;
    let mut flat_gp: Vec<f64> = gp.into_iter().flatten().collect();
    let mut best = (obj, state.clone());

    let mut history = RunHistory::default();
    let mut prev_x: Vec<f64> = Vec::new();
    let mut prev_gx: Vec<f64> = Vec::new();
    let mut prev_p: Vec<f64> = Vec::new();
    let mut prev_gp: Vec<f64> = Vec::new();
    let mut gamma_x_ref = 0.0;
    let mut gamma_x_prev = 0.0;
    let mut gamma_p_ref = vec![0.0; blocks.len()];
    let mut gamma_p_prev = vec![0.0; blocks.len()];
    // Blocks that took the probe step skip BB on the following iteration's
    // clamp reference only through gamma_p_ref.
    for k in 0..cfg.iters {
        check_finite(obj, k, "objective")?;
        check_finite(dot(&gx.data, &gx.data), k, "volume gradient")?;
        check_finite(dot(&flat_gp, &flat_gp), k, "motion gradient")?;
        history.objective.push(obj);

        // Volume step.
        let gamma_x = if k == 0 {
            let n = norm(&gx.data);
            gamma_x_ref = if n > 1e-30 { cfg.c_x / n } else { 0.0 };
            gamma_x_ref
        } else {
            bb_step(
                &gx.data,
                &prev_gx,
                &state.x.data,
                &prev_x,
                gamma_x_prev,
                (cfg.bb_clamp.0 * gamma_x_ref, cfg.bb_clamp.1 * gamma_x_ref),
            )
        };
        gamma_x_prev = gamma_x;

        // Motion steps, one per block. A vanishing gradient on the first
        // iteration triggers the probe step instead of a gradient step.
        let mut gammas = Vec::with_capacity(blocks.len());
        let mut probes = vec![false; blocks.len()];
        for (bi, block) in blocks.iter().enumerate() {
            let g = gather(&flat_gp, &block.idx);
            let gamma = if k == 0 {
                let n = norm(&g);
                if n < 1e-12 {
                    probes[bi] = true;
                    gamma_p_ref[bi] = cfg.first_p_step;
                    cfg.first_p_step
                } else {
                    let gamma = cfg.coefficient_for(block.kind) / n;
                    gamma_p_ref[bi] = gamma;
                    gamma
                }
            } else {
                bb_step(
                    &g,
                    &gather(&prev_gp, &block.idx),
                    &gather(&flat_p, &block.idx),
                    &gather(&prev_p, &block.idx),
                    gamma_p_prev[bi],
                    (
                        cfg.bb_clamp.0 * gamma_p_ref[bi],
                        cfg.bb_clamp.1 * gamma_p_ref[bi],
                    ),
                )
            };
            gamma_p_prev[bi] = gamma;
            gammas.push(gamma);
        }

        prev_x = state.x.data.clone();
        prev_gx = gx.data.clone();
        prev_p = flat_p.clone();
        prev_gp = flat_gp.clone();

        for (xv, gv) in state.x.data.iter_mut().zip(&gx.data) {
            *xv -= gamma_x * gv;
        }
        if let Some(x_max) = cfg.clamp_x {
            for xv in state.x.data.iter_mut() {
                *xv = xv.clamp(0.0, x_max);
            }
        }
        for (bi, block) in blocks.iter().enumerate() {
            if probes[bi] {
                for &i in &block.idx {
                    flat_p[i] += cfg.first_p_step;
                }
            } else {
                for &i in &block.idx {
                    flat_p[i] -= gammas[bi] * flat_gp[i];
                }
            }
        }
        unflatten_params(&flat_p, &mut state.p);

        history.gamma_x.push(gamma_x);
        history.gamma_p.push(gammas);
        history.params.push(state.p.clone());

        let (o, g, gp) = objective_and_gradients(&state, scan, b)?;
        obj = o;
        gx = g;
        flat_gp = gp.into_iter().flatten().collect();
        if obj < best.0 {
            best = (obj, state.clone());
        }
    }
    check_finite(obj, cfg.iters, "objective")?;
    history.wall_time = t0.elapsed();
    let (final_objective, JointState { x, p }) = best;
    Ok(SamcirtResult {
        x,
        p,
        history,
        final_objective,
    })
}
