//! Affine motion operator `M(p)`, its exact adjoint and the analytic
//! derivative of the warped image with respect to the motion parameters.
//!
//! Warping is pull-back (backward): the output voxel at `u` reads the input
//! at `uhat = A u + c - A c + t`, so a positive translation shifts image
//! content in the negative direction. `c` is the volume's center. Samples
//! outside the grid read zero and derivative contributions outside the grid
//! are dropped.
//!
//! Rigid rotations compose as `Rz * Ry * Rx` (intrinsic axes); 2D rigid uses
//! a single in-plane angle. Parameter layouts per model:
//!
//! * `general`: row-major matrix entries, then translation
//!   (`[a00, a01, a10, a11, t0, t1]` in 2D, 12 entries in 3D);
//! * `rigid`: `[theta, t0, t1]` in 2D, `[rx, ry, rz, t0, t1, t2]` in 3D;
//! * `scaling`: one positive scale per axis;
//! * `translation`: one offset per axis, voxels.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    General,
    Rigid,
    Scaling,
    Translation,
}

/// Parameter blocks sharing one step-size coefficient in the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroupKind {
    Angle,
    Translation,
    Scale,
    MatrixEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionModel {
    pub kind: MotionKind,
    /// Spatial dimensionality, 2 or 3.
    pub dim: usize,
}

impl MotionModel {
    pub fn new(kind: MotionKind, dim: usize) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::invalid("motion model", format!("dim {dim}, expected 2 or 3")));
        }
        Ok(MotionModel { kind, dim })
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            MotionKind::General => self.dim * self.dim + self.dim,
            MotionKind::Rigid => {
                if self.dim == 2 {
                    3
                } else {
                    6
                }
            }
            MotionKind::Scaling | MotionKind::Translation => self.dim,
        }
    }

    /// Contiguous parameter index ranges by role.
    pub fn param_groups(&self) -> Vec<(ParamGroupKind, Range<usize>)> {
        let d = self.dim;
        match self.kind {
            MotionKind::General => vec![
                (ParamGroupKind::MatrixEntry, 0..d * d),
                (ParamGroupKind::Translation, d * d..d * d + d),
            ],
            MotionKind::Rigid => {
                let n_rot = if d == 2 { 1 } else { 3 };
                vec![
                    (ParamGroupKind::Angle, 0..n_rot),
                    (ParamGroupKind::Translation, n_rot..n_rot + d),
                ]
            }
            MotionKind::Scaling => vec![(ParamGroupKind::Scale, 0..d)],
            MotionKind::Translation => vec![(ParamGroupKind::Translation, 0..d)],
        }
    }
}

/// Affine motion parameters under a named parameterization. Translations are
/// in voxels, rotations in radians, scales and matrix entries dimensionless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub model: MotionModel,
    pub raw: Vec<f64>,
}

/// 3x3 matrix; 2D models occupy the upper-left block with an identity third
/// row and column.
pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
pub const ZERO3: Mat3 = [[0.0; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = ZERO3;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn rot_x(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn d_rot_x(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]
}

fn d_rot_y(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]]
}

fn d_rot_z(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]
}

/// Derivative of `(A, t)` with respect to one raw parameter.
#[derive(Debug, Clone, Copy)]
pub struct ParamTangent {
    pub d_a: Mat3,
    pub d_t: Vec3,
}

impl AffineParams {
    pub fn new(model: MotionModel, raw: Vec<f64>) -> Result<Self> {
        let p = AffineParams { model, raw };
        p.validate()?;
        Ok(p)
    }

    /// Parameters of the motionless transform: zero angles/translations,
    /// unit scales, identity matrix.
    pub fn identity(model: MotionModel) -> Self {
        let d = model.dim;
        let raw = match model.kind {
            MotionKind::General => {
                let mut raw = vec![0.0; model.param_count()];
                for i in 0..d {
                    raw[i * d + i] = 1.0;
                }
                raw
            }
            MotionKind::Scaling => vec![1.0; d],
            _ => vec![0.0; model.param_count()],
        };
        AffineParams { model, raw }
    }

    pub fn validate(&self) -> Result<()> {
        if self.raw.len() != self.model.param_count() {
            return Err(Error::invalid(
                "affine params",
                format!(
                    "{} raw values for a model with {} parameters",
                    self.raw.len(),
                    self.model.param_count()
                ),
            ));
        }
        if self.raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("affine params", "non-finite value".to_string()));
        }
        if self.model.kind == MotionKind::Scaling && self.raw.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("affine params", "non-positive scale".to_string()));
        }
        Ok(())
    }

    /// The affine pair `(A, t)` of this parameterization.
    pub fn to_matrix(&self) -> Result<(Mat3, Vec3)> {
        self.validate()?;
        let d = self.model.dim;
        let mut a = IDENTITY3;
        let mut t = [0.0; 3];
        match self.model.kind {
            MotionKind::General => {
                for i in 0..d {
                    for j in 0..d {
                        a[i][j] = self.raw[i * d + j];
                    }
                }
                for i in 0..d {
                    t[i] = self.raw[d * d + i];
                }
            }
            MotionKind::Rigid => {
                if d == 2 {
                    let (s, c) = self.raw[0].sin_cos();
                    a[0][0] = c;
                    a[0][1] = -s;
                    a[1][0] = s;
                    a[1][1] = c;
                    t[0] = self.raw[1];
                    t[1] = self.raw[2];
                } else {
                    a = mat_mul(&mat_mul(&rot_z(self.raw[2]), &rot_y(self.raw[1])), &rot_x(self.raw[0]));
                    t = [self.raw[3], self.raw[4], self.raw[5]];
                }
            }
            MotionKind::Scaling => {
                for i in 0..d {
                    a[i][i] = self.raw[i];
                }
            }
            MotionKind::Translation => {
                for i in 0..d {
                    t[i] = self.raw[i];
                }
            }
        }
        Ok((a, t))
    }

    /// Analytic derivative of `(A, t)` with respect to every raw parameter,
    /// chain-ruled through the parameterization.
    pub fn param_tangents(&self) -> Result<Vec<ParamTangent>> {
        self.validate()?;
        let d = self.model.dim;
        let zero = ParamTangent {
            d_a: ZERO3,
            d_t: [0.0; 3],
        };
        let mut out = vec![zero; self.model.param_count()];
        match self.model.kind {
            MotionKind::General => {
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j].d_a[i][j] = 1.0;
                    }
                }
                for i in 0..d {
                    out[d * d + i].d_t[i] = 1.0;
                }
            }
            MotionKind::Rigid => {
                if d == 2 {
                    let (s, c) = self.raw[0].sin_cos();
                    out[0].d_a[0][0] = -s;
                    out[0].d_a[0][1] = -c;
                    out[0].d_a[1][0] = c;
                    out[0].d_a[1][1] = -s;
                    out[1].d_t[0] = 1.0;
                    out[2].d_t[1] = 1.0;
                } else {
                    let rx = rot_x(self.raw[0]);
                    let ry = rot_y(self.raw[1]);
                    let rz = rot_z(self.raw[2]);
                    out[0].d_a = mat_mul(&mat_mul(&rz, &ry), &d_rot_x(self.raw[0]));
                    out[1].d_a = mat_mul(&mat_mul(&rz, &d_rot_y(self.raw[1])), &rx);
                    out[2].d_a = mat_mul(&mat_mul(&d_rot_z(self.raw[2]), &ry), &rx);
                    for i in 0..3 {
                        out[3 + i].d_t[i] = 1.0;
                    }
                }
            }
            MotionKind::Scaling => {
                for i in 0..d {
                    out[i].d_a[i][i] = 1.0;
                }
            }
            MotionKind::Translation => {
                for i in 0..d {
                    out[i].d_t[i] = 1.0;
                }
            }
        }
        Ok(out)
    }
}

/// Interpolation kernel for the differentiable warp. `Linear` hits grid
/// points exactly and is cheap; `Cubic` is Catmull-Rom, C1 and interpolating,
/// which keeps the parameter derivative fields smooth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpKernel {
    Linear,
    Cubic,
}

impl InterpKernel {
    /// Samples per axis.
    pub fn support(self) -> usize {
        match self {
            InterpKernel::Linear => 2,
            InterpKernel::Cubic => 4,
        }
    }

    /// Offset of the first tap relative to `floor(uhat)`.
    pub fn first_offset(self) -> isize {
        match self {
            InterpKernel::Linear => 0,
            InterpKernel::Cubic => -1,
        }
    }

    /// Tap weights at fractional position `f` in `[0, 1)`. Weights sum to 1.
    #[inline]
    pub fn weights(self, f: f64) -> [f64; 4] {
        match self {
            InterpKernel::Linear => [1.0 - f, f, 0.0, 0.0],
            InterpKernel::Cubic => {
                let f2 = f * f;
                let f3 = f2 * f;
                [
                    0.5 * (-f3 + 2.0 * f2 - f),
                    0.5 * (3.0 * f3 - 5.0 * f2 + 2.0),
                    0.5 * (-3.0 * f3 + 4.0 * f2 + f),
                    0.5 * (f3 - f2),
                ]
            }
        }
    }

    /// Derivative of [`InterpKernel::weights`] with respect to `f`.
    #[inline]
    pub fn dweights(self, f: f64) -> [f64; 4] {
        match self {
            InterpKernel::Linear => [-1.0, 1.0, 0.0, 0.0],
            InterpKernel::Cubic => {
                let f2 = f * f;
                [
                    0.5 * (-3.0 * f2 + 4.0 * f - 1.0),
                    0.5 * (9.0 * f2 - 10.0 * f),
                    0.5 * (-9.0 * f2 + 8.0 * f + 1.0),
                    0.5 * (3.0 * f2 - 2.0 * f),
                ]
            }
        }
    }
}

/// Per-voxel interpolation stencil: first tap index and (d)weights per axis.
struct Stencil<const D: usize> {
    start: [isize; D],
    w: [[f64; 4]; D],
    dw: [[f64; 4]; D],
}

#[inline]
fn stencil<const D: usize>(kernel: InterpKernel, uhat: &[f64; D], with_grad: bool) -> Stencil<D> {
    let mut s = Stencil {
        start: [0; D],
        w: [[0.0; 4]; D],
        dw: [[0.0; 4]; D],
    };
    for ax in 0..D {
        let fl = uhat[ax].floor();
        s.start[ax] = fl as isize + kernel.first_offset();
        let f = uhat[ax] - fl;
        s.w[ax] = kernel.weights(f);
        if with_grad {
            s.dw[ax] = kernel.dweights(f);
        }
    }
    s
}

#[inline]
fn affine_map<const D: usize>(a: &Mat3, shift: &[f64; D], u: &[f64; D]) -> [f64; D] {
    // uhat = A u + (c - A c + t), with the constant part precomputed.
    let mut out = [0.0; D];
    for i in 0..D {
        let mut acc = 0.0;
        for (j, uj) in u.iter().enumerate() {
            acc += a[i][j] * uj;
        }
        out[i] = acc + shift[i];
    }
    out
}

/// `c - A c + t` for dimension `D`.
fn constant_shift<const D: usize>(a: &Mat3, t: &Vec3, center: &[f64]) -> [f64; D] {
    let mut shift = [0.0; D];
    for i in 0..D {
        let mut ac = 0.0;
        for (j, &cj) in center.iter().enumerate().take(D) {
            ac += a[i][j] * cj;
        }
        shift[i] = center[i] - ac + t[i];
    }
    shift
}

#[inline]
fn interp_value<const D: usize>(
    data: &[f64],
    dims: &[usize; D],
    kernel: InterpKernel,
    uhat: &[f64; D],
) -> f64 {
    let st = stencil(kernel, uhat, false);
    let taps = kernel.support();
    let mut acc = 0.0;
    if D == 2 {
        for a in 0..taps {
            let ia = st.start[0] + a as isize;
            if ia < 0 || ia >= dims[0] as isize {
                continue;
            }
            let row = ia as usize * dims[1];
            let wa = st.w[0][a];
            for b in 0..taps {
                let ib = st.start[1] + b as isize;
                if ib < 0 || ib >= dims[1] as isize {
                    continue;
                }
                acc += wa * st.w[1][b] * data[row + ib as usize];
            }
        }
    } else {
        for a in 0..taps {
            let ia = st.start[0] + a as isize;
            if ia < 0 || ia >= dims[0] as isize {
                continue;
            }
            let wa = st.w[0][a];
            let plane = ia as usize * dims[1] * dims[2];
            for b in 0..taps {
                let ib = st.start[1] + b as isize;
                if ib < 0 || ib >= dims[1] as isize {
                    continue;
                }
                let wab = wa * st.w[1][b];
                let row = plane + ib as usize * dims[2];
                for c in 0..taps {
                    let ic = st.start[2] + c as isize;
                    if ic < 0 || ic >= dims[2] as isize {
                        continue;
                    }
                    acc += wab * st.w[2][c] * data[row + ic as usize];
                }
            }
        }
    }
    acc
}

/// Spatial gradient of the interpolant at `uhat`, one component per axis.
#[inline]
fn interp_grad<const D: usize>(
    data: &[f64],
    dims: &[usize; D],
    kernel: InterpKernel,
    uhat: &[f64; D],
) -> [f64; D] {
    let st = stencil(kernel, uhat, true);
    let taps = kernel.support();
    let mut g = [0.0; D];
    if D == 2 {
        for a in 0..taps {
            let ia = st.start[0] + a as isize;
            if ia < 0 || ia >= dims[0] as isize {
                continue;
            }
            let row = ia as usize * dims[1];
            for b in 0..taps {
                let ib = st.start[1] + b as isize;
                if ib < 0 || ib >= dims[1] as isize {
                    continue;
                }
                let v = data[row + ib as usize];
                g[0] += st.dw[0][a] * st.w[1][b] * v;
                g[1] += st.w[0][a] * st.dw[1][b] * v;
            }
        }
    } else {
        for a in 0..taps {
            let ia = st.start[0] + a as isize;
            if ia < 0 || ia >= dims[0] as isize {
                continue;
            }
            let plane = ia as usize * dims[1] * dims[2];
            for b in 0..taps {
                let ib = st.start[1] + b as isize;
                if ib < 0 || ib >= dims[1] as isize {
                    continue;
                }
                let row = plane + ib as usize * dims[2];
                for c in 0..taps {
                    let ic = st.start[2] + c as isize;
                    if ic < 0 || ic >= dims[2] as isize {
                        continue;
                    }
                    let v = data[row + ic as usize];
                    g[0] += st.dw[0][a] * st.w[1][b] * st.w[2][c] * v;
                    g[1] += st.w[0][a] * st.dw[1][b] * st.w[2][c] * v;
                    g[2] += st.w[0][a] * st.w[1][b] * st.dw[2][c] * v;
                }
            }
        }
    }
    g
}

#[inline]
fn scatter_value<const D: usize>(
    out: &mut [f64],
    dims: &[usize; D],
    kernel: InterpKernel,
    uhat: &[f64; D],
    value: f64,
) {
    let st = stencil(kernel, uhat, false);
    let taps = kernel.support();
    if D == 2 {
        for a in 0..taps {
            let ia = st.start[0] + a as isize;
            if ia < 0 || ia >= dims[0] as isize {
                continue;
            }
            let row = ia as usize * dims[1];
            let wa = st.w[0][a];
            for b in 0..taps {
                let ib = st.start[1] + b as isize;
                if ib < 0 || ib >= dims[1] as isize {
                    continue;
                }
                out[row + ib as usize] += wa * st.w[1][b] * value;
            }
        }
    } else {
        for a in 0..taps {
            let ia = st.start[0] + a as isize;
            if ia < 0 || ia >= dims[0] as isize {
                continue;
            }
            let wa = st.w[0][a];
            let plane = ia as usize * dims[1] * dims[2];
            for b in 0..taps {
                let ib = st.start[1] + b as isize;
                if ib < 0 || ib >= dims[1] as isize {
                    continue;
                }
                let wab = wa * st.w[1][b];
                let row = plane + ib as usize * dims[2];
                for c in 0..taps {
                    let ic = st.start[2] + c as isize;
                    if ic < 0 || ic >= dims[2] as isize {
                        continue;
                    }
                    out[row + ic as usize] += wab * st.w[2][c] * value;
                }
            }
        }
    }
}

fn dims_array<const D: usize>(dims: &[usize]) -> [usize; D] {
    let mut out = [0; D];
    out.copy_from_slice(dims);
    out
}

fn check_warp_args(x: &Volume, p: &AffineParams) -> Result<()> {
    p.validate()?;
    if p.model.dim != x.ndim() {
        return Err(Error::DimensionMismatch(format!(
            "volume is {}D but motion model is {}D",
            x.ndim(),
            p.model.dim
        )));
    }
    Ok(())
}

/// Fixed slab partition of axis 0, independent of the thread count, so that
/// parallel scatters can be reduced in a deterministic order.
fn slab_chunks(n_slabs: usize) -> Vec<Range<usize>> {
    let n_chunks = n_slabs.min(16);
    (0..n_chunks)
        .map(|i| (i * n_slabs / n_chunks)..((i + 1) * n_slabs / n_chunks))
        .collect()
}

fn apply_impl<const D: usize>(x: &Volume, a: &Mat3, t: &Vec3, kernel: InterpKernel) -> Vec<f64> {
    let dims = dims_array::<D>(x.dims());
    let shift = constant_shift::<D>(a, t, &x.grid.center);
    let slab: usize = dims[1..].iter().product();
    let mut out = vec![0.0; x.data.len()];
    out.par_chunks_mut(slab).enumerate().for_each(|(u0, chunk)| {
        let mut u = [0.0; D];
        u[0] = u0 as f64;
        for (rest, o) in chunk.iter_mut().enumerate() {
            if D == 2 {
                u[1] = rest as f64;
            } else {
                u[1] = (rest / dims[2]) as f64;
                u[2] = (rest % dims[2]) as f64;
            }
            let uhat = affine_map(a, &shift, &u);
            *o = interp_value(&x.data, &dims, kernel, &uhat);
        }
    });
    out
}

/// Warp a volume: `out(u) = x(A u + c - A c + t)`, linear in `x`.
pub fn warp_apply(x: &Volume, p: &AffineParams, kernel: InterpKernel) -> Result<Volume> {
    check_warp_args(x, p)?;
    let (a, t) = p.to_matrix()?;
    let data = match x.ndim() {
        2 => apply_impl::<2>(x, &a, &t, kernel),
        _ => apply_impl::<3>(x, &a, &t, kernel),
    };
    Ok(Volume {
        grid: x.grid.clone(),
        data,
    })
}

fn adjoint_impl<const D: usize>(y: &Volume, a: &Mat3, t: &Vec3, kernel: InterpKernel) -> Vec<f64> {
    let dims = dims_array::<D>(y.dims());
    let shift = constant_shift::<D>(a, t, &y.grid.center);
    let slab: usize = dims[1..].iter().product();
    let partials: Vec<Vec<f64>> = slab_chunks(dims[0])
        .into_par_iter()
        .map(|range| {
            let mut acc = vec![0.0; y.data.len()];
            let mut u = [0.0; D];
            for u0 in range {
                u[0] = u0 as f64;
                for rest in 0..slab {
                    if D == 2 {
                        u[1] = rest as f64;
                    } else {
                        u[1] = (rest / dims[2]) as f64;
                        u[2] = (rest % dims[2]) as f64;
                    }
                    let v = y.data[u0 * slab + rest];
                    if v == 0.0 {
                        continue;
                    }
                    let uhat = affine_map(a, &shift, &u);
                    scatter_value(&mut acc, &dims, kernel, &uhat, v);
                }
            }
            acc
        })
        .collect();
    let mut data = vec![0.0; y.data.len()];
    for part in partials {
        for (d, v) in data.iter_mut().zip(part) {
            *d += v;
        }
    }
    data
}

/// Exact transpose of [`warp_apply`]: scatters each input value through the
/// same interpolation weights.
pub fn warp_adjoint(y: &Volume, p: &AffineParams, kernel: InterpKernel) -> Result<Volume> {
    check_warp_args(y, p)?;
    let (a, t) = p.to_matrix()?;
    let data = match y.ndim() {
        2 => adjoint_impl::<2>(y, &a, &t, kernel),
        _ => adjoint_impl::<3>(y, &a, &t, kernel),
    };
    Ok(Volume {
        grid: y.grid.clone(),
        data,
    })
}

fn vjp_impl<const D: usize>(
    x: &Volume,
    a: &Mat3,
    t: &Vec3,
    tangents: &[ParamTangent],
    y: &Volume,
    kernel: InterpKernel,
) -> Vec<f64> {
    let dims = dims_array::<D>(x.dims());
    let center = &x.grid.center;
    let shift = constant_shift::<D>(a, t, center);
    let slab: usize = dims[1..].iter().product();
    let n_params = tangents.len();
    let partials: Vec<Vec<f64>> = slab_chunks(dims[0])
        .into_par_iter()
        .map(|range| {
            let mut acc = vec![0.0; n_params];
            let mut u = [0.0; D];
            for u0 in range {
                u[0] = u0 as f64;
                for rest in 0..slab {
                    if D == 2 {
                        u[1] = rest as f64;
                    } else {
                        u[1] = (rest / dims[2]) as f64;
                        u[2] = (rest % dims[2]) as f64;
                    }
                    let yv = y.data[u0 * slab + rest];
                    if yv == 0.0 {
                        continue;
                    }
                    let uhat = affine_map(a, &shift, &u);
                    let g = interp_grad(&x.data, &dims, kernel, &uhat);
                    // d uhat / d p_q = dA_q (u - c) + dt_q
                    for (q, tan) in tangents.iter().enumerate() {
                        let mut dir = 0.0;
                        for i in 0..D {
                            let mut du = tan.d_t[i];
                            for j in 0..D {
                                du += tan.d_a[i][j] * (u[j] - center[j]);
                            }
                            dir += g[i] * du;
                        }
                        acc[q] += yv * dir;
                    }
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; n_params];
    for part in partials {
        for (o, v) in out.iter_mut().zip(part) {
            *o += v;
        }
    }
    out
}

/// Transpose-Jacobian action `[grad M(p) x]^T y`: the per-voxel spatial
/// gradient of the interpolant at `uhat`, chained through the
/// parameterization and weighted by `y`.
pub fn warp_derivative_vjp(
    x: &Volume,
    p: &AffineParams,
    y: &Volume,
    kernel: InterpKernel,
) -> Result<Vec<f64>> {
    check_warp_args(x, p)?;
    if y.dims() != x.dims() {
        return Err(Error::ShapeMismatch(format!(
            "cotangent dims {:?} != volume dims {:?}",
            y.dims(),
            x.dims()
        )));
    }
    let (a, t) = p.to_matrix()?;
    let tangents = p.param_tangents()?;
    let out = match x.ndim() {
        2 => vjp_impl::<2>(x, &a, &t, &tangents, y, kernel),
        _ => vjp_impl::<3>(x, &a, &t, &tangents, y, kernel),
    };
    Ok(out)
}

fn jvp_impl<const D: usize>(
    x: &Volume,
    a: &Mat3,
    t: &Vec3,
    dir_a: &Mat3,
    dir_t: &Vec3,
    kernel: InterpKernel,
) -> Vec<f64> {
    let dims = dims_array::<D>(x.dims());
    let center = &x.grid.center.clone();
    let shift = constant_shift::<D>(a, t, center);
    let slab: usize = dims[1..].iter().product();
    let mut out = vec![0.0; x.data.len()];
    out.par_chunks_mut(slab).enumerate().for_each(|(u0, chunk)| {
        let mut u = [0.0; D];
        u[0] = u0 as f64;
        for (rest, o) in chunk.iter_mut().enumerate() {
            if D == 2 {
                u[1] = rest as f64;
            } else {
                u[1] = (rest / dims[2]) as f64;
                u[2] = (rest % dims[2]) as f64;
            }
            let uhat = affine_map(a, &shift, &u);
            let g = interp_grad(&x.data, &dims, kernel, &uhat);
            let mut val = 0.0;
            for i in 0..D {
                let mut du = dir_t[i];
                for j in 0..D {
                    du += dir_a[i][j] * (u[j] - center[j]);
                }
                val += g[i] * du;
            }
            *o = val;
        }
    });
    out
}

/// Directional Jacobian action `[grad M(p) x] dp`, the dual of
/// [`warp_derivative_vjp`].
pub fn warp_derivative_jvp(
    x: &Volume,
    p: &AffineParams,
    dp: &[f64],
    kernel: InterpKernel,
) -> Result<Volume> {
    check_warp_args(x, p)?;
    if dp.len() != p.model.param_count() {
        return Err(Error::ShapeMismatch(format!(
            "direction has {} entries, model has {} parameters",
            dp.len(),
            p.model.param_count()
        )));
    }
    let (a, t) = p.to_matrix()?;
    let tangents = p.param_tangents()?;
    // Collapse the parameter direction into a single (dA, dt) pair.
    let mut dir_a = ZERO3;
    let mut dir_t = [0.0; 3];
    for (q, tan) in tangents.iter().enumerate() {
        for i in 0..3 {
            for j in 0..3 {
                dir_a[i][j] += dp[q] * tan.d_a[i][j];
            }
            dir_t[i] += dp[q] * tan.d_t[i];
        }
    }
    let data = match x.ndim() {
        2 => jvp_impl::<2>(x, &a, &t, &dir_a, &dir_t, kernel),
        _ => jvp_impl::<3>(x, &a, &t, &dir_a, &dir_t, kernel),
    };
    Ok(Volume {
        grid: x.grid.clone(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{dot, norm, GridSpec};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn random_volume(dims: &[usize], seed: u64) -> Volume {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let grid = GridSpec::uniform(dims);
        let data = (0..grid.len()).map(|_| rng.gen::<f64>()).collect();
        Volume::new(grid, data).unwrap()
    }

    /// Smooth blob so cubic-kernel derivatives are well resolved.
    fn blob_volume(dims: &[usize]) -> Volume {
        let grid = GridSpec::uniform(dims);
        let c: Vec<f64> = grid.center.clone();
        let sigma = dims[0] as f64 / 6.0;
        let mut data = vec![0.0; grid.len()];
        let nd = dims.len();
        for (i, v) in data.iter_mut().enumerate() {
            let mut r2 = 0.0;
            let mut rem = i;
            for ax in (0..nd).rev() {
                let u = (rem % dims[ax]) as f64;
                rem /= dims[ax];
                r2 += (u - c[ax]).powi(2);
            }
            *v = (-r2 / (2.0 * sigma * sigma)).exp();
        }
        Volume::new(grid, data).unwrap()
    }

    #[test]
    fn param_counts() {
        for (kind, d, n) in [
            (MotionKind::General, 2, 6),
            (MotionKind::General, 3, 12),
            (MotionKind::Rigid, 2, 3),
            (MotionKind::Rigid, 3, 6),
            (MotionKind::Scaling, 3, 3),
            (MotionKind::Translation, 2, 2),
        ] {
            assert_eq!(MotionModel::new(kind, d).unwrap().param_count(), n);
        }
    }

    #[test]
    fn rigid_identity_matrix() {
        let p = AffineParams::identity(MotionModel::new(MotionKind::Rigid, 3).unwrap());
        let (a, t) = p.to_matrix().unwrap();
        assert_eq!(a, IDENTITY3);
        assert_eq!(t, [0.0; 3]);
    }

    #[test]
    fn scaling_matrix_is_diagonal() {
        let model = MotionModel::new(MotionKind::Scaling, 3).unwrap();
        let p = AffineParams::new(model, vec![0.97, 0.93, 1.21]).unwrap();
        let (a, t) = p.to_matrix().unwrap();
        assert_eq!(a[0][0], 0.97);
        assert_eq!(a[1][1], 0.93);
        assert_eq!(a[2][2], 1.21);
        assert_eq!(a[0][1], 0.0);
        assert_eq!(t, [0.0; 3]);
    }

    #[test]
    fn rigid_2d_rotation_matrix() {
        let model = MotionModel::new(MotionKind::Rigid, 2).unwrap();
        let p = AffineParams::new(model, vec![0.1, 0.0, 0.0]).unwrap();
        let (a, _) = p.to_matrix().unwrap();
        assert!((a[0][0] - 0.1f64.cos()).abs() < 1e-15);
        assert!((a[0][1] + 0.1f64.sin()).abs() < 1e-15);
        assert!((a[1][0] - 0.1f64.sin()).abs() < 1e-15);
        assert!((a[1][1] - 0.1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn non_positive_scale_rejected() {
        let model = MotionModel::new(MotionKind::Scaling, 2).unwrap();
        assert!(AffineParams::new(model, vec![1.0, 0.0]).is_err());
        assert!(AffineParams::new(model, vec![1.0, -0.2]).is_err());
    }

    #[test]
    fn rigid_angle_tangent_matches_finite_difference() {
        let model = MotionModel::new(MotionKind::Rigid, 3).unwrap();
        let p = AffineParams::new(model, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let tangents = p.param_tangents().unwrap();
        let h = 1e-6;
        for q in 0..3 {
            let mut lo = p.clone();
            let mut hi = p.clone();
            lo.raw[q] -= h;
            hi.raw[q] += h;
            let (a_lo, _) = lo.to_matrix().unwrap();
            let (a_hi, _) = hi.to_matrix().unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (a_hi[i][j] - a_lo[i][j]) / (2.0 * h);
                    assert!(
                        (fd - tangents[q].d_a[i][j]).abs() <= 1e-8,
                        "param {q}, entry ({i},{j}): fd {fd} vs analytic {}",
                        tangents[q].d_a[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn kernels_partition_unity() {
        for kernel in [InterpKernel::Linear, InterpKernel::Cubic] {
            for f in [0.0, 0.1, 0.25, 0.5, 0.75, 0.99] {
                let w = kernel.weights(f);
                let sum: f64 = w.iter().sum();
                assert!((sum - 1.0).abs() < 1e-14, "{kernel:?} at {f}: {sum}");
                let dsum: f64 = kernel.dweights(f).iter().sum();
                assert!(dsum.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identity_warp_is_exact_copy() {
        let x = random_volume(&[9, 7, 8], 11);
        for kernel in [InterpKernel::Linear, InterpKernel::Cubic] {
            for kind in [
                MotionKind::General,
                MotionKind::Rigid,
                MotionKind::Scaling,
                MotionKind::Translation,
            ] {
                let p = AffineParams::identity(MotionModel::new(kind, 3).unwrap());
                let out = warp_apply(&x, &p, kernel).unwrap();
                assert_eq!(out.data, x.data, "{kind:?} {kernel:?}");
                let adj = warp_adjoint(&x, &p, kernel).unwrap();
                assert_eq!(adj.data, x.data);
            }
        }
    }

    #[test]
    fn integer_translation_is_exact_shift() {
        let x = random_volume(&[12, 10], 3);
        let model = MotionModel::new(MotionKind::Translation, 2).unwrap();
        let p = AffineParams::new(model, vec![3.0, -2.0]).unwrap();
        let out = warp_apply(&x, &p, InterpKernel::Linear).unwrap();
        for u0 in 0..12usize {
            for u1 in 0..10usize {
                let src0 = u0 as isize + 3;
                let src1 = u1 as isize - 2;
                let want = if src0 >= 0 && src0 < 12 && src1 >= 0 && src1 < 10 {
                    x.data[src0 as usize * 10 + src1 as usize]
                } else {
                    0.0
                };
                assert_eq!(out.data[u0 * 10 + u1], want, "at ({u0},{u1})");
            }
        }
    }

    #[test]
    fn constant_image_stays_constant_inside() {
        let grid = GridSpec::uniform(&[16, 16]);
        let x = Volume::new(grid, vec![2.5; 256]).unwrap();
        let model = MotionModel::new(MotionKind::Rigid, 2).unwrap();
        let p = AffineParams::new(model, vec![0.3, 0.4, -1.2]).unwrap();
        for kernel in [InterpKernel::Linear, InterpKernel::Cubic] {
            let out = warp_apply(&x, &p, kernel).unwrap();
            // Deep interior: the full stencil lands inside for this motion.
            for u0 in 6..10 {
                for u1 in 6..10 {
                    assert!(
                        (out.data[u0 * 16 + u1] - 2.5).abs() < 1e-12,
                        "{kernel:?} at ({u0},{u1})"
                    );
                }
            }
        }
    }

    #[test]
    fn adjoint_identity_all_models_and_kernels() {
        for dims in [vec![16usize, 16], vec![12, 10, 11]] {
            let d = dims.len();
            let x = random_volume(&dims, 21);
            let y = random_volume(&dims, 22);
            for kind in [
                MotionKind::General,
                MotionKind::Rigid,
                MotionKind::Scaling,
                MotionKind::Translation,
            ] {
                let model = MotionModel::new(kind, d).unwrap();
                let mut p = AffineParams::identity(model);
                // Perturb away from identity.
                let mut rng = ChaCha12Rng::seed_from_u64(37);
                for v in p.raw.iter_mut() {
                    *v += 0.08 * (rng.gen::<f64>() - 0.5);
                }
                for kernel in [InterpKernel::Linear, InterpKernel::Cubic] {
                    let mx = warp_apply(&x, &p, kernel).unwrap();
                    let mty = warp_adjoint(&y, &p, kernel).unwrap();
                    let lhs = dot(&mx.data, &y.data);
                    let rhs = dot(&x.data, &mty.data);
                    let scale = norm(&mx.data) * norm(&y.data);
                    assert!(
                        (lhs - rhs).abs() / scale.max(1e-30) <= 1e-6,
                        "{kind:?} {kernel:?} {dims:?}: {lhs} vs {rhs}"
                    );
                }
            }
        }
    }

    #[test]
    fn translation_composition_on_interior() {
        let x = blob_volume(&[24, 24]);
        let model = MotionModel::new(MotionKind::Translation, 2).unwrap();
        let t1 = AffineParams::new(model, vec![2.0, -1.0]).unwrap();
        let t2 = AffineParams::new(model, vec![1.0, 3.0]).unwrap();
        let t12 = AffineParams::new(model, vec![3.0, 2.0]).unwrap();
        let once = warp_apply(&x, &t12, InterpKernel::Linear).unwrap();
        let twice =
            warp_apply(&warp_apply(&x, &t1, InterpKernel::Linear).unwrap(), &t2, InterpKernel::Linear)
                .unwrap();
        for u0 in 6..18 {
            for u1 in 6..18 {
                let i = u0 * 24 + u1;
                assert!((once.data[i] - twice.data[i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn vjp_zero_cotangent_is_zero() {
        let x = random_volume(&[10, 10], 5);
        let y = Volume::zeros(x.grid.clone()).unwrap();
        let model = MotionModel::new(MotionKind::Rigid, 2).unwrap();
        let p = AffineParams::identity(model);
        let g = warp_derivative_vjp(&x, &p, &y, InterpKernel::Cubic).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vjp_constant_image_interior_support() {
        let grid = GridSpec::uniform(&[20, 20]);
        let x = Volume::new(grid.clone(), vec![1.0; 400]).unwrap();
        let mut y = Volume::zeros(grid).unwrap();
        // Support at least kernel-support voxels away from the boundary.
        for u0 in 6..14 {
            for u1 in 6..14 {
                y.data[u0 * 20 + u1] = 1.0;
            }
        }
        let model = MotionModel::new(MotionKind::Translation, 2).unwrap();
        let p = AffineParams::new(model, vec![0.4, -0.3]).unwrap();
        let g = warp_derivative_vjp(&x, &p, &y, InterpKernel::Cubic).unwrap();
        for v in g {
            assert!(v.abs() <= 1e-8, "constant-image derivative leaked: {v}");
        }
    }

    #[test]
    fn jvp_zero_direction_is_zero() {
        let x = random_volume(&[10, 10], 6);
        let model = MotionModel::new(MotionKind::General, 2).unwrap();
        let p = AffineParams::identity(model);
        let out = warp_derivative_jvp(&x, &p, &vec![0.0; 6], InterpKernel::Cubic).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jvp_vjp_duality() {
        for kind in [
            MotionKind::General,
            MotionKind::Rigid,
            MotionKind::Scaling,
            MotionKind::Translation,
        ] {
            let x = blob_volume(&[16, 16, 16]);
            let y = random_volume(&[16, 16, 16], 31);
            let model = MotionModel::new(kind, 3).unwrap();
            let mut p = AffineParams::identity(model);
            let mut rng = ChaCha12Rng::seed_from_u64(41);
            for v in p.raw.iter_mut() {
                *v += 0.05 * (rng.gen::<f64>() - 0.5);
            }
            let mut dp = vec![0.0; model.param_count()];
            for v in dp.iter_mut() {
                *v = rng.gen::<f64>() - 0.5;
            }
            let jvp = warp_derivative_jvp(&x, &p, &dp, InterpKernel::Cubic).unwrap();
            let vjp = warp_derivative_vjp(&x, &p, &y, InterpKernel::Cubic).unwrap();
            let lhs = dot(&jvp.data, &y.data);
            let rhs = dot(&dp, &vjp);
            let scale = norm(&jvp.data) * norm(&y.data);
            assert!(
                (lhs - rhs).abs() / scale.max(1e-30) <= 1e-8,
                "{kind:?}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn jvp_matches_finite_difference() {
        let x = blob_volume(&[18, 18]);
        let model = MotionModel::new(MotionKind::Rigid, 2).unwrap();
        let p = AffineParams::new(model, vec![0.05, 0.5, -0.25]).unwrap();
        let dp = vec![0.7, -0.4, 0.9];
        let jvp = warp_derivative_jvp(&x, &p, &dp, InterpKernel::Cubic).unwrap();
        let h = 1e-4;
        let mut hi = p.clone();
        let mut lo = p.clone();
        for q in 0..3 {
            hi.raw[q] += h * dp[q];
            lo.raw[q] -= h * dp[q];
        }
        let whi = warp_apply(&x, &hi, InterpKernel::Cubic).unwrap();
        let wlo = warp_apply(&x, &lo, InterpKernel::Cubic).unwrap();
        let mut err = 0.0f64;
        let mut mag = 0.0f64;
        for i in 0..jvp.data.len() {
            let fd = (whi.data[i] - wlo.data[i]) / (2.0 * h);
            err += (fd - jvp.data[i]).powi(2);
            mag += fd.powi(2);
        }
        assert!(err.sqrt() / mag.sqrt().max(1e-30) <= 1e-3);
    }

    #[test]
    fn center_of_mass_moves_against_translation() {
        // Narrow blob so its support stays inside the grid after the shift.
        let grid = GridSpec::uniform(&[48, 48, 48]);
        let c = grid.center.clone();
        let sigma = 4.0;
        let data: Vec<f64> = (0..grid.len())
            .map(|i| {
                let u0 = (i / (48 * 48)) as f64;
                let u1 = ((i / 48) % 48) as f64;
                let u2 = (i % 48) as f64;
                let r2 = (u0 - c[0]).powi(2) + (u1 - c[1]).powi(2) + (u2 - c[2]).powi(2);
                (-r2 / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let x = Volume::new(grid, data).unwrap();
        let model = MotionModel::new(MotionKind::Translation, 3).unwrap();
        let p = AffineParams::new(model, vec![-5.0, 7.0, 10.0]).unwrap();
        let out = warp_apply(&x, &p, InterpKernel::Cubic).unwrap();
        let com = |v: &Volume| -> [f64; 3] {
            let mut m = 0.0;
            let mut c = [0.0; 3];
            for (i, &val) in v.data.iter().enumerate() {
                let u0 = i / (48 * 48);
                let u1 = (i / 48) % 48;
                let u2 = i % 48;
                m += val;
                c[0] += val * u0 as f64;
                c[1] += val * u1 as f64;
                c[2] += val * u2 as f64;
            }
            [c[0] / m, c[1] / m, c[2] / m]
        };
        let before = com(&x);
        let after = com(&out);
        let want = [5.0, -7.0, -10.0];
        for ax in 0..3 {
            assert!(
                (after[ax] - before[ax] - want[ax]).abs() <= 0.1,
                "axis {ax}: moved {}",
                after[ax] - before[ax]
            );
        }
    }
}
