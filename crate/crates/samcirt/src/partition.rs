//! Feasible-subscan partitioning.
//!
//! A full dynamic scan of `N + 1` projections yields `N` SSIM values between
//! adjacent projections. The partitioner splits the pair indices `0..N` into
//! contiguous segments minimizing `n + lambda * sum_k Var(segment_k)`
//! (population variance, singletons have variance zero). For
//! `lambda <= 1` the single full segment is always optimal. An exact
//! dynamic program over prefixes solves the problem in `O(N^2)`; a
//! brute-force enumerator over all `2^(N-1)` contiguous partitions serves as
//! its oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ProjStack;

/// SSIM parameters: Gaussian window, stabilization constants and the value
/// range of the imagery. Defaults are the common literature choices
/// (`k1 = 0.01`, `k2 = 0.03`, window sigma 1.5, 11-sample support).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    /// Gaussian window standard deviation, pixels.
    pub window: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl SsimParams {
    pub fn with_dynamic_range(dynamic_range: f64) -> Self {
        SsimParams {
            window: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range,
        }
    }

    /// Dynamic range taken as max - min over the whole stack.
    pub fn for_stack(stack: &ProjStack) -> Result<Self> {
        let max = stack.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = stack.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let params = SsimParams::with_dynamic_range(max - min);
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window > 0.0) || !(self.k1 > 0.0) || !(self.k2 > 0.0) {
            return Err(Error::invalid("ssim params", "window, k1, k2 must be positive".to_string()));
        }
        if !(self.dynamic_range > 0.0) || !self.dynamic_range.is_finite() {
            return Err(Error::invalid("ssim params", "zero dynamic_range".to_string()));
        }
        Ok(())
    }

    fn radius(&self) -> usize {
        ((3.0 * self.window).ceil() as usize).max(1)
    }
}

/// Separable truncated-Gaussian filtering of a 1D or 2D field, zero-padded.
/// Returns the unnormalized weighted sums; divide by the per-pixel window
/// mass (product of the per-axis masses) to get local means.
fn filter_axis(field: &[f64], shape: &[usize], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; field.len()];
    match shape.len() {
        1 => {
            let n = shape[0] as isize;
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let j = i as isize + ki as isize - r;
                    if j >= 0 && j < n {
                        acc += w * field[j as usize];
                    }
                }
                *o = acc;
            }
        }
        2 => {
            let (n0, n1) = (shape[0] as isize, shape[1] as isize);
            for i0 in 0..n0 {
                for i1 in 0..n1 {
                    let mut acc = 0.0;
                    for (ki, w) in kernel.iter().enumerate() {
                        let off = ki as isize - r;
                        let (j0, j1) = if axis == 0 { (i0 + off, i1) } else { (i0, i1 + off) };
                        if j0 >= 0 && j0 < n0 && j1 >= 0 && j1 < n1 {
                            acc += w * field[(j0 * n1 + j1) as usize];
                        }
                    }
                    out[(i0 * n1 + i1) as usize] = acc;
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

/// Mean local SSIM between two equally shaped images (shape is 1D or 2D),
/// Gaussian-weighted local statistics, window mass renormalized at the
/// boundary. Symmetric in its arguments; identical inputs give exactly 1.
pub fn ssim_pair(a: &[f64], b: &[f64], shape: &[usize], params: &SsimParams) -> Result<f64> {
    params.validate()?;
    if a.len() != b.len() || a.len() != shape.iter().product::<usize>() {
        return Err(Error::ShapeMismatch(format!(
            "ssim inputs: {} vs {} values, shape {:?}",
            a.len(),
            b.len(),
            shape
        )));
    }
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::invalid("ssim shape", format!("{shape:?}")));
    }
    let kernel = gaussian_kernel(params);
    // Per-axis window mass for boundary renormalization. The in-bounds
    // region is a box, so the mass separates into a product.
    let mass: Vec<Vec<f64>> = (0..shape.len())
        .map(|ax| axis_mass(shape[ax], &kernel))
        .collect();
    let filt = |field: &[f64]| -> Vec<f64> {
        let mut cur = filter_axis(field, shape, 0, &kernel);
        if shape.len() == 2 {
            cur = filter_axis(&cur, shape, 1, &kernel);
        }
        cur
    };
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let fa = filt(a);
    let fb = filt(b);
    let faa = filt(&aa);
    let fbb = filt(&bb);
    let fab = filt(&ab);

    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let mut acc = 0.0;
    for i in 0..a.len() {
        let m = match shape.len() {
            1 => mass[0][i],
            _ => mass[0][i / shape[1]] * mass[1][i % shape[1]],
        };
        let mu_a = fa[i] / m;
        let mu_b = fb[i] / m;
        let var_a = faa[i] / m - mu_a * mu_a;
        let var_b = fbb[i] / m - mu_b * mu_b;
        let cov = fab[i] / m - mu_a * mu_b;
        let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
        let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
        acc += num / den;
    }
    Ok(acc / a.len() as f64)
}

fn gaussian_kernel(params: &SsimParams) -> Vec<f64> {
    let r = params.radius() as isize;
    let s2 = 2.0 * params.window * params.window;
    let raw: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / s2).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

fn axis_mass(n: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    (0..n as isize)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .filter(|(ki, _)| {
                    let j = i + *ki as isize - r;
                    j >= 0 && j < n as isize
                })
                .map(|(_, w)| w)
                .sum()
        })
        .collect()
}

/// SSIM between every pair of adjacent projections: `s[i] =
/// SSIM(projection_i, projection_{i+1})`, length `angles - 1`.
pub fn adjacent_ssim(b: &ProjStack, params: &SsimParams) -> Result<Vec<f64>> {
    b.validate()?;
    params.validate()?;
    let n = b.geometry.n_angles();
    if n < 2 {
        return Err(Error::invalid("projection stack", "need at least 2 angles".to_string()));
    }
    let shape: Vec<usize> = match b.geometry.det_count.len() {
        1 => vec![b.geometry.det_count[0]],
        // Angle images are rows x cols.
        _ => vec![b.geometry.det_count[1], b.geometry.det_count[0]],
    };
    (0..n - 1)
        .into_par_iter()
        .map(|i| ssim_pair(b.angle_slice(i), b.angle_slice(i + 1), &shape, params))
        .collect()
}

/// Contiguous partition of the pair indices with its SSIM vector, trade-off
/// coefficient and objective value. Segments are half-open `[start, end)`
/// ranges over `0..s.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscanPlan {
    pub segments: Vec<(usize, usize)>,
    pub s: Vec<f64>,
    pub lambda: f64,
    pub objective_value: f64,
}

/// Prefix sums of `s` and `s^2`; both the DP and the brute-force enumerator
/// derive segment variances from this single accumulation path so their
/// candidate values agree bitwise.
struct PrefixStats {
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl PrefixStats {
    fn new(s: &[f64]) -> Self {
        let mut s1 = vec![0.0; s.len() + 1];
        let mut s2 = vec![0.0; s.len() + 1];
        for (i, &v) in s.iter().enumerate() {
            s1[i + 1] = s1[i] + v;
            s2[i + 1] = s2[i] + v * v;
        }
        PrefixStats { s1, s2 }
    }

    /// Population variance of `s[lo..hi]`, clamped to be non-negative.
    fn variance(&self, lo: usize, hi: usize) -> f64 {
        let len = (hi - lo) as f64;
        if hi - lo <= 1 {
            return 0.0;
        }
        let mean = (self.s1[hi] - self.s1[lo]) / len;
        ((self.s2[hi] - self.s2[lo]) / len - mean * mean).max(0.0)
    }
}

fn check_partition_input(s: &[f64], lambda: f64) -> Result<()> {
    if s.is_empty() {
        return Err(Error::invalid("ssim vector", "empty".to_string()));
    }
    if s.iter().any(|v| !v.is_finite() || *v < -1e-9 || *v > 1.0 + 1e-9) {
        return Err(Error::invalid("ssim vector", "values must lie in [0, 1]".to_string()));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid("lambda", "must be positive".to_string()));
    }
    Ok(())
}

fn check_epsilon(epsilon: Option<f64>) -> Result<()> {
    if let Some(e) = epsilon {
        if !(e > 0.0) || !e.is_finite() {
            return Err(Error::invalid("epsilon", "must be positive when given".to_string()));
        }
    }
    Ok(())
}

/// Candidate comparison: lower objective first, then fewer segments, then
/// lexicographically earliest internal cut positions.
fn better(
    value: f64,
    nseg: usize,
    cuts: &[usize],
    best_value: f64,
    best_nseg: usize,
    best_cuts: &[usize],
) -> bool {
    if value != best_value {
        return value < best_value;
    }
    if nseg != best_nseg {
        return nseg < best_nseg;
    }
    cuts < best_cuts
}

/// Exact minimizer of `n + lambda * sum_k Var(segment_k)` over contiguous
/// partitions, by dynamic programming over prefixes. With `epsilon` given,
/// segments whose SSIM spread does not satisfy `max - min < epsilon` are
/// infeasible (singletons always are).
pub fn partition_exact(s: &[f64], lambda: f64, epsilon: Option<f64>) -> Result<SubscanPlan> {
    check_partition_input(s, lambda)?;
    check_epsilon(epsilon)?;
    let n = s.len();
    let stats = PrefixStats::new(s);

    #[derive(Clone)]
    struct State {
        value: f64,
        nseg: usize,
        cuts: Vec<usize>,
    }
    let mut dp: Vec<Option<State>> = vec![None; n + 1];
    dp[0] = Some(State {
        value: 0.0,
        nseg: 0,
        cuts: Vec::new(),
    });
    for j in 1..=n {
        let mut best: Option<State> = None;
        let mut seg_min = f64::INFINITY;
        let mut seg_max = f64::NEG_INFINITY;
        for i in (0..j).rev() {
            seg_min = seg_min.min(s[i]);
            seg_max = seg_max.max(s[i]);
            if let Some(e) = epsilon {
                if j - i > 1 && !(seg_max - seg_min < e) {
                    continue;
                }
            }
            let Some(prev) = &dp[i] else { continue };
            let value = prev.value + 1.0 + lambda * stats.variance(i, j);
            let nseg = prev.nseg + 1;
            let is_better = match &best {
                None => true,
                Some(b) => {
                    // Candidate cuts are prev.cuts plus i (if interior).
                    let mut cuts = prev.cuts.clone();
                    if i > 0 {
                        cuts.push(i);
                    }
                    better(value, nseg, &cuts, b.value, b.nseg, &b.cuts)
                }
            };
            if is_better {
                let mut cuts = prev.cuts.clone();
                if i > 0 {
                    cuts.push(i);
                }
                best = Some(State { value, nseg, cuts });
            }
        }
        dp[j] = best;
    }
    let final_state = dp[n]
        .take()
        .expect("singletons are always feasible, so dp[n] exists");
    Ok(plan_from_cuts(s, lambda, final_state.value, &final_state.cuts))
}

/// Brute-force oracle: enumerate all `2^(N-1)` contiguous partitions.
/// Same objective accumulation and tie-breaks as [`partition_exact`].
pub fn partition_bruteforce(s: &[f64], lambda: f64, epsilon: Option<f64>) -> Result<SubscanPlan> {
    check_partition_input(s, lambda)?;
    check_epsilon(epsilon)?;
    let n = s.len();
    if n > 20 {
        return Err(Error::invalid(
            "ssim vector",
            format!("brute force limited to 20 pairs, got {n}"),
        ));
    }
    let stats = PrefixStats::new(s);
    let feasible = |lo: usize, hi: usize| -> bool {
        match epsilon {
            None => true,
            Some(e) => {
                if hi - lo <= 1 {
                    true
                } else {
                    let mut mn = f64::INFINITY;
                    let mut mx = f64::NEG_INFINITY;
                    for v in &s[lo..hi] {
                        mn = mn.min(*v);
                        mx = mx.max(*v);
                    }
                    mx - mn < e
                }
            }
        }
    };
    let mut best_value = f64::INFINITY;
    let mut best_nseg = usize::MAX;
    let mut best_cuts: Vec<usize> = Vec::new();
    let mut found = false;
    // Bitmask over the n-1 interior positions: bit i set = cut before s[i+1].
    for mask in 0u64..(1u64 << (n - 1)) {
        let mut cuts = Vec::new();
        for i in 0..n - 1 {
            if mask >> i & 1 == 1 {
                cuts.push(i + 1);
            }
        }
        let mut value = 0.0;
        let mut lo = 0usize;
        let mut ok = true;
        for &cut in cuts.iter().chain(std::iter::once(&n)) {
            if !feasible(lo, cut) {
                ok = false;
                break;
            }
            value = value + 1.0 + lambda * stats.variance(lo, cut);
            lo = cut;
        }
        if !ok {
            continue;
        }
        let nseg = cuts.len() + 1;
        if !found || better(value, nseg, &cuts, best_value, best_nseg, &best_cuts) {
            found = true;
            best_value = value;
            best_nseg = nseg;
            best_cuts = cuts;
        }
    }
    debug_assert!(found, "the all-singletons partition is always feasible");
    Ok(plan_from_cuts(s, lambda, best_value, &best_cuts))
}

fn plan_from_cuts(s: &[f64], lambda: f64, objective_value: f64, cuts: &[usize]) -> SubscanPlan {
    let mut segments = Vec::with_capacity(cuts.len() + 1);
    let mut lo = 0usize;
    for &cut in cuts.iter().chain(std::iter::once(&s.len())) {
        segments.push((lo, cut));
        lo = cut;
    }
    SubscanPlan {
        segments,
        s: s.to_vec(),
        lambda,
        objective_value,
    }
}

/// Convert a partition of pair indices `0..N` into subscan bounds over the
/// `N + 1` angles.
///
/// Pair `i` spans angles `(i, i+1)`; adjacent segments share an angle. The
/// shared angle is assigned to the left subscan: a segment ending at pair
/// `r` closes its subscan at angle `r + 1`, so a singleton low-SSIM pair
/// isolates the motion event between its two angles.
pub fn plan_to_subscans(plan: &SubscanPlan) -> Result<Vec<(usize, usize)>> {
    if plan.segments.is_empty() {
        return Err(Error::invalid("plan", "no segments".to_string()));
    }
    let n = plan.s.len();
    let mut cursor = 0usize;
    for &(s, e) in &plan.segments {
        if s != cursor || e <= s {
            return Err(Error::invalid("plan", "segments must tile the pair indices".to_string()));
        }
        cursor = e;
    }
    if cursor != n {
        return Err(Error::invalid("plan", "segments must cover all pairs".to_string()));
    }
    let mut bounds = Vec::with_capacity(plan.segments.len());
    let mut start = 0usize;
    for (k, &(_, seg_end)) in plan.segments.iter().enumerate() {
        // Last pair of this segment is seg_end - 1, spanning angles
        // (seg_end - 1, seg_end); the left subscan keeps angle seg_end
        // except for the final segment which must absorb the last angle.
        let end = if k + 1 == plan.segments.len() {
            n + 1
        } else {
            seg_end + 1
        };
        bounds.push((start, end));
        start = end;
    }
    Ok(bounds)
}
