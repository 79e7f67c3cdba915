//! Volumetric rendering: stratified and inverse-CDF depth sampling, and
//! differentiable alpha compositing against a background colour.
//!
//! Transmittance is computed in log space, `T_i = exp(-sum_{j<i} sigma_j delta_j)`,
//! which makes `sum_i w_i + T_f = 1` hold up to rounding for any densities.

use lasernv_tensor::{Real, Tape, Tensor, Var};
use rand::Rng;

use crate::geometry::Ray;

/// Floor added to coarse weights before inverse-CDF sampling, and the
/// smallest accumulated weight used to normalize expected depth.
pub const WEIGHT_EPS: f64 = 1e-5;

/// One uniform sample in each of `n` equal bins of `[t_near, t_far]`.
pub fn stratified_samples(ray: &Ray, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    stratified(ray.t_near, ray.t_far, n, |_| rng.random::<f64>())
}

/// Bin midpoints: the deterministic counterpart of [`stratified_samples`].
pub fn midpoint_samples(ray: &Ray, n: usize) -> Vec<f64> {
    stratified(ray.t_near, ray.t_far, n, |_| 0.5)
}

fn stratified(t_near: f64, t_far: f64, n: usize, mut jitter: impl FnMut(usize) -> f64) -> Vec<f64> {
    assert!(n >= 1, "need at least one sample per ray");
    let width = (t_far - t_near) / n as f64;
    (0..n)
        .map(|i| {
            // Keep samples strictly inside their bin so depths strictly increase.
            let u = jitter(i).clamp(1e-9, 1.0 - 1e-9);
            t_near + (i as f64 + u) * width
        })
        .collect()
}

/// Interval edges owned by each sorted depth sample: midpoints between
/// neighbours, closed by `t_near` and `t_far`.
fn bin_edges(depths: &[f64], t_near: f64, t_far: f64) -> Vec<f64> {
    let mut edges = Vec::with_capacity(depths.len() + 1);
    edges.push(t_near);
    edges.extend(depths.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(t_far);
    edges
}

/// Draws `n_fine` depths from the piecewise-constant density proportional to
/// `weights + WEIGHT_EPS` over the coarse sample intervals. Unsorted and
/// without the coarse depths; see [`fine_samples`] for the merged form.
pub fn inverse_cdf_samples(
    weights: &[f64],
    depths: &[f64],
    t_near: f64,
    t_far: f64,
    n_fine: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    assert_eq!(weights.len(), depths.len(), "one weight per coarse depth");
    let edges = bin_edges(depths, t_near, t_far);
    let w: Vec<f64> = weights.iter().map(|&w| w.max(0.0) + WEIGHT_EPS).collect();
    let total: f64 = w.iter().sum();
    let mut cdf = Vec::with_capacity(w.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for v in &w {
        acc += v / total;
        cdf.push(acc);
    }
    (0..n_fine)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            let bin = cdf.partition_point(|&c| c <= u).clamp(1, w.len()) - 1;
            let frac = ((u - cdf[bin]) / (cdf[bin + 1] - cdf[bin])).clamp(0.0, 1.0);
            (edges[bin] + frac * (edges[bin + 1] - edges[bin])).clamp(t_near, t_far)
        })
        .collect()
}

/// Fine depths merged with the coarse ones, sorted ascending.
pub fn fine_samples(
    weights: &[f64],
    depths: &[f64],
    t_near: f64,
    t_far: f64,
    n_fine: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut all = inverse_cdf_samples(weights, depths, t_near, t_far, n_fine, rng);
    all.extend_from_slice(depths);
    all.sort_by(f64::total_cmp);
    all
}

/// Composited rays.
pub struct Composite<'t, T: Real> {
    /// `[R, 3]`
    pub color: Var<'t, T>,
    /// `[R, S]`
    pub weights: Var<'t, T>,
    /// Residual transmittance `[R]`.
    pub t_final: Var<'t, T>,
    /// Expected depth `[R]`; `t_far` where the ray is empty.
    pub depth: Var<'t, T>,
}

/// `delta_i = t_{i+1} - t_i`, with the last interval closed by `t_far`.
pub fn deltas(depths: &[f64], t_far: f64) -> Vec<f64> {
    let n = depths.len();
    (0..n).map(|i| if i + 1 < n { depths[i + 1] - depths[i] } else { t_far - depths[i] }).collect()
}

/// Composites `R` rays of `S` samples each.
///
/// `sigma: [R, S]`, `rgb: [R, S, 3]`, `depths: [R, S]` sorted per ray,
/// `t_far: [R]`, `bg: [R, 3]` or `[1, 3]`.
pub fn composite<'t, T: Real>(
    sigma: Var<'t, T>,
    rgb: Var<'t, T>,
    depths: &[f64],
    t_far: &[f64],
    bg: Var<'t, T>,
) -> Composite<'t, T> {
    let tape = sigma.tape();
    let (r, s) = (sigma.dim(0), sigma.dim(1));
    assert_eq!(depths.len(), r * s, "depths must be [R, S]");
    assert_eq!(t_far.len(), r, "one t_far per ray");
    let delta: Vec<f64> = depths.chunks(s).zip(t_far).flat_map(|(d, &tf)| deltas(d, tf)).collect();
    let delta = tape.constant(Tensor::from_f64(vec![r, s], &delta));
    let tau = sigma.mul(delta);
    let trans = tau.cumsum_exclusive().neg().exp();
    let alpha = tau.neg().exp().neg().add_scalar(1.0);
    let weights = trans.mul(alpha);
    let t_final = tau.sum_axis(1, false).neg().exp();
    let color = weights
        .reshape(vec![r, s, 1])
        .mul(rgb)
        .sum_axis(1, false)
        .add(t_final.reshape(vec![r, 1]).mul(bg));

    let acc = weights.sum_axis(1, false);
    let acc_v = acc.value();
    let depth_t = tape.constant(Tensor::from_f64(vec![r, s], depths));
    let weighted = weights.mul(depth_t).sum_axis(1, false);
    // max(acc, eps) with a constant offset, and t_far on empty rays.
    let offset: Vec<f64> = acc_v.data().iter().map(|a| (WEIGHT_EPS - a.as_f64()).max(0.0)).collect();
    let empty: Vec<f64> = acc_v.data().iter().map(|a| if a.as_f64() < WEIGHT_EPS { 1.0 } else { 0.0 }).collect();
    let keep: Vec<f64> = empty.iter().map(|e| 1.0 - e).collect();
    let far: Vec<f64> = empty.iter().zip(t_far).map(|(e, tf)| e * tf).collect();
    let depth = weighted
        .div(acc.add(tape.constant(Tensor::from_f64(vec![r], &offset))))
        .mul(tape.constant(Tensor::from_f64(vec![r], &keep)))
        .add(tape.constant(Tensor::from_f64(vec![r], &far)));
    Composite { color, weights, t_final, depth }
}

/// Plain-value result for one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderResult {
    pub color: [f64; 3],
    pub expected_depth: f64,
    pub weights: Vec<f64>,
    pub t_final: f64,
}

/// Single-ray compositing in double precision.
pub fn composite_ray(depths: &[f64], sigma: &[f64], rgb: &[[f64; 3]], t_far: f64, bg: [f64; 3]) -> RenderResult {
    let s = depths.len();
    assert!(s >= 1 && sigma.len() == s && rgb.len() == s, "mismatched sample arrays");
    let tape = Tape::<f64>::new();
    let sig = tape.constant(Tensor::from_f64(vec![1, s], sigma));
    let flat: Vec<f64> = rgb.iter().flatten().copied().collect();
    let col = tape.constant(Tensor::from_f64(vec![1, s, 3], &flat));
    let bgv = tape.constant(Tensor::from_f64(vec![1, 3], &bg));
    let out = composite(sig, col, depths, &[t_far], bgv);
    let c = out.color.value();
    RenderResult {
        color: [c.data()[0], c.data()[1], c.data()[2]],
        expected_depth: out.depth.item(),
        weights: out.weights.value().to_f64_vec(),
        t_final: out.t_final.item(),
    }
}
