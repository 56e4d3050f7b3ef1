//! SSIM and MS-SSIM with Gaussian-weighted local statistics and analytic gradients.
//!
//! Local statistics use a separable Gaussian window in valid mode (no padding), so the
//! SSIM map covers the positions where the whole window fits. Gradients are taken with
//! respect to the first argument, the estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Shape, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    /// Odd window edge length.
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    /// Luminance exponent.
    pub alpha: f64,
    /// Contrast exponent.
    pub beta: f64,
    /// Structure exponent.
    pub gamma: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, c1: 0.01f64.powi(2), c2: 0.03f64.powi(2), alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("SSIM window must be odd, got {}", self.window)));
        }
        if !(self.sigma > 0.0 && self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidConfig("SSIM sigma, c1 and c2 must be positive".into()));
        }
        if ![self.alpha, self.beta, self.gamma].iter().all(|e| e.is_finite() && *e > 0.0) {
            return Err(Error::InvalidConfig("SSIM exponents must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsSsimConfig {
    pub scales: usize,
    /// One weight per scale, finest first.
    pub weights: Vec<f64>,
    /// Window at the finest scale; coarser scales shrink it to fit.
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    /// Use the unnormalized single-product combination instead of the standard one.
    pub literal: bool,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        let s = SsimConfig::default();
        Self {
            scales: 3,
            weights: vec![0.0448, 0.2856, 0.3001],
            window: s.window,
            sigma: s.sigma,
            c1: s.c1,
            c2: s.c2,
            literal: false,
        }
    }
}

impl MsSsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 {
            return Err(Error::InvalidConfig("MS-SSIM needs at least one scale".into()));
        }
        if self.weights.len() != self.scales || self.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "MS-SSIM needs {} positive weights, got {:?}",
                self.scales, self.weights
            )));
        }
        self.scale_config(self.window).validate()
    }

    fn scale_config(&self, window: usize) -> SsimConfig {
        SsimConfig { window, sigma: self.sigma, c1: self.c1, c2: self.c2, ..SsimConfig::default() }
    }
}

/// Normalized 1D Gaussian taps.
pub(crate) fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window / 2) as f64;
    let taps: Vec<f64> = (0..window).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

fn strides(shape: Shape) -> [usize; 3] {
    [shape[1] * shape[2], shape[2], 1]
}

/// Valid-mode correlation with `taps` along one axis.
fn filter_axis(v: &[f64], shape: Shape, axis: usize, taps: &[f64]) -> (Vec<f64>, Shape) {
    let mut out_shape = shape;
    out_shape[axis] = shape[axis] + 1 - taps.len();
    let (si, so) = (strides(shape), strides(out_shape));
    let mut out = vec![0.0; out_shape.iter().product()];
    for i in 0..out_shape[0] {
        for j in 0..out_shape[1] {
            for k in 0..out_shape[2] {
                let base = i * si[0] + j * si[1] + k * si[2];
                out[i * so[0] + j * so[1] + k] = taps.iter().enumerate().map(|(t, w)| w * v[base + t * si[axis]]).sum();
            }
        }
    }
    (out, out_shape)
}

/// Adjoint of [`filter_axis`]: scatters `g` back onto the input grid.
fn filter_axis_adjoint(g: &[f64], out_shape: Shape, axis: usize, taps: &[f64]) -> (Vec<f64>, Shape) {
    let mut shape = out_shape;
    shape[axis] = out_shape[axis] + taps.len() - 1;
    let (si, so) = (strides(shape), strides(out_shape));
    let mut v = vec![0.0; shape.iter().product()];
    for i in 0..out_shape[0] {
        for j in 0..out_shape[1] {
            for k in 0..out_shape[2] {
                let base = i * si[0] + j * si[1] + k * si[2];
                let gv = g[i * so[0] + j * so[1] + k];
                for (t, w) in taps.iter().enumerate() {
                    v[base + t * si[axis]] += w * gv;
                }
            }
        }
    }
    (v, shape)
}

fn blur(v: &[f64], shape: Shape, taps: &[f64]) -> (Vec<f64>, Shape) {
    let (a, s) = filter_axis(v, shape, 0, taps);
    let (b, s) = filter_axis(&a, s, 1, taps);
    filter_axis(&b, s, 2, taps)
}

fn blur_adjoint(g: &[f64], out_shape: Shape, taps: &[f64]) -> Vec<f64> {
    let (a, s) = filter_axis_adjoint(g, out_shape, 2, taps);
    let (b, s) = filter_axis_adjoint(&a, s, 1, taps);
    filter_axis_adjoint(&b, s, 0, taps).0
}

/// Which SSIM factor a map holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Component {
    Luminance,
    ContrastStructure,
    Full,
}

/// Sign-preserving power and its derivative.
fn spow(u: f64, e: f64) -> (f64, f64) {
    if e == 1.0 {
        return (u, 1.0);
    }
    let a = u.abs();
    (u.signum() * a.powf(e), e * a.powf(e - 1.0))
}

struct Consts {
    c1: f64,
    c2: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
}

/// Map value and its partials w.r.t. (μx, σx², σxy) at one position.
fn local(c: &Consts, kind: Component, mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> (f64, [f64; 3]) {
    let (l, dl) = {
        let (a, b) = (2.0 * mx * my + c.c1, mx * mx + my * my + c.c1);
        let (v, d) = spow(a / b, c.alpha);
        (v, d * (2.0 * my * b - a * 2.0 * mx) / (b * b))
    };
    let (k, dk_dv, dk_dc) = if c.beta == c.gamma {
        // c·s collapses to a single ratio when C3 = C2 / 2.
        let (a, b) = (2.0 * cxy + c.c2, vx + vy + c.c2);
        let (v, d) = spow(a / b, c.beta);
        (v, -d * a / (b * b), d * 2.0 / b)
    } else {
        let c3 = c.c2 / 2.0;
        let (sx, sy) = (vx.max(0.0).sqrt(), vy.max(0.0).sqrt());
        let dsx = if sx > 0.0 { 0.5 / sx } else { 0.0 };
        let (ac, bc) = (2.0 * sx * sy + c.c2, vx + vy + c.c2);
        let (as_, bs) = (cxy + c3, sx * sy + c3);
        let (cv, dcv) = spow(ac / bc, c.beta);
        let (sv, dsv) = spow(as_ / bs, c.gamma);
        let dc_dv = 2.0 * sy * dsx / bc - ac / (bc * bc);
        let ds_dv = -as_ * sy * dsx / (bs * bs);
        (cv * sv, dcv * dc_dv * sv + cv * dsv * ds_dv, cv * dsv / bs)
    };
    match kind {
        Component::Luminance => (l, [dl, 0.0, 0.0]),
        Component::ContrastStructure => (k, [0.0, dk_dv, dk_dc]),
        Component::Full => (l * k, [dl * k, l * dk_dv, l * dk_dc]),
    }
}

/// Spatial mean of one SSIM component map, and optionally its gradient w.r.t. `x`.
pub(crate) fn mean_map(
    x: &[f64],
    y: &[f64],
    shape: Shape,
    cfg: &SsimConfig,
    kind: Component,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let taps = gaussian_taps(cfg.window, cfg.sigma);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (mx, os) = blur(x, shape, &taps);
    let (my, _) = blur(y, shape, &taps);
    let (exx, _) = blur(&sq(x, x), shape, &taps);
    let (eyy, _) = blur(&sq(y, y), shape, &taps);
    let (exy, _) = blur(&sq(x, y), shape, &taps);
    let consts = Consts { c1: cfg.c1, c2: cfg.c2, alpha: cfg.alpha, beta: cfg.beta, gamma: cfg.gamma };
    let p = mx.len();
    let mut total = 0.0;
    let mut partials = want_grad.then(|| (vec![0.0; p], vec![0.0; p], vec![0.0; p]));
    for i in 0..p {
        let vx = exx[i] - mx[i] * mx[i];
        let vy = eyy[i] - my[i] * my[i];
        let cxy = exy[i] - mx[i] * my[i];
        let (v, [d_mu, d_v, d_c]) = local(&consts, kind, mx[i], my[i], vx, vy, cxy);
        total += v;
        if let Some((g_mu, g_xx, g_xy)) = partials.as_mut() {
            // Chain through σx² = E[x²] − μx² and σxy = E[xy] − μx μy.
            g_mu[i] = (d_mu - 2.0 * mx[i] * d_v - my[i] * d_c) / p as f64;
            g_xx[i] = d_v / p as f64;
            g_xy[i] = d_c / p as f64;
        }
    }
    let grad = partials.map(|(g_mu, g_xx, g_xy)| {
        let a = blur_adjoint(&g_mu, os, &taps);
        let b = blur_adjoint(&g_xx, os, &taps);
        let c = blur_adjoint(&g_xy, os, &taps);
        (0..x.len()).map(|i| a[i] + 2.0 * x[i] * b[i] + y[i] * c[i]).collect()
    });
    (total / p as f64, grad)
}

fn check_pair(x: &Volume, y: &Volume) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch { expected: y.shape(), found: x.shape() });
    }
    Ok(())
}

fn check_window(window: usize, shape: Shape) -> Result<()> {
    if shape.iter().any(|&d| d < window) {
        return Err(Error::WindowTooLarge { window, shape });
    }
    Ok(())
}

/// Mean SSIM of estimate `x` against reference `y`.
pub fn ssim(x: &Volume, y: &Volume, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_with_grad(x, y, cfg, false)?.0)
}

/// SSIM and, when requested, its gradient w.r.t. `x`.
pub fn ssim_with_grad(x: &Volume, y: &Volume, cfg: &SsimConfig, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    cfg.validate()?;
    check_pair(x, y)?;
    check_window(cfg.window, x.shape())?;
    Ok(mean_map(&x.to_f64(), &y.to_f64(), x.shape(), cfg, Component::Full, want_grad))
}

/// Factor-2 average pooling; a trailing odd voxel along an axis is dropped.
pub(crate) fn avg_pool2(v: &[f64], shape: Shape) -> (Vec<f64>, Shape) {
    let out = shape.map(|d| d / 2);
    let (si, so) = (strides(shape), strides(out));
    let mut data = vec![0.0; out.iter().product()];
    for i in 0..out[0] {
        for j in 0..out[1] {
            for k in 0..out[2] {
                let mut s = 0.0;
                for (a, b, c) in (0..8).map(|o| (o >> 2, (o >> 1) & 1, o & 1)) {
                    s += v[(2 * i + a) * si[0] + (2 * j + b) * si[1] + 2 * k + c];
                }
                data[i * so[0] + j * so[1] + k] = s / 8.0;
            }
        }
    }
    (data, out)
}

fn avg_pool2_adjoint(g: &[f64], out: Shape, shape: Shape) -> Vec<f64> {
    let (si, so) = (strides(shape), strides(out));
    let mut v = vec![0.0; shape.iter().product()];
    for i in 0..out[0] {
        for j in 0..out[1] {
            for k in 0..out[2] {
                let gv = g[i * so[0] + j * so[1] + k] / 8.0;
                for (a, b, c) in (0..8).map(|o| (o >> 2, (o >> 1) & 1, o & 1)) {
                    v[(2 * i + a) * si[0] + (2 * j + b) * si[1] + 2 * k + c] += gv;
                }
            }
        }
    }
    v
}

/// Largest odd window not exceeding `window` that fits `shape`.
pub(crate) fn fitted_window(window: usize, shape: Shape) -> usize {
    let m = shape.iter().copied().min().unwrap_or(1).max(1);
    let w = window.min(m);
    if w % 2 == 0 {
        w - 1
    } else {
        w
    }
}

/// Shapes of every scale, finest first.
pub fn scale_shapes(shape: Shape, scales: usize) -> Result<Vec<Shape>> {
    let mut shapes = vec![shape];
    for _ in 1..scales {
        let next = shapes.last().unwrap().map(|d| d / 2);
        if next.contains(&0) {
            return Err(Error::InsufficientResolution { shape, scales });
        }
        shapes.push(next);
    }
    Ok(shapes)
}

/// Multi-scale SSIM of estimate `x` against reference `y`.
pub fn ms_ssim(x: &Volume, y: &Volume, cfg: &MsSsimConfig) -> Result<f64> {
    Ok(ms_ssim_with_grad(x, y, cfg, false)?.0)
}

/// `1 − ms_ssim`.
pub fn ms_ssim_loss(x: &Volume, y: &Volume, cfg: &MsSsimConfig) -> Result<f64> {
    Ok(1.0 - ms_ssim(x, y, cfg)?)
}

/// MS-SSIM and, when requested, its gradient w.r.t. `x`.
///
/// The standard combination is `Π_s relu(m_s)^(w_s / Σw)`, where `m_s` is the mean
/// contrast·structure map at every scale but the coarsest, which uses the full SSIM map.
/// With `literal` set it is `w_S · mean(l_S) · Π_s relu(mean(cs_s))^(w_s)` over all scales.
pub fn ms_ssim_with_grad(
    x: &Volume,
    y: &Volume,
    cfg: &MsSsimConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    cfg.validate()?;
    check_pair(x, y)?;
    let shapes = scale_shapes(x.shape(), cfg.scales)?;
    let mut xs = vec![x.to_f64()];
    let mut ys = vec![y.to_f64()];
    for s in 1..cfg.scales {
        xs.push(avg_pool2(&xs[s - 1], shapes[s - 1]).0);
        ys.push(avg_pool2(&ys[s - 1], shapes[s - 1]).0);
    }
    // (factor value, exponent, scale, gradient of value w.r.t. x at that scale)
    let mut factors: Vec<(f64, f64, usize, Option<Vec<f64>>)> = Vec::new();
    let total_w: f64 = cfg.weights.iter().sum();
    let last = cfg.scales - 1;
    for s in 0..cfg.scales {
        let sc = cfg.scale_config(fitted_window(cfg.window, shapes[s]));
        let cs_kind = if !cfg.literal && s == last { Component::Full } else { Component::ContrastStructure };
        let (m, g) = mean_map(&xs[s], &ys[s], shapes[s], &sc, cs_kind, want_grad);
        let w = if cfg.literal { cfg.weights[s] } else { cfg.weights[s] / total_w };
        factors.push((m.max(0.0), w, s, g.filter(|_| m > 0.0)));
        if cfg.literal && s == last {
            let (l, g) = mean_map(&xs[s], &ys[s], shapes[s], &sc, Component::Luminance, want_grad);
            factors.push((l, 1.0, s, g));
        }
    }
    let lead = if cfg.literal { cfg.weights[last] } else { 1.0 };
    let powered: Vec<f64> = factors.iter().map(|(v, e, _, _)| if *e == 1.0 { *v } else { v.powf(*e) }).collect();
    let score = lead * powered.iter().product::<f64>();
    if !want_grad {
        return Ok((score, None));
    }
    let mut grads: Vec<Vec<f64>> = xs.iter().map(|v| vec![0.0; v.len()]).collect();
    for (i, (v, e, s, g)) in factors.iter().enumerate() {
        let Some(g) = g else { continue };
        let others: f64 = powered.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, p)| p).product();
        let d = if *e == 1.0 { 1.0 } else { e * v.powf(e - 1.0) };
        let coef = lead * others * d;
        if coef.is_finite() {
            grads[*s].iter_mut().zip(g).for_each(|(a, b)| *a += coef * b);
        }
    }
    for s in (1..cfg.scales).rev() {
        let up = avg_pool2_adjoint(&grads[s], shapes[s], shapes[s - 1]);
        grads[s - 1].iter_mut().zip(up).for_each(|(a, b)| *a += b);
    }
    Ok((score, Some(grads.swap_remove(0))))
}
