//! Independent reference implementations shared by the integration and acceptance tests.
//!
//! Everything here is written as direct loops over the definitions, without reusing any
//! of the library's filtering, pooling or bookkeeping code.
#![allow(dead_code)]

use glagan::atlas::AtlasLabelMap;
use glagan::{Label, Shape, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_volume(shape: Shape, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_fn(shape, |_, _, _| rng.random())
}

/// `base` plus uniform noise of amplitude `amp`, clamped to [0, 1].
pub fn noisy_copy(base: &Volume, amp: f32, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = base.data().iter().map(|&v| (v + amp * (rng.random::<f32>() * 2.0 - 1.0)).clamp(0.0, 1.0)).collect();
    Volume::new(base.shape(), data).unwrap()
}

fn at(v: &[f64], s: Shape, i: usize, j: usize, k: usize) -> f64 {
    v[(i * s[1] + j) * s[2] + k]
}

#[derive(Clone, Copy)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl SsimParams {
    pub fn new(window: usize) -> Self {
        Self { window, sigma: 1.5, c1: 1e-4, c2: 9e-4, alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

fn gauss3(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window / 2) as f64;
    let mut w = Vec::with_capacity(window.pow(3));
    for a in 0..window {
        for b in 0..window {
            for d in 0..window {
                let r2 = (a as f64 - c).powi(2) + (b as f64 - c).powi(2) + (d as f64 - c).powi(2);
                w.push((-r2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

fn signed_pow(u: f64, e: f64) -> f64 {
    u.signum() * u.abs().powf(e)
}

/// Per-window (luminance, contrast, structure) triples over every valid window position.
pub fn ssim_components(x: &[f64], y: &[f64], s: Shape, p: SsimParams) -> Vec<(f64, f64, f64)> {
    let w = p.window;
    let g = gauss3(w, p.sigma);
    let c3 = p.c2 / 2.0;
    let mut out = Vec::new();
    for i in 0..=s[0] - w {
        for j in 0..=s[1] - w {
            for k in 0..=s[2] - w {
                let mut mx = 0.0;
                let mut my = 0.0;
                for a in 0..w {
                    for b in 0..w {
                        for d in 0..w {
                            let wt = g[(a * w + b) * w + d];
                            mx += wt * at(x, s, i + a, j + b, k + d);
                            my += wt * at(y, s, i + a, j + b, k + d);
                        }
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for a in 0..w {
                    for b in 0..w {
                        for d in 0..w {
                            let wt = g[(a * w + b) * w + d];
                            let dx = at(x, s, i + a, j + b, k + d) - mx;
                            let dy = at(y, s, i + a, j + b, k + d) - my;
                            vx += wt * dx * dx;
                            vy += wt * dy * dy;
                            cxy += wt * dx * dy;
                        }
                    }
                }
                let (sx, sy) = (vx.sqrt(), vy.sqrt());
                let l = (2.0 * mx * my + p.c1) / (mx * mx + my * my + p.c1);
                let c = (2.0 * sx * sy + p.c2) / (vx + vy + p.c2);
                let st = (cxy + c3) / (sx * sy + c3);
                out.push((l, c, st));
            }
        }
    }
    out
}

pub fn ssim_oracle(x: &Volume, y: &Volume, p: SsimParams) -> f64 {
    let comps = ssim_components(&x.to_f64(), &y.to_f64(), x.shape(), p);
    let n = comps.len() as f64;
    comps
        .iter()
        .map(|&(l, c, s)| signed_pow(l, p.alpha) * signed_pow(c, p.beta) * signed_pow(s, p.gamma))
        .sum::<f64>()
        / n
}

/// Factor-2 box downsampling, dropping a trailing odd voxel.
pub fn downsample(v: &[f64], s: Shape) -> (Vec<f64>, Shape) {
    let o = [s[0] / 2, s[1] / 2, s[2] / 2];
    let mut out = Vec::with_capacity(o[0] * o[1] * o[2]);
    for i in 0..o[0] {
        for j in 0..o[1] {
            for k in 0..o[2] {
                let mut acc = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        for d in 0..2 {
                            acc += at(v, s, 2 * i + a, 2 * j + b, 2 * k + d);
                        }
                    }
                }
                out.push(acc / 8.0);
            }
        }
    }
    (out, o)
}

/// Three-scale (or `weights.len()`-scale) MS-SSIM: normalized weights, contrast·structure
/// at every scale, luminance only at the coarsest, negative means clamped to zero.
pub fn ms_ssim_oracle(x: &Volume, y: &Volume, window: usize, weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    let (mut xv, mut yv, mut s) = (x.to_f64(), y.to_f64(), x.shape());
    let mut score = 1.0;
    for (scale, &w) in weights.iter().enumerate() {
        if scale > 0 {
            let (nx, ns) = downsample(&xv, s);
            yv = downsample(&yv, s).0;
            xv = nx;
            s = ns;
        }
        let min_axis = *s.iter().min().unwrap();
        let mut win = window.min(min_axis);
        if win % 2 == 0 {
            win -= 1;
        }
        let comps = ssim_components(&xv, &yv, s, SsimParams::new(win));
        let n = comps.len() as f64;
        let last = scale + 1 == weights.len();
        let m = comps.iter().map(|&(l, c, st)| if last { l * c * st } else { c * st }).sum::<f64>() / n;
        score *= m.max(0.0).powf(w / total);
    }
    score
}

pub fn roi_oracle(y: &Volume, y_hat: &Volume, atlas: &AtlasLabelMap) -> f64 {
    let mut total = 0.0;
    let mut regions = 0;
    for r in 1..=atlas.r() as u16 {
        let mut sum = 0.0;
        let mut n = 0;
        for (idx, &l) in atlas.labels().iter().enumerate() {
            if l == r {
                sum += y.data()[idx] as f64 - y_hat.data()[idx] as f64;
                n += 1;
            }
        }
        if n > 0 {
            total += (sum / n as f64).powi(2);
            regions += 1;
        }
    }
    total / regions as f64
}

pub fn l1_oracle(y: &Volume, y_hat: &Volume) -> f64 {
    let mut s = 0.0;
    for (a, b) in y.data().iter().zip(y_hat.data()) {
        s += (*a as f64 - *b as f64).abs();
    }
    s / y.len() as f64
}

pub fn psnr_oracle(y: &Volume, y_hat: &Volume, max_val: f64) -> f64 {
    let mut mse = 0.0;
    for (a, b) in y.data().iter().zip(y_hat.data()) {
        mse += (*a as f64 - *b as f64).powi(2);
    }
    mse /= y.len() as f64;
    10.0 * (max_val * max_val / mse).log10()
}

/// Random atlas with `r` regions; every region gets at least one voxel.
pub fn random_atlas(shape: Shape, r: usize, seed: u64) -> AtlasLabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product::<usize>();
    let mut labels: Vec<u16> = (0..n).map(|_| rng.random_range(0..=r as u16)).collect();
    for l in 1..=r {
        labels[l - 1] = l as u16;
    }
    AtlasLabelMap::new(labels, shape, r).unwrap()
}

/// Distinct random voxel indices.
pub fn coordinates(n_voxels: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    while picked.len() < count {
        let i = rng.random_range(0..n_voxels);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}

/// Central difference of `f` at voxel `idx`, using the perturbation actually representable
/// in `f32`.
pub fn central_difference(v: &Volume, idx: usize, h: f32, f: &dyn Fn(&Volume) -> f64) -> f64 {
    let mut plus = v.data().to_vec();
    let mut minus = v.data().to_vec();
    plus[idx] += h;
    minus[idx] -= h;
    let step = plus[idx] as f64 - minus[idx] as f64;
    let vp = Volume::new(v.shape(), plus).unwrap();
    let vm = Volume::new(v.shape(), minus).unwrap();
    (f(&vp) - f(&vm)) / step
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Largest relative error over `coords` between `grad` and central differences of `f`.
pub fn max_gradient_error(v: &Volume, grad: &[f64], coords: &[usize], h: f32, f: &dyn Fn(&Volume) -> f64) -> f64 {
    coords
        .iter()
        .map(|&i| relative_error(grad[i], central_difference(v, i, h, f)))
        .fold(0.0, f64::max)
}

/// Accuracy, sensitivity, specificity, F1 and MCC straight from the confusion counts.
pub fn metric_oracle(tp: usize, fp: usize, tn: usize, fn_: usize) -> [f64; 5] {
    let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let prec = div(tp, tp + fp);
    let rec = div(tp, tp + fn_);
    [
        (tp + tn) / (tp + tn + fp + fn_),
        rec,
        div(tn, tn + fp),
        if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) },
        div(tp * tn - fp * fn_, ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt()),
    ]
}

/// AUC as the fraction of (AD, CN) pairs ranked correctly, ties counting half.
pub fn pairwise_auc(scores: &[f64], truth: &[Label]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if truth[i] == Label::Ad && truth[j] == Label::Cn {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}
