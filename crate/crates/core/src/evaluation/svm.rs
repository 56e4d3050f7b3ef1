//! Soft-margin kernel SVM with an RBF kernel, trained by SMO with second-order working-set
//! selection.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub c: f64,
    /// RBF coefficient in `exp(−γ‖a − b‖²)`; `None` selects the median heuristic.
    pub gamma: Option<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { c: 1.0, gamma: None, tolerance: 1e-3, max_iterations: 1_000_000 }
    }
}

/// Fitted classifier with its feature standardization. Positive decision values mean AD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub gamma: f64,
    pub support: Vec<Vec<f64>>,
    /// `α_i y_i` of every support vector.
    pub coef: Vec<f64>,
    pub bias: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `γ = 1 / (2 m²)` for the median pairwise distance `m`.
pub fn median_heuristic_gamma(x: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(x.len() * x.len().saturating_sub(1) / 2);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            d.push(sq_dist(&x[i], &x[j]).sqrt());
        }
    }
    let m = if d.is_empty() { 0.0 } else { median(d) };
    if m > 0.0 {
        1.0 / (2.0 * m * m)
    } else {
        1.0 / x.first().map_or(1, Vec::len).max(1) as f64
    }
}

/// Per-feature mean and standard deviation (1 where a feature is constant).
pub fn standardization(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let dim = x[0].len();
    let mean: Vec<f64> = (0..dim).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scale = (0..dim)
        .map(|j| {
            let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

impl SvmModel {
    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn decision(&self, features: &[f64]) -> f64 {
        let z = self.standardize(features);
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(s, c)| c * (-self.gamma * sq_dist(s, &z)).exp())
            .sum::<f64>()
            + self.bias
    }

    /// Hard labels and decision scores.
    pub fn predict(&self, features: &[Vec<f64>]) -> (Vec<Label>, Vec<f64>) {
        let scores: Vec<f64> = features.iter().map(|f| self.decision(f)).collect();
        let labels = scores.iter().map(|&s| if s > 0.0 { Label::Ad } else { Label::Cn }).collect();
        (labels, scores)
    }

    /// Probability of the CN class, read as the logistic of the negated decision value.
    pub fn p_normal(&self, features: &[f64]) -> f64 {
        1.0 / (1.0 + self.decision(features).exp())
    }
}

/// Fits the classifier on raw features; standardization statistics come from `features`.
pub fn fit_classifier(features: &[Vec<f64>], labels: &[Label], cfg: &SvmConfig) -> Result<SvmModel> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Classification("features and labels must be nonempty and of equal length".into()));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim || f.iter().any(|v| !v.is_finite())) {
        return Err(Error::Classification("feature vectors must be finite and of equal length".into()));
    }
    let n_pos = labels.iter().filter(|l| l.is_positive()).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::Classification("training set contains a single label".into()));
    }
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(cfg.c > 0.0) {
        return Err(Error::InvalidConfig(format!("SVM C must be positive, got {}", cfg.c)));
    }
    let (mean, scale) = standardization(features);
    let z: Vec<Vec<f64>> =
        features.iter().map(|f| f.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect()).collect();
    let gamma = cfg.gamma.unwrap_or_else(|| median_heuristic_gamma(&z));
    let n = z.len();
    let y: Vec<f64> = labels.iter().map(|l| if l.is_positive() { 1.0 } else { -1.0 }).collect();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = (-gamma * sq_dist(&z[i], &z[j])).exp();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let q = |i: usize, j: usize| y[i] * y[j] * k[i * n + j];
    let c = cfg.c;
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    for _ in 0..cfg.max_iterations {
        let mut g_max = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            let in_up = if y[t] > 0.0 { !upper(alpha[t]) } else { !lower(alpha[t]) };
            if in_up && -y[t] * grad[t] >= g_max {
                g_max = -y[t] * grad[t];
                i_sel = Some(t);
            }
        }
        let Some(i) = i_sel else { break };
        let mut g_max2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        for t in 0..n {
            let in_low = if y[t] > 0.0 { !lower(alpha[t]) } else { !upper(alpha[t]) };
            if !in_low {
                continue;
            }
            let v = y[t] * grad[t];
            g_max2 = g_max2.max(v);
            let diff = g_max + v;
            if diff > 0.0 {
                let quad = k[i * n + i] + k[t * n + t] - 2.0 * k[i * n + t];
                let obj = -(diff * diff) / if quad > 0.0 { quad } else { TAU };
                if obj <= best {
                    best = obj;
                    j_sel = Some(t);
                }
            }
        }
        let Some(j) = j_sel else { break };
        if g_max + g_max2 < cfg.tolerance {
            break;
        }
        let (ai, aj) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (k[i * n + i] + k[j * n + j] + 2.0 * q(i, j)).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (k[i * n + i] + k[j * n + j] - 2.0 * q(i, j)).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for (t, g) in grad.iter_mut().enumerate() {
            *g += q(i, t) * di + q(j, t) * dj;
        }
    }
    // Offset from free support vectors, or the midpoint of the feasible interval.
    let (mut ub, mut lb, mut sum_free, mut n_free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { (ub + lb) / 2.0 };
    let (support, coef) = (0..n).filter(|&t| alpha[t] > 0.0).map(|t| (z[t].clone(), alpha[t] * y[t])).unzip();
    Ok(SvmModel { mean, scale, gamma, support, coef, bias: -rho })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_points_are_separated() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let labels = [Label::Cn, Label::Ad];
        let m = fit_classifier(&x, &labels, &SvmConfig::default()).unwrap();
        assert_eq!(m.predict(&x).0, labels);
        assert!(m.p_normal(&x[0]) > 0.5 && m.p_normal(&x[1]) < 0.5);
    }

    #[test]
    fn single_label_is_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(fit_classifier(&x, &[Label::Cn, Label::Cn], &SvmConfig::default()).is_err());
    }

    #[test]
    fn dual_solution_is_feasible_and_fits_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let ad = i % 2 == 0;
            let c = if ad { 1.5 } else { -1.5 };
            x.push(vec![c + rng.random::<f64>() - 0.5, rng.random::<f64>() * 2.0, c * 0.5 + rng.random::<f64>()]);
            labels.push(if ad { Label::Ad } else { Label::Cn });
        }
        let cfg = SvmConfig::default();
        let m = fit_classifier(&x, &labels, &cfg).unwrap();
        let sum: f64 = m.coef.iter().sum();
        assert!(sum.abs() < 1e-9, "Σ α y = {sum}");
        assert!(m.coef.iter().all(|a| a.abs() <= cfg.c + 1e-12));
        let acc = m.predict(&x).0.iter().zip(&labels).filter(|(a, b)| a == b).count();
        assert_eq!(acc, 60);
        assert_eq!(m, fit_classifier(&x, &labels, &cfg).unwrap());
    }

    #[test]
    fn median_heuristic_on_a_line() {
        // Pairwise distances 1, 2, 1 → median 1.
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!((median_heuristic_gamma(&x) - 0.5).abs() < 1e-12);
    }
}
