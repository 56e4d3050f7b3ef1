use super::{join, Module, Param, Real, Slot, SlotMut, Tensor};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over batch and spatial axes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm3d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var_unbiased: Vec<T>,
}

impl<T: Real> BatchNorm3d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::new(vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Normalizes with batch statistics and returns the cache needed by [`BatchNorm3d::backward`].
    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, BatchNormCache<T>) {
        let c = self.channels();
        assert_eq!(x.c, c, "batch-norm channels");
        let s = x.spatial();
        let m = (x.n * s) as f64;
        let mut xhat = Tensor::zeros(x.n, c, x.dims);
        let mut y = Tensor::zeros(x.n, c, x.dims);
        let mut inv_std = Vec::with_capacity(c);
        let mut batch_mean = Vec::with_capacity(c);
        let mut batch_var_unbiased = Vec::with_capacity(c);
        for ch in 0..c {
            let mut sum = 0.0;
            for i in 0..x.n {
                sum += x.channel(i, ch).iter().map(|v| v.f64()).sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0;
            for i in 0..x.n {
                sq += x.channel(i, ch).iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>();
            }
            let var = sq / m;
            let inv = 1.0 / (var + EPS).sqrt();
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            let (mean_t, inv_t) = (T::lit(mean), T::lit(inv));
            for i in 0..x.n {
                let start = (i * c + ch) * s;
                for idx in start..start + s {
                    let h = (x.data[idx] - mean_t) * inv_t;
                    xhat.data[idx] = h;
                    y.data[idx] = g * h + b;
                }
            }
            inv_std.push(inv_t);
            batch_mean.push(mean_t);
            batch_var_unbiased.push(T::lit(if m > 1.0 { sq / (m - 1.0) } else { var }));
        }
        (y, BatchNormCache { xhat, inv_std, batch_mean, batch_var_unbiased })
    }

    /// Normalizes with the frozen running statistics.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let c = self.channels();
        let s = x.spatial();
        let mut y = x.clone();
        for ch in 0..c {
            let inv = T::one() / (self.running_var[ch] + T::lit(EPS)).sqrt();
            let scale = self.gamma.value[ch] * inv;
            let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
            for i in 0..x.n {
                let start = (i * c + ch) * s;
                y.data[start..start + s].iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    /// Accumulates `gamma`/`beta` gradients, folds the batch statistics into the running
    /// averages and returns the input gradient.
    pub fn backward(&mut self, cache: &BatchNormCache<T>, grad: &Tensor<T>) -> Tensor<T> {
        let c = self.channels();
        let s = grad.spatial();
        let m = T::lit((grad.n * s) as f64);
        let mut gx = Tensor::zeros(grad.n, c, grad.dims);
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for i in 0..grad.n {
                let start = (i * c + ch) * s;
                for idx in start..start + s {
                    sum_g += grad.data[idx];
                    sum_gx += grad.data[idx] * cache.xhat.data[idx];
                }
            }
            self.beta.grad[ch] += sum_g;
            self.gamma.grad[ch] += sum_gx;
            let g = self.gamma.value[ch];
            let k = g * cache.inv_std[ch] / m;
            for i in 0..grad.n {
                let start = (i * c + ch) * s;
                for idx in start..start + s {
                    gx.data[idx] = k * (m * grad.data[idx] - sum_g - cache.xhat.data[idx] * sum_gx);
                }
            }
            let mom = T::lit(MOMENTUM);
            self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * cache.batch_mean[ch];
            self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * cache.batch_var_unbiased[ch];
        }
        gx
    }
}

impl<T: Real> Module<T> for BatchNorm3d<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        out.push((join(prefix, "gamma"), Slot::Param(&self.gamma)));
        out.push((join(prefix, "beta"), Slot::Param(&self.beta)));
        out.push((join(prefix, "running_mean"), Slot::Buffer(&self.running_mean)));
        out.push((join(prefix, "running_var"), Slot::Buffer(&self.running_var)));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, SlotMut<'a, T>)>) {
        out.push((join(prefix, "gamma"), SlotMut::Param(&mut self.gamma)));
        out.push((join(prefix, "beta"), SlotMut::Param(&mut self.beta)));
        out.push((join(prefix, "running_mean"), SlotMut::Buffer(&mut self.running_mean)));
        out.push((join(prefix, "running_var"), SlotMut::Buffer(&mut self.running_var)));
    }
}
