use rand::Rng;

use super::{join, BatchNorm3d, BatchNormCache, Conv3d, Mode, Module, Real, Slot, SlotMut, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// Leaky rectifier with the given negative slope; slope 0 is a plain ReLU.
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub const RELU: Activation = Activation::LeakyRelu(0.0);

    pub fn apply<T: Real>(self, x: &mut [T]) {
        match self {
            Activation::LeakyRelu(slope) => {
                let s = T::lit(slope);
                x.iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v *= s
                    }
                });
            }
            Activation::Sigmoid => x.iter_mut().for_each(|v| *v = sigmoid(*v)),
        }
    }

    /// Multiplies `grad` in place by the derivative, expressed through the activation output `y`.
    pub fn backward<T: Real>(self, y: &[T], grad: &mut [T]) {
        match self {
            Activation::LeakyRelu(slope) => {
                let s = T::lit(slope);
                for (g, &v) in grad.iter_mut().zip(y) {
                    if v <= T::zero() {
                        *g *= s;
                    }
                }
            }
            Activation::Sigmoid => {
                for (g, &v) in grad.iter_mut().zip(y) {
                    *g = *g * v * (T::one() - v);
                }
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Convolution → batch norm → activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnAct<T> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm3d<T>,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub struct ConvBnActCache<T> {
    input: Tensor<T>,
    bn: BatchNormCache<T>,
    output: Tensor<T>,
}

impl<T: Real> ConvBnAct<T> {
    pub fn new(conv: Conv3d<T>, act: Activation) -> Self {
        let bn = BatchNorm3d::new(conv.cout);
        Self { conv, bn, act }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.cout
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<ConvBnActCache<T>>) {
        let z = self.conv.forward(x);
        match mode {
            Mode::Eval => {
                let mut y = self.bn.forward_eval(&z);
                self.act.apply(&mut y.data);
                (y, None)
            }
            Mode::Train => {
                let (mut y, bn) = self.bn.forward_train(&z);
                self.act.apply(&mut y.data);
                let cache = ConvBnActCache { input: x.clone(), bn, output: y.clone() };
                (y, Some(cache))
            }
        }
    }

    pub fn backward(&mut self, cache: ConvBnActCache<T>, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = grad.clone();
        self.act.backward(&cache.output.data, &mut g.data);
        let gz = self.bn.backward(&cache.bn, &g);
        self.conv.backward(&cache.input, &gz)
    }
}

impl<T: Real> Module<T> for ConvBnAct<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        self.conv.visit(&join(prefix, "conv"), out);
        self.bn.visit(&join(prefix, "bn"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, SlotMut<'a, T>)>) {
        self.conv.visit_mut(&join(prefix, "conv"), out);
        self.bn.visit_mut(&join(prefix, "bn"), out);
    }
}

/// Post-activation residual block: `relu(bn(conv(relu(bn(conv(x))))) + x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub first: ConvBnAct<T>,
    pub conv: Conv3d<T>,
    pub bn: BatchNorm3d<T>,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache<T> {
    first: ConvBnActCache<T>,
    mid: Tensor<T>,
    bn: BatchNormCache<T>,
    output: Tensor<T>,
}

impl<T: Real> ResBlock<T> {
    pub fn new(channels: usize, init_std: f64, rng: &mut impl Rng) -> Self {
        let first = ConvBnAct::new(Conv3d::same(channels, channels, 3, init_std, rng), Activation::RELU);
        let conv = Conv3d::same(channels, channels, 3, init_std, rng);
        Self { first, conv, bn: BatchNorm3d::new(channels) }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<ResBlockCache<T>>) {
        let (mid, first) = self.first.forward(x, mode);
        let z = self.conv.forward(&mid);
        let (mut y, bn) = match mode {
            Mode::Eval => (self.bn.forward_eval(&z), None),
            Mode::Train => {
                let (y, c) = self.bn.forward_train(&z);
                (y, Some(c))
            }
        };
        y.add_assign(x);
        Activation::RELU.apply(&mut y.data);
        let cache = match (first, bn) {
            (Some(first), Some(bn)) => Some(ResBlockCache { first, mid, bn, output: y.clone() }),
            _ => None,
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: ResBlockCache<T>, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = grad.clone();
        Activation::RELU.backward(&cache.output.data, &mut g.data);
        let gz = self.bn.backward(&cache.bn, &g);
        let gmid = self.conv.backward(&cache.mid, &gz);
        let mut gx = self.first.backward(cache.first, &gmid);
        gx.add_assign(&g);
        gx
    }
}

impl<T: Real> Module<T> for ResBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        self.first.visit(&join(prefix, "a"), out);
        self.conv.visit(&join(prefix, "b/conv"), out);
        self.bn.visit(&join(prefix, "b/bn"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, SlotMut<'a, T>)>) {
        self.first.visit_mut(&join(prefix, "a"), out);
        self.conv.visit_mut(&join(prefix, "b/conv"), out);
        self.bn.visit_mut(&join(prefix, "b/bn"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn objective(block: &ResBlock<f64>, x: &Tensor<f64>, w: &[f64]) -> f64 {
        block.forward(x, Mode::Train).0.data.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn residual_block_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut block = ResBlock::<f64>::new(2, 0.4, &mut rng);
        let x = Tensor::from_vec(2, 2, [3, 3, 3], (0..108).map(|_| rng.random::<f64>() - 0.3).collect());
        let w: Vec<f64> = (0..108).map(|_| rng.random::<f64>() - 0.5).collect();
        let (y, cache) = block.forward(&x, Mode::Train);
        let g = Tensor::from_vec(y.n, y.c, y.dims, w.clone());
        let reference = block.clone();
        let gx = block.backward(cache.unwrap(), &g);
        let h = 1e-6;
        for idx in [0, 13, 54, 107] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (objective(&reference, &xp, &w) - objective(&reference, &xm, &w)) / (2.0 * h);
            assert!((fd - gx.data[idx]).abs() < 1e-5 * fd.abs().max(1.0), "{idx}: {fd} vs {}", gx.data[idx]);
        }
        for idx in [0, 20, 71] {
            let mut p = reference.clone();
            p.conv.weight.value[idx] += h;
            let mut m = reference.clone();
            m.conv.weight.value[idx] -= h;
            let fd = (objective(&p, &x, &w) - objective(&m, &x, &w)) / (2.0 * h);
            let an = block.conv.weight.grad[idx];
            assert!((fd - an).abs() < 1e-5 * fd.abs().max(1.0), "{idx}: {fd} vs {an}");
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }
}
