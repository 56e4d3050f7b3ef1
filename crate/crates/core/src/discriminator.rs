//! Real/synthetic critic over whole volumes.
//!
//! Six convolutions: kernels 4³ with stride 2 for the first four layers, 2³ with stride 1
//! (padded to keep size) for the last two. Batch norm and leaky activation follow layers
//! 1–5; the single-channel output is mean-pooled over space and squashed by a sigmoid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::ModelConfig;
use crate::nn::{join, sigmoid, Activation, Conv3d, ConvBnAct, ConvBnActCache, Mode, Module, Real, Slot, SlotMut, Tensor};
use crate::volume::{Shape, Volume};

const KERNELS: [usize; 6] = [4, 4, 4, 4, 2, 2];
const STRIDES: [usize; 6] = [2, 2, 2, 2, 1, 1];
const PADS: [(usize, usize); 6] = [(1, 1), (1, 1), (1, 1), (1, 1), (0, 1), (0, 1)];

/// Spatial shapes after each of the six layers, or an error if the input is too small.
pub fn output_chain(input: Shape) -> Result<Vec<Shape>> {
    let mut dims = input;
    let mut chain = Vec::with_capacity(6);
    for layer in 0..6 {
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = dims[axis] + PADS[layer].0 + PADS[layer].1;
            if padded < KERNELS[layer] {
                return Err(Error::InvalidShape(format!(
                    "discriminator cannot reduce {input:?}: layer {} sees {dims:?}",
                    layer + 1
                )));
            }
            out[axis] = (padded - KERNELS[layer]) / STRIDES[layer] + 1;
        }
        dims = out;
        chain.push(dims);
    }
    Ok(chain)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    resolution: Shape,
    pub layers: Vec<ConvBnAct<T>>,
    pub last: Conv3d<T>,
}

#[derive(Debug)]
pub struct DiscriminatorCache<T> {
    layers: Vec<ConvBnActCache<T>>,
    last_input: Tensor<T>,
    last_dims: Shape,
    probs: Vec<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        output_chain(cfg.resolution)?;
        // Distinct stream from the generator's initialization.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d15c);
        let w = cfg.disc_width;
        let filters = [w, 2 * w, 4 * w, 8 * w, w, 1];
        let mut cin = 1;
        let mut layers = Vec::with_capacity(5);
        for layer in 0..5 {
            let conv = Conv3d::new(cin, filters[layer], KERNELS[layer], STRIDES[layer], PADS[layer], cfg.init_std, &mut rng);
            layers.push(ConvBnAct::new(conv, Activation::LeakyRelu(cfg.leaky_slope)));
            cin = filters[layer];
        }
        let last = Conv3d::new(cin, 1, KERNELS[5], STRIDES[5], PADS[5], cfg.init_std, &mut rng);
        Ok(Self { resolution: cfg.resolution, layers, last })
    }

    /// Probability of being real for every sample of the batch.
    pub fn forward_batch(&self, y: &Tensor<T>, mode: Mode) -> (Vec<T>, Option<DiscriminatorCache<T>>) {
        assert_eq!(y.dims, self.resolution, "discriminator input resolution");
        let mut caches = Vec::new();
        let mut h = y.clone();
        for layer in &self.layers {
            let (out, c) = layer.forward(&h, mode);
            caches.extend(c);
            h = out;
        }
        let z = self.last.forward(&h);
        let s = T::lit(z.spatial() as f64);
        let probs: Vec<T> = (0..z.n).map(|i| sigmoid(z.sample(i).iter().copied().sum::<T>() / s)).collect();
        let cache = (mode == Mode::Train).then(|| DiscriminatorCache {
            layers: caches,
            last_input: h,
            last_dims: z.dims,
            probs: probs.clone(),
        });
        (probs, cache)
    }

    /// Accumulates parameter gradients for `d loss / d prob` and returns the input gradient.
    pub fn backward(&mut self, cache: DiscriminatorCache<T>, grad_probs: &[T]) -> Tensor<T> {
        let n = grad_probs.len();
        let s = crate::volume::voxel_count(cache.last_dims);
        let mut gz = Tensor::zeros(n, 1, cache.last_dims);
        for (i, (&gp, &p)) in grad_probs.iter().zip(&cache.probs).enumerate() {
            let g_logit = gp * p * (T::one() - p) / T::lit(s as f64);
            gz.sample_mut(i).iter_mut().for_each(|v| *v = g_logit);
        }
        let mut g = self.last.backward(&cache.last_input, &gz);
        for (layer, c) in self.layers.iter_mut().zip(cache.layers).rev() {
            g = layer.backward(c, &g);
        }
        g
    }

    /// Inference-mode probability for a single volume.
    pub fn forward(&self, y: &Volume) -> Result<f64> {
        if y.shape() != self.resolution {
            return Err(Error::ResolutionMismatch { expected: self.resolution, found: y.shape() });
        }
        Ok(self.forward_batch(&Tensor::from_volumes([y]), Mode::Eval).0[0].f64())
    }
}

impl<T: Real> Module<T> for Discriminator<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("conv{}", i + 1)), out);
        }
        self.last.visit(&join(prefix, "conv6"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, SlotMut<'a, T>)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("conv{}", i + 1)), out);
        }
        self.last.visit_mut(&join(prefix, "conv6"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn chain_reaches_single_value_at_supported_sizes() {
        assert_eq!(output_chain([64; 3]).unwrap()[3], [4; 3]);
        assert_eq!(output_chain([32; 3]).unwrap()[5], [2; 3]);
        assert_eq!(output_chain([16; 3]).unwrap()[5], [1; 3]);
        assert!(output_chain([8; 3]).is_err());
    }

    #[test]
    fn probability_in_open_unit_interval() {
        let cfg = ModelConfig { resolution: [32; 3], disc_width: 2, ..Default::default() };
        let d = Discriminator::<f32>::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = Volume::from_fn([32; 3], |_, _, _| rng.random());
        let p = d.forward(&y).unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(p, d.forward(&y).unwrap());
        assert!(d.forward(&Volume::zeros([16; 3])).is_err());
    }
}
