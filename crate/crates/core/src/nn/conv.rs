use rand::Rng;

use super::{direct, gemm, join, Mat, Module, Param, Real, Slot, SlotMut, Tensor};
use crate::volume::Shape;

/// Upper bound on im2col buffer elements; larger layers are processed in slabs of output planes.
const COL_BUDGET: usize = 1 << 18;

/// Cubic-kernel 3D convolution with per-axis padding `(before, after)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: (usize, usize),
    /// `[cout][cin][k][k][k]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv3d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: (usize, usize),
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan = cin * kernel.pow(3);
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight: Param::gaussian(cout * fan, init_std, rng),
            bias: Param::new(vec![T::zero(); cout]),
        }
    }

    /// Stride-1 convolution that preserves spatial size (odd kernel).
    pub fn same(cin: usize, cout: usize, kernel: usize, init_std: f64, rng: &mut impl Rng) -> Self {
        let p = (kernel - 1) / 2;
        Self::new(cin, cout, kernel, 1, (p, kernel - 1 - p), init_std, rng)
    }

    /// Output spatial shape, or `None` when the input is smaller than the kernel.
    pub fn out_dims(&self, dims: Shape) -> Option<Shape> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = dims[axis] + self.pad.0 + self.pad.1;
            if padded < self.kernel {
                return None;
            }
            out[axis] = (padded - self.kernel) / self.stride + 1;
        }
        Some(out)
    }

    /// Stride-1 size-preserving layers use the direct kernels instead of im2col.
    fn is_direct(&self) -> bool {
        let p = self.kernel / 2;
        self.stride == 1 && self.kernel % 2 == 1 && self.pad == (p, p) && self.kernel <= 7
    }

    fn k_len(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    fn planes_per_slab(&self, out: Shape) -> usize {
        (COL_BUDGET / (self.k_len() * out[1] * out[2]).max(1)).clamp(1, out[0])
    }

    /// Fills `col[K, planes * oh * ow]` for output planes `z0 .. z0 + planes` of one sample.
    fn im2col(&self, x: &[T], dims: Shape, out: Shape, z0: usize, planes: usize, col: &mut [T]) {
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad.0 as isize);
        let cols = planes * out[1] * out[2];
        let vox = dims[0] * dims[1] * dims[2];
        for ci in 0..self.cin {
            let xc = &x[ci * vox..(ci + 1) * vox];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((ci * k + kd) * k + kh) * k + kw;
                        let dst = &mut col[row * cols..(row + 1) * cols];
                        let mut idx = 0;
                        for oz in z0..z0 + planes {
                            let iz = oz as isize * s + kd as isize - p;
                            for oy in 0..out[1] {
                                let iy = oy as isize * s + kh as isize - p;
                                let row_ok = iz >= 0 && iz < dims[0] as isize && iy >= 0 && iy < dims[1] as isize;
                                let base = if row_ok { (iz as usize * dims[1] + iy as usize) * dims[2] } else { 0 };
                                for ox in 0..out[2] {
                                    let ix = ox as isize * s + kw as isize - p;
                                    dst[idx] = if row_ok && ix >= 0 && ix < dims[2] as isize {
                                        xc[base + ix as usize]
                                    } else {
                                        T::zero()
                                    };
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into the input gradient; adjoint of [`Conv3d::im2col`].
    fn col2im(&self, col: &[T], dims: Shape, out: Shape, z0: usize, planes: usize, gx: &mut [T]) {
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad.0 as isize);
        let cols = planes * out[1] * out[2];
        let vox = dims[0] * dims[1] * dims[2];
        for ci in 0..self.cin {
            let gc = &mut gx[ci * vox..(ci + 1) * vox];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((ci * k + kd) * k + kh) * k + kw;
                        let src = &col[row * cols..(row + 1) * cols];
                        let mut idx = 0;
                        for oz in z0..z0 + planes {
                            let iz = oz as isize * s + kd as isize - p;
                            for oy in 0..out[1] {
                                let iy = oy as isize * s + kh as isize - p;
                                if iz < 0 || iz >= dims[0] as isize || iy < 0 || iy >= dims[1] as isize {
                                    idx += out[2];
                                    continue;
                                }
                                let base = (iz as usize * dims[1] + iy as usize) * dims[2];
                                for ox in 0..out[2] {
                                    let ix = ox as isize * s + kw as isize - p;
                                    if ix >= 0 && ix < dims[2] as isize {
                                        gc[base + ix as usize] += src[idx];
                                    }
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let out = self.out_dims(x.dims).expect("input smaller than kernel");
        let plane = out[1] * out[2];
        let total = out[0] * plane;
        let mut y = Tensor::zeros(x.n, self.cout, out);
        if self.is_direct() {
            for i in 0..x.n {
                direct::forward(x.sample(i), self.cin, x.dims, &self.weight.value, &self.bias.value, self.kernel, y.sample_mut(i));
            }
            return y;
        }
        let slab = self.planes_per_slab(out);
        let mut col = vec![T::zero(); self.k_len() * slab * plane];
        let w = Mat::row_major(&self.weight.value, self.cout, self.k_len());
        for i in 0..x.n {
            let xs = x.sample(i);
            let ys = y.sample_mut(i);
            for (co, &b) in self.bias.value.iter().enumerate() {
                ys[co * total..(co + 1) * total].iter_mut().for_each(|v| *v = b);
            }
            let mut z0 = 0;
            while z0 < out[0] {
                let planes = slab.min(out[0] - z0);
                let cols = planes * plane;
                let col = &mut col[..self.k_len() * cols];
                self.im2col(xs, x.dims, out, z0, planes, col);
                gemm(T::one(), w, Mat::row_major(col, self.k_len(), cols), T::one(), &mut ys[z0 * plane..], total);
                z0 += planes;
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let out = grad_out.dims;
        let plane = out[1] * out[2];
        let total = out[0] * plane;
        let kl = self.k_len();
        let mut gx = Tensor::zeros(x.n, self.cin, x.dims);
        if self.is_direct() {
            for i in 0..x.n {
                let gs = grad_out.sample(i);
                for co in 0..self.cout {
                    self.bias.grad[co] += gs[co * total..(co + 1) * total].iter().copied().sum::<T>();
                }
                direct::backward_weight(x.sample(i), self.cin, gs, self.cout, x.dims, self.kernel, &mut self.weight.grad);
                direct::backward_input(gs, self.cout, x.dims, &self.weight.value, self.cin, self.kernel, gx.sample_mut(i));
            }
            return gx;
        }
        let slab = self.planes_per_slab(out);
        let mut col = vec![T::zero(); kl * slab * plane];
        let mut gcol = vec![T::zero(); kl * slab * plane];
        for i in 0..x.n {
            let gs = grad_out.sample(i);
            for co in 0..self.cout {
                self.bias.grad[co] += gs[co * total..(co + 1) * total].iter().copied().sum::<T>();
            }
            let mut z0 = 0;
            while z0 < out[0] {
                let planes = slab.min(out[0] - z0);
                let cols = planes * plane;
                let col = &mut col[..kl * cols];
                let gcol = &mut gcol[..kl * cols];
                self.im2col(x.sample(i), x.dims, out, z0, planes, col);
                let g = Mat::new(&gs[z0 * plane..], self.cout, cols, total, 1);
                gemm(T::one(), g, Mat::row_major(col, kl, cols).t(), T::one(), &mut self.weight.grad, kl);
                let w = Mat::row_major(&self.weight.value, self.cout, kl);
                gemm(T::one(), w.t(), g, T::zero(), gcol, cols);
                self.col2im(gcol, x.dims, out, z0, planes, gx.sample_mut(i));
                z0 += planes;
            }
        }
        gx
    }
}

impl<T: Real> Module<T> for Conv3d<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        out.push((join(prefix, "weight"), Slot::Param(&self.weight)));
        out.push((join(prefix, "bias"), Slot::Param(&self.bias)));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, SlotMut<'a, T>)>) {
        out.push((join(prefix, "weight"), SlotMut::Param(&mut self.weight)));
        out.push((join(prefix, "bias"), SlotMut::Param(&mut self.bias)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct seven-loop convolution.
    fn naive(conv: &Conv3d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let out = conv.out_dims(x.dims).unwrap();
        let k = conv.kernel;
        let mut y = Tensor::zeros(x.n, conv.cout, out);
        let d = x.dims;
        for n in 0..x.n {
            for co in 0..conv.cout {
                for oz in 0..out[0] {
                    for oy in 0..out[1] {
                        for ox in 0..out[2] {
                            let mut acc = conv.bias.value[co];
                            for ci in 0..conv.cin {
                                for a in 0..k {
                                    for b in 0..k {
                                        for c in 0..k {
                                            let iz = (oz * conv.stride + a) as isize - conv.pad.0 as isize;
                                            let iy = (oy * conv.stride + b) as isize - conv.pad.0 as isize;
                                            let ix = (ox * conv.stride + c) as isize - conv.pad.0 as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= d[0] || iy >= d[1] || ix >= d[2] {
                                                continue;
                                            }
                                            let w = conv.weight.value[(((co * conv.cin + ci) * k + a) * k + b) * k + c];
                                            acc += w * x.data[(((n * x.c + ci) * d[0] + iz) * d[1] + iy) * d[2] + ix];
                                        }
                                    }
                                }
                            }
                            y.data[(((n * conv.cout + co) * out[0] + oz) * out[1] + oy) * out[2] + ox] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn random_tensor(n: usize, c: usize, dims: Shape, rng: &mut impl Rng) -> Tensor<f64> {
        let len = n * c * dims.iter().product::<usize>();
        Tensor::from_vec(n, c, dims, (0..len).map(|_| rng.random::<f64>() - 0.5).collect())
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for (k, s, pad, dims) in [(3, 1, (1, 1), [4, 5, 6]), (4, 2, (1, 1), [8, 6, 4]), (2, 1, (0, 1), [3, 3, 2])] {
            let mut conv = Conv3d::<f64>::new(2, 3, k, s, pad, 0.3, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3];
            let x = random_tensor(2, 2, dims, &mut rng);
            let fast = conv.forward(&x);
            let slow = naive(&conv, &x);
            assert_eq!(fast.dims, slow.dims);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <g, conv(x)> is linear in x and in the weights; compare gradients with finite differences.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for (k, s, pad, dims, cout) in [(4, 2, (1, 1), [6, 4, 4], 2), (3, 1, (1, 1), [3, 4, 18], 5), (5, 1, (2, 2), [5, 3, 7], 3)] {
            let conv = Conv3d::<f64>::new(2, cout, k, s, pad, 0.3, &mut rng);
            let x = random_tensor(2, 2, dims, &mut rng);
            check_adjoint(conv, x, &mut rng);
        }
    }

    fn check_adjoint(mut conv: Conv3d<f64>, x: Tensor<f64>, rng: &mut impl Rng) {
        let y = conv.forward(&x);
        let g = random_tensor(x.n, conv.cout, y.dims, rng);
        let gx = conv.backward(&x, &g);
        let objective = |conv: &Conv3d<f64>, x: &Tensor<f64>| -> f64 {
            conv.forward(x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for idx in [0, 7, 33, 60, 91, x.data.len() - 1] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * h);
            assert!((fd - gx.data[idx]).abs() < 1e-7, "input grad {idx}");
        }
        for idx in [0, 5, 40, conv.weight.value.len() - 1] {
            let mut cp = conv.clone();
            cp.weight.value[idx] += h;
            let mut cm = conv.clone();
            cm.weight.value[idx] -= h;
            let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * h);
            assert!((fd - conv.weight.grad[idx]).abs() < 1e-7, "weight grad {idx}");
        }
        let bias_total: f64 = g.channel(0, 0).iter().chain(g.channel(1, 0)).sum();
        assert!((conv.bias.grad[0] - bias_total).abs() < 1e-12);
    }

    #[test]
    fn slabbing_matches_single_slab() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let conv = Conv3d::<f64>::new(64, 2, 4, 2, (1, 1), 0.05, &mut rng);
        let x = random_tensor(1, 64, [48, 48, 8], &mut rng);
        assert!(conv.planes_per_slab([24, 24, 4]) < 24);
        let fast = conv.forward(&x);
        let slow = naive(&conv, &x);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
