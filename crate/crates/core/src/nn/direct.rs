//! Direct kernels for stride-1, size-preserving convolutions with an odd cubic kernel.
//!
//! Output rows are computed in chunks of [`LANES`] voxels for blocks of [`CB`] output
//! channels so the accumulators stay in registers. The inner row loops go through
//! [`Real::conv_rows`] and [`Real::corr_rows`], which `f32` overrides with AVX2 code.

use super::Real;
use crate::volume::Shape;

pub(crate) const LANES: usize = 16;
pub(crate) const CB: usize = 4;

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Zero-padded copy of a `[c][d][h][w]` block: `p` voxels on every side, and the row
/// length rounded up so whole chunks of `LANES` can be read past the last voxel.
struct Padded<T> {
    data: Vec<T>,
    dp: usize,
    hp: usize,
    wp: usize,
}

impl<T: Real> Padded<T> {
    fn new(x: &[T], c: usize, dims: Shape, p: usize) -> Self {
        let [d, h, w] = dims;
        let (dp, hp, wp) = (d + 2 * p, h + 2 * p, round_up(w, LANES) + 2 * p);
        let mut data = vec![T::zero(); c * dp * hp * wp];
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    let src = ((ci * d + z) * h + y) * w;
                    let dst = ((ci * dp + z + p) * hp + y + p) * wp + p;
                    data[dst..dst + w].copy_from_slice(&x[src..src + w]);
                }
            }
        }
        Self { data, dp, hp, wp }
    }

    fn start(&self, c: usize, z: usize, y: usize) -> usize {
        ((c * self.dp + z) * self.hp + y) * self.wp
    }
}

/// Portable version of [`Real::conv_rows`].
///
/// For each chunk, `out[j][x] = bias[j] + Σ_s Σ_kx wb[s][kx][j] · xp[starts[s] + x + kx]`,
/// with `out` laid out `[CB][wr]`.
pub(crate) fn conv_rows_generic<T: Real>(
    xp: &[T],
    starts: &[usize],
    k: usize,
    wb: &[T],
    wr: usize,
    bias: &[T; CB],
    out: &mut [T],
) {
    for x0 in (0..wr).step_by(LANES) {
        let mut acc = [[T::zero(); LANES]; CB];
        for (a, &b) in acc.iter_mut().zip(bias) {
            *a = [b; LANES];
        }
        for (s, &st) in starts.iter().enumerate() {
            for kx in 0..k {
                let seg = &xp[st + x0 + kx..st + x0 + kx + LANES];
                let wv = &wb[(s * k + kx) * CB..(s * k + kx + 1) * CB];
                for j in 0..CB {
                    for t in 0..LANES {
                        acc[j][t] += wv[j] * seg[t];
                    }
                }
            }
        }
        for (j, a) in acc.iter().enumerate() {
            out[j * wr + x0..j * wr + x0 + LANES].copy_from_slice(a);
        }
    }
}

/// Portable version of [`Real::corr_rows`]: for every row pair, `j < CB` and `kx < k`,
/// `acc[j][kx][t] += Σ_x0 gp[g + j·g_stride + x0 + t] · xp[x + x0 + kx + t]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn corr_rows_generic<T: Real>(
    gp: &[T],
    g_starts: &[usize],
    g_stride: usize,
    xp: &[T],
    x_starts: &[usize],
    wr: usize,
    k: usize,
    acc: &mut [T],
) {
    for (&g, &x) in g_starts.iter().zip(x_starts) {
        for x0 in (0..wr).step_by(LANES) {
            for j in 0..CB {
                let gr = g + j * g_stride + x0;
                for kx in 0..k {
                    let a = &mut acc[(j * k + kx) * LANES..(j * k + kx + 1) * LANES];
                    for t in 0..LANES {
                        a[t] += gp[gr + t] * xp[x + x0 + kx + t];
                    }
                }
            }
        }
    }
}

/// `out[cout][d][h][w] = bias + w ⋆ x` for one sample. `weight` is `[cout][cin][k][k][k]`.
pub(crate) fn forward<T: Real>(x: &[T], cin: usize, dims: Shape, weight: &[T], bias: &[T], k: usize, out: &mut [T]) {
    let [d, h, w] = dims;
    let cout = bias.len();
    let k3 = k * k * k;
    assert_eq!(weight.len(), cout * cin * k3, "weight length");
    assert_eq!(out.len(), cout * d * h * w, "output length");
    let wr = round_up(w, LANES);
    let xp = Padded::new(x, cin, dims, k / 2);
    // [block][cin][kz][ky][kx][CB], zero for channels past cout.
    let blocks = cout.div_ceil(CB);
    let mut wb = vec![T::zero(); blocks * cin * k3 * CB];
    for co in 0..cout {
        for ci in 0..cin {
            for o in 0..k3 {
                wb[(((co / CB) * cin + ci) * k3 + o) * CB + co % CB] = weight[(co * cin + ci) * k3 + o];
            }
        }
    }
    let vox = d * h * w;
    let mut starts = Vec::with_capacity(cin * k * k);
    let mut rows = vec![T::zero(); CB * wr];
    for blk in 0..blocks {
        let wblk = &wb[blk * cin * k3 * CB..(blk + 1) * cin * k3 * CB];
        let mut b = [T::zero(); CB];
        for (j, v) in b.iter_mut().enumerate() {
            if let Some(&bias) = bias.get(blk * CB + j) {
                *v = bias;
            }
        }
        for z in 0..d {
            for y in 0..h {
                starts.clear();
                for ci in 0..cin {
                    for kz in 0..k {
                        for ky in 0..k {
                            starts.push(xp.start(ci, z + kz, y + ky));
                        }
                    }
                }
                T::conv_rows(&xp.data, &starts, k, wblk, wr, &b, &mut rows);
                for j in 0..CB.min(cout - blk * CB) {
                    let dst = (blk * CB + j) * vox + (z * h + y) * w;
                    out[dst..dst + w].copy_from_slice(&rows[j * wr..j * wr + w]);
                }
            }
        }
    }
}

/// Input gradient: the same convolution with transposed channels and a mirrored kernel.
pub(crate) fn backward_input<T: Real>(grad: &[T], cout: usize, dims: Shape, weight: &[T], cin: usize, k: usize, gx: &mut [T]) {
    let k3 = k * k * k;
    let mut flipped = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for o in 0..k3 {
                flipped[(ci * cout + co) * k3 + (k3 - 1 - o)] = weight[(co * cin + ci) * k3 + o];
            }
        }
    }
    forward(grad, cout, dims, &flipped, &vec![T::zero(); cin], k, gx);
}

/// Adds `d loss / d weight` for one sample to `gw` (`[cout][cin][k][k][k]`).
pub(crate) fn backward_weight<T: Real>(x: &[T], cin: usize, grad: &[T], cout: usize, dims: Shape, k: usize, gw: &mut [T]) {
    let [d, h, w] = dims;
    let wr = round_up(w, LANES);
    let xp = Padded::new(x, cin, dims, k / 2);
    // Gradient rows padded with zeros to whole chunks and to a whole number of channel blocks.
    let blocks = cout.div_ceil(CB);
    let plane = d * h * wr;
    let mut gp = vec![T::zero(); blocks * CB * plane];
    for r in 0..cout * d * h {
        gp[r * wr..r * wr + w].copy_from_slice(&grad[r * w..(r + 1) * w]);
    }
    let k3 = k * k * k;
    let mut g_starts = Vec::with_capacity(d * h);
    let mut x_starts = Vec::with_capacity(d * h);
    let mut acc = vec![T::zero(); CB * k * LANES];
    for blk in 0..blocks {
        g_starts.clear();
        g_starts.extend((0..d * h).map(|r| blk * CB * plane + r * wr));
        for ci in 0..cin {
            for kz in 0..k {
                for ky in 0..k {
                    x_starts.clear();
                    for z in 0..d {
                        x_starts.extend((0..h).map(|y| xp.start(ci, z + kz, y + ky)));
                    }
                    acc.iter_mut().for_each(|a| *a = T::zero());
                    T::corr_rows(&gp, &g_starts, plane, &xp.data, &x_starts, wr, k, &mut acc);
                    for j in 0..CB.min(cout - blk * CB) {
                        let co = blk * CB + j;
                        for kx in 0..k {
                            let lanes = &acc[(j * k + kx) * LANES..(j * k + kx + 1) * LANES];
                            gw[(co * cin + ci) * k3 + (kz * k + ky) * k + kx] += lanes.iter().copied().sum::<T>();
                        }
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
pub(crate) mod avx2 {
    use std::arch::x86_64::*;

    use super::{CB, LANES};

    pub(crate) fn available() -> bool {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }

    /// # Safety
    /// The CPU must support AVX2 and FMA.
    #[target_feature(enable = "avx2,fma")]
    pub(crate) unsafe fn conv_rows(
        xp: &[f32],
        starts: &[usize],
        k: usize,
        wb: &[f32],
        wr: usize,
        bias: &[f32; CB],
        out: &mut [f32],
    ) {
        assert!(wr.is_multiple_of(LANES) && out.len() >= CB * wr);
        assert!(wb.len() >= starts.len() * k * CB);
        assert!(starts.iter().all(|&s| s + wr + k - 1 <= xp.len()), "row read out of bounds");
        let (xp, wb, out) = (xp.as_ptr(), wb.as_ptr(), out.as_mut_ptr());
        for x0 in (0..wr).step_by(LANES) {
            let mut a = [[_mm256_setzero_ps(); 2]; CB];
            for (j, r) in a.iter_mut().enumerate() {
                *r = [_mm256_set1_ps(bias[j]); 2];
            }
            for (s, &st) in starts.iter().enumerate() {
                let row = xp.add(st + x0);
                let w = wb.add(s * k * CB);
                for kx in 0..k {
                    let s0 = _mm256_loadu_ps(row.add(kx));
                    let s1 = _mm256_loadu_ps(row.add(kx + 8));
                    let wk = w.add(kx * CB);
                    for (j, r) in a.iter_mut().enumerate() {
                        let wv = _mm256_broadcast_ss(&*wk.add(j));
                        r[0] = _mm256_fmadd_ps(wv, s0, r[0]);
                        r[1] = _mm256_fmadd_ps(wv, s1, r[1]);
                    }
                }
            }
            for (j, r) in a.iter().enumerate() {
                _mm256_storeu_ps(out.add(j * wr + x0), r[0]);
                _mm256_storeu_ps(out.add(j * wr + x0 + 8), r[1]);
            }
        }
    }

    /// Three-tap specialization of the weight correlation; other sizes use the portable code.
    /// Works on 8-lane halves of each chunk so the twelve accumulators fit in registers.
    ///
    /// # Safety
    /// The CPU must support AVX2 and FMA.
    #[target_feature(enable = "avx2,fma")]
    pub(crate) unsafe fn corr_rows3(
        gp: &[f32],
        g_starts: &[usize],
        g_stride: usize,
        xp: &[f32],
        x_starts: &[usize],
        wr: usize,
        acc: &mut [f32],
    ) {
        assert!(wr.is_multiple_of(LANES) && acc.len() >= CB * 3 * LANES && g_starts.len() == x_starts.len());
        assert!(g_starts.iter().all(|&g| g + (CB - 1) * g_stride + wr <= gp.len()), "gradient row out of bounds");
        assert!(x_starts.iter().all(|&x| x + wr + 2 <= xp.len()), "input row out of bounds");
        let (gp, xp) = (gp.as_ptr(), xp.as_ptr());
        let mut a = [[_mm256_setzero_ps(); 3]; CB];
        for (&g, &x) in g_starts.iter().zip(x_starts) {
            for x0 in (0..wr).step_by(8) {
                let xr = xp.add(x + x0);
                let xs = [_mm256_loadu_ps(xr), _mm256_loadu_ps(xr.add(1)), _mm256_loadu_ps(xr.add(2))];
                for (j, r) in a.iter_mut().enumerate() {
                    let gv = _mm256_loadu_ps(gp.add(g + j * g_stride + x0));
                    for kx in 0..3 {
                        r[kx] = _mm256_fmadd_ps(gv, xs[kx], r[kx]);
                    }
                }
            }
        }
        for (j, r) in a.iter().enumerate() {
            for (kx, v) in r.iter().enumerate() {
                let dst = acc.as_mut_ptr().add((j * 3 + kx) * LANES);
                _mm256_storeu_ps(dst, _mm256_add_ps(_mm256_loadu_ps(dst), *v));
            }
        }
    }
}
