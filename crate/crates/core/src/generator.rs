//! Multi-path generator: a global residual path over the whole volume, `K` independent local
//! paths over disjoint patches, and a two-layer fusion head with sigmoid output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, Activation, Conv3d, ConvBnAct, ConvBnActCache, Mode, Module, Real, ResBlock, ResBlockCache, Slot, SlotMut,
    Tensor,
};
use crate::volume::{extract_box, insert_box, voxel_count, PatchGrid, Shape, Volume};

/// Architecture hyper-parameters shared by generator and discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub resolution: Shape,
    pub k_patches: usize,
    /// Base filter count `w`; each path uses `w, w, 2w, w` filters and emits `w` features.
    pub gen_width: usize,
    /// Base filter count `w`; the discriminator uses `w, 2w, 4w, 8w, w, 1` filters.
    pub disc_width: usize,
    pub leaky_slope: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: [64, 64, 64],
            k_patches: 4,
            gen_width: 64,
            disc_width: 64,
            leaky_slope: 0.2,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let grid = PatchGrid::new(self.k_patches)?;
        grid.patch_shape(self.resolution)?;
        if self.gen_width == 0 || self.disc_width == 0 {
            return Err(Error::InvalidConfig("network widths must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidConfig("init_std must be positive".into()));
        }
        crate::discriminator::output_chain(self.resolution)?;
        Ok(())
    }

    pub fn path_filters(&self) -> [usize; 4] {
        let w = self.gen_width;
        [w, w, 2 * w, w]
    }

    /// Channel count of each path's output (`f_g` and `f_l`).
    pub fn feature_channels(&self) -> usize {
        self.path_filters()[3]
    }
}

/// Global-path layer identifiers, in forward order.
pub const LAYER_IDS: [&str; 8] = ["conv1", "conv2", "conv3", "conv4", "res1", "res2", "res3", "res4"];

/// Four conv/bn/leaky layers followed by four residual blocks; stride 1 throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPath<T> {
    pub stem: Vec<ConvBnAct<T>>,
    pub blocks: Vec<ResBlock<T>>,
}

#[derive(Debug)]
pub struct PathCache<T> {
    stem: Vec<ConvBnActCache<T>>,
    blocks: Vec<ResBlockCache<T>>,
}

impl<T: Real> ResidualPath<T> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let filters = cfg.path_filters();
        let mut cin = 1;
        let stem = filters
            .iter()
            .map(|&cout| {
                let conv = Conv3d::same(cin, cout, 3, cfg.init_std, rng);
                cin = cout;
                ConvBnAct::new(conv, Activation::LeakyRelu(cfg.leaky_slope))
            })
            .collect();
        let blocks = (0..4).map(|_| ResBlock::new(cin, cfg.init_std, rng)).collect();
        Self { stem, blocks }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<PathCache<T>>) {
        let mut cache = PathCache { stem: Vec::new(), blocks: Vec::new() };
        let mut h = x.clone();
        for layer in &self.stem {
            let (y, c) = layer.forward(&h, mode);
            cache.stem.extend(c);
            h = y;
        }
        for block in &self.blocks {
            let (y, c) = block.forward(&h, mode);
            cache.blocks.extend(c);
            h = y;
        }
        (h, (mode == Mode::Train).then_some(cache))
    }

    /// Eval-mode forward that returns the output of every layer in [`LAYER_IDS`] order.
    pub fn forward_layers(&self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut outs = Vec::with_capacity(8);
        let mut h = x.clone();
        for layer in &self.stem {
            h = layer.forward(&h, Mode::Eval).0;
            outs.push(h.clone());
        }
        for block in &self.blocks {
            h = block.forward(&h, Mode::Eval).0;
            outs.push(h.clone());
        }
        outs
    }

    pub fn backward(&mut self, cache: PathCache<T>, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = grad.clone();
        for (block, c) in self.blocks.iter_mut().zip(cache.blocks).rev() {
            g = block.backward(c, &g);
        }
        for (layer, c) in self.stem.iter_mut().zip(cache.stem).rev() {
            g = layer.backward(c, &g);
        }
        g
    }
}

impl<T: Real> Module<T> for ResidualPath<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        for (i, l) in self.stem.iter().enumerate() {
            l.visit(&join(prefix, &format!("conv{}", i + 1)), out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("res{}", i + 1)), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, SlotMut<'a, T>)>) {
        for (i, l) in self.stem.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("conv{}", i + 1)), out);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("res{}", i + 1)), out);
        }
    }
}

/// `conv(3³, f_g + f_l → w) → bn → leaky → conv(3³, w → 1) → sigmoid`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead<T> {
    pub hidden: ConvBnAct<T>,
    pub out: Conv3d<T>,
}

impl<T: Real> Module<T> for FusionHead<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        self.hidden.visit(&join(prefix, "conv1"), out);
        self.out.visit(&join(prefix, "conv2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, SlotMut<'a, T>)>) {
        self.hidden.visit_mut(&join(prefix, "conv1"), out);
        self.out.visit_mut(&join(prefix, "conv2"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    cfg: ModelConfig,
    grid: PatchGrid,
    pub global: ResidualPath<T>,
    pub local: Vec<ResidualPath<T>>,
    pub fusion: FusionHead<T>,
}

#[derive(Debug)]
pub struct GeneratorCache<T> {
    global: PathCache<T>,
    local: Vec<PathCache<T>>,
    hidden: ConvBnActCache<T>,
    hidden_out: Tensor<T>,
    output: Tensor<T>,
}

/// Copies patch `index` of every sample and channel of `t`.
fn tile_tensor<T: Real>(t: &Tensor<T>, grid: &PatchGrid, index: usize) -> Tensor<T> {
    let ps = grid.patch_shape(t.dims).expect("validated resolution");
    let origin = grid.patch_origin(index, ps);
    let s = t.spatial();
    let mut data = Vec::with_capacity(t.n * t.c * voxel_count(ps));
    for chunk in t.data.chunks(s) {
        data.extend(extract_box(chunk, t.dims, origin, ps));
    }
    Tensor::from_vec(t.n, t.c, ps, data)
}

fn fuse_tensors<T: Real>(patches: &[Tensor<T>], grid: &PatchGrid, dims: Shape) -> Tensor<T> {
    let (n, c, ps) = (patches[0].n, patches[0].c, patches[0].dims);
    let mut out = Tensor::zeros(n, c, dims);
    let s = voxel_count(dims);
    for (index, patch) in patches.iter().enumerate() {
        let origin = grid.patch_origin(index, ps);
        for (dst, src) in out.data.chunks_mut(s).zip(patch.data.chunks(voxel_count(ps))) {
            insert_box(dst, dims, origin, ps, src);
        }
    }
    out
}

impl<T: Real> Generator<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let grid = PatchGrid::new(cfg.k_patches)?;
        let global = ResidualPath::new(cfg, &mut rng);
        let local = (0..cfg.k_patches).map(|_| ResidualPath::new(cfg, &mut rng)).collect();
        let f = cfg.feature_channels();
        let w = cfg.gen_width;
        let hidden = ConvBnAct::new(Conv3d::same(2 * f, w, 3, cfg.init_std, &mut rng), Activation::LeakyRelu(cfg.leaky_slope));
        let out = Conv3d::same(w, 1, 3, cfg.init_std, &mut rng);
        Ok(Self { cfg: cfg.clone(), grid, global, local, fusion: FusionHead { hidden, out } })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        if shape != self.cfg.resolution {
            return Err(Error::ResolutionMismatch { expected: self.cfg.resolution, found: shape });
        }
        Ok(())
    }

    /// Global-path features `[1, f_g, resolution]` (inference mode).
    pub fn global_forward(&self, x: &Volume) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        Ok(self.global.forward(&Tensor::from_volumes([x]), Mode::Eval).0)
    }

    /// Local-path features fused back into the full spatial layout (inference mode).
    ///
    /// `patches` must be the output of [`crate::volume::tile_patches`] with this generator's grid.
    pub fn local_forward(&self, patches: &[Volume]) -> Result<Tensor<T>> {
        if patches.len() != self.grid.k() {
            return Err(Error::PatchCount { expected: self.grid.k(), found: patches.len() });
        }
        let expected = self.grid.patch_shape(self.cfg.resolution)?;
        let feats: Vec<Tensor<T>> = patches
            .iter()
            .zip(&self.local)
            .map(|(p, path)| {
                if p.shape() != expected {
                    return Err(Error::ShapeMismatch { expected, found: p.shape() });
                }
                Ok(path.forward(&Tensor::from_volumes([p]), Mode::Eval).0)
            })
            .collect::<Result<_>>()?;
        Ok(fuse_tensors(&feats, &self.grid, self.cfg.resolution))
    }

    /// Batched forward pass on `[n, 1, resolution]` inputs.
    pub fn forward_batch(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<GeneratorCache<T>>) {
        assert_eq!(x.dims, self.cfg.resolution, "generator input resolution");
        let (g, global) = self.global.forward(x, mode);
        let mut local_caches = Vec::new();
        let local_feats: Vec<Tensor<T>> = self
            .local
            .iter()
            .enumerate()
            .map(|(k, path)| {
                let (f, c) = path.forward(&tile_tensor(x, &self.grid, k), mode);
                local_caches.extend(c);
                f
            })
            .collect();
        let l = fuse_tensors(&local_feats, &self.grid, x.dims);
        let joined = Tensor::concat_channels(&g, &l);
        let (hidden_out, hidden) = self.fusion.hidden.forward(&joined, mode);
        let mut y = self.fusion.out.forward(&hidden_out);
        Activation::Sigmoid.apply(&mut y.data);
        let cache = match (global, hidden) {
            (Some(global), Some(hidden)) => {
                Some(GeneratorCache { global, local: local_caches, hidden, hidden_out, output: y.clone() })
            }
            _ => None,
        };
        (y, cache)
    }

    /// Backpropagates `grad` (w.r.t. the sigmoid output) into every parameter group.
    pub fn backward(&mut self, cache: GeneratorCache<T>, grad: &Tensor<T>) {
        let mut g = grad.clone();
        Activation::Sigmoid.backward(&cache.output.data, &mut g.data);
        let g_hidden = self.fusion.out.backward(&cache.hidden_out, &g);
        let g_joined = self.fusion.hidden.backward(cache.hidden, &g_hidden);
        let (g_global, g_local) = g_joined.split_channels(self.cfg.feature_channels());
        self.global.backward(cache.global, &g_global);
        for (k, (path, c)) in self.local.iter_mut().zip(cache.local).enumerate() {
            path.backward(c, &tile_tensor(&g_local, &self.grid, k));
        }
    }

    /// Synthesizes the target volume; every output voxel lies strictly inside `(0, 1)`.
    pub fn forward(&self, x: &Volume) -> Result<Volume> {
        self.check_input(x.shape())?;
        let (y, _) = self.forward_batch(&Tensor::from_volumes([x]), Mode::Eval);
        let eps = 1e-6;
        let v = y.to_volume(0).map(|v| v.clamp(eps, 1.0 - eps))?;
        let mut v = v;
        v.set_spacing(x.spacing());
        Ok(v)
    }

    /// Per-channel activations of a named global-path layer.
    pub fn layer_activations(&self, x: &Volume, layer_id: &str) -> Result<Tensor<T>> {
        let index = LAYER_IDS
            .iter()
            .position(|&id| id == layer_id)
            .ok_or_else(|| Error::UnknownLayer(layer_id.to_string()))?;
        self.check_input(x.shape())?;
        let mut outs = self.global.forward_layers(&Tensor::from_volumes([x]));
        Ok(outs.swap_remove(index))
    }
}

impl<T: Real> Module<T> for Generator<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        self.global.visit(&join(prefix, "global"), out);
        for (k, path) in self.local.iter().enumerate() {
            path.visit(&join(prefix, &format!("local/{k}")), out);
        }
        self.fusion.visit(&join(prefix, "fusion"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, SlotMut<'a, T>)>) {
        self.global.visit_mut(&join(prefix, "global"), out);
        for (k, path) in self.local.iter_mut().enumerate() {
            path.visit_mut(&join(prefix, &format!("local/{k}")), out);
        }
        self.fusion.visit_mut(&join(prefix, "fusion"), out);
    }
}
