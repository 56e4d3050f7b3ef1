//! Single-file checkpoint archive in safetensors layout.
//!
//! Generator tensors are stored under their own names (`global/...`, `local/<k>/...`,
//! `fusion/...`) and discriminator tensors under `discriminator/...`. The metadata holds the
//! model configuration so that consumers can validate compatibility before loading.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{Generator, ModelConfig};
use crate::nn::{Module, Slot, SlotMut};

const FORMAT: &str = "glagan-checkpoint-v1";
const META_KEY: &str = "glagan";

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    model_config: ModelConfig,
    epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    /// Completed training epochs.
    pub epoch: usize,
}

fn to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn collect<'a>(m: &'a impl Module<f32>, prefix: &str, out: &mut Vec<(String, Slot<'a, f32>)>) {
    m.visit(prefix, out);
}

impl Checkpoint {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { generator: Generator::new(cfg)?, discriminator: Discriminator::new(cfg)?, epoch: 0 })
    }

    pub fn config(&self) -> &ModelConfig {
        self.generator.config()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut slots = Vec::new();
        collect(&self.generator, "", &mut slots);
        collect(&self.discriminator, "discriminator", &mut slots);
        let buffers: Vec<(String, Vec<u8>, usize)> =
            slots.iter().map(|(name, s)| (name.clone(), to_bytes(s.values()), s.values().len())).collect();
        let views = buffers
            .iter()
            .map(|(name, bytes, len)| {
                TensorView::new(Dtype::F32, vec![*len], bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        // One metadata entry keeps the header byte-stable; map order is not.
        let meta = Meta { format: FORMAT.into(), model_config: self.config().clone(), epoch: self.epoch };
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta: Meta = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .and_then(|m| serde_json::from_str(m).ok())
            .filter(|m: &Meta| m.format == FORMAT)
            .ok_or_else(|| Error::Checkpoint("not a generator checkpoint archive".into()))?;
        let mut ckpt = Self::new(&meta.model_config)?;
        let mut slots = Vec::new();
        ckpt.generator.visit_mut("", &mut slots);
        ckpt.discriminator.visit_mut("discriminator", &mut slots);
        let expected: HashSet<&str> = slots.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(extra) = st.names().into_iter().find(|n| !expected.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        for (name, mut slot) in slots {
            let view = st.tensor(&name).map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let dst = match &mut slot {
                SlotMut::Param(p) => &mut p.value,
                SlotMut::Buffer(b) => *b,
            };
            if view.dtype() != Dtype::F32 || view.data().len() != 4 * dst.len() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has the wrong size or type")));
            }
            for (d, chunk) in dst.iter_mut().zip(view.data().chunks_exact(4)) {
                *d = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        ckpt.epoch = meta.epoch;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?)
            .map_err(|e| Error::Unwritable { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Volume;

    fn cfg() -> ModelConfig {
        ModelConfig { resolution: [16, 16, 16], k_patches: 2, gen_width: 2, disc_width: 2, seed: 3, ..Default::default() }
    }

    #[test]
    fn round_trip_preserves_every_tensor() {
        let mut ckpt = Checkpoint::new(&cfg()).unwrap();
        ckpt.epoch = 7;
        ckpt.generator.fusion.out.bias.value[0] = 0.123;
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let x = Volume::filled([16, 16, 16], 0.4);
        assert_eq!(back.generator.forward(&x).unwrap(), ckpt.generator.forward(&x).unwrap());
    }

    #[test]
    fn names_follow_parameter_groups() {
        let bytes = Checkpoint::new(&cfg()).unwrap().to_bytes().unwrap();
        let st = SafeTensors::deserialize(&bytes).unwrap();
        let names = st.names();
        for prefix in ["global/", "local/0/", "local/1/", "fusion/", "discriminator/"] {
            assert!(names.iter().any(|n| n.starts_with(prefix)), "{prefix}");
        }
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
        let mut other = cfg();
        other.gen_width = 3;
        let a = Checkpoint::new(&other).unwrap().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&a).is_ok());
        assert!(matches!(Checkpoint::load("/nonexistent/ckpt.safetensors"), Err(Error::MissingFile(_))));
    }

    #[test]
    fn serialization_is_byte_stable() {
        let ckpt = Checkpoint::new(&cfg()).unwrap();
        let first = ckpt.to_bytes().unwrap();
        for _ in 0..16 {
            assert_eq!(ckpt.to_bytes().unwrap(), first);
        }
    }
}
