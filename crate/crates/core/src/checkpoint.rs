//! Model container and its single-file checkpoint.
//!
//! The checkpoint is a safetensors archive. Every parameter is stored under
//! its dotted name (`spatial.*`, `branch.*`, `fusion.*`, `motion.*`,
//! `null_text.embedding`, `codec.*`) as little-endian f32, and the metadata
//! entry `config` holds the JSON header with the network, codec and schedule
//! configuration.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecConfig, CodecMode};
use crate::error::{Error, Result};
use crate::network::{Denoiser, NetConfig, ParamGroup, ParamStore};
use crate::scheduler::{NoiseSchedule, ScheduleConfig};

pub const FORMAT_VERSION: u32 = 1;
const CONFIG_KEY: &str = "config";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub format_version: u32,
    pub net: NetConfig,
    pub codec: CodecConfig,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            net: NetConfig::default(),
            codec: CodecConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

/// Parameters plus the configuration needed to rebuild every module.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    /// Fresh parameters: fusion projections and temporal output projections start at zero.
    pub fn init(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        if config.codec.mode != CodecMode::Learned {
            return Err(Error::config("the denoiser requires the learned 4-channel codec"));
        }
        let mut store = ParamStore::new(dtype, seed);
        Denoiser::build(&mut store, &config.net, &[])?;
        Codec::build(&mut store, &config.codec, false)?;
        Ok(Self { config, store })
    }

    pub fn denoiser(&mut self, trainable: &[ParamGroup]) -> Result<Denoiser> {
        Denoiser::build(&mut self.store, &self.config.net, trainable)
    }

    pub fn codec(&mut self, trainable: bool) -> Result<Codec> {
        Codec::build(&mut self.store, &self.config.codec, trainable)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.config.schedule)
    }

    /// Independent copy of the parameters.
    pub fn deep_copy(&self) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            store: self.store.deep_copy()?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(self.store.len());
        for name in self.store.names() {
            let var = self.store.get(name).expect("name from store");
            let values = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            buffers.push((name.to_string(), var.dims().to_vec(), bytes));
        }
        let views = buffers
            .iter()
            .map(|(n, shape, bytes)| {
                TensorView::new(StDtype::F32, shape.clone(), bytes)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([(CONFIG_KEY.to_string(), serde_json::to_string(&self.config)?)]);
        let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(parent) = path.as_ref().parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, dtype: DType) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::CheckpointNotFound(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(CONFIG_KEY))
            .ok_or_else(|| Error::Checkpoint("missing config header".into()))?;
        let config: ModelConfig = serde_json::from_str(header)?;
        if config.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                config.format_version
            )));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut store = ParamStore::new(dtype, 0);
        for (name, view) in st.tensors() {
            if view.dtype() != StDtype::F32 {
                return Err(Error::Checkpoint(format!("{name}: expected f32, got {:?}", view.dtype())));
            }
            let t = Tensor::from_raw_buffer(view.data(), DType::F32, view.shape(), &Device::Cpu)?;
            store.insert(name, t)?;
        }
        let mut model = Self { config, store };
        let before = model.store.len();
        model.denoiser(&[])?;
        model.codec(false)?;
        if model.store.len() != before {
            return Err(Error::Checkpoint("checkpoint is missing parameters".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            net: NetConfig::tiny(),
            codec: CodecConfig {
                hidden: 8,
                latent_scale: 1.7,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn save_load_round_trip() {
        let model = Model::init(small(), DType::F32, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        model.save(&path).unwrap();
        let back = Model::load(&path, DType::F32).unwrap();
        assert_eq!(back.config, model.config);
        for g in ParamGroup::ALL {
            assert_eq!(back.store.snapshot(g).unwrap(), model.store.snapshot(g).unwrap());
        }
    }

    #[test]
    fn deep_copy_is_independent() {
        let model = Model::init(small(), DType::F32, 5).unwrap();
        let copy = model.deep_copy().unwrap();
        let v = copy.store.vars_in(&[ParamGroup::Spatial]);
        v[0].set(&v[0].as_tensor().ones_like().unwrap()).unwrap();
        assert_ne!(copy.store.snapshot(ParamGroup::Spatial).unwrap(), model.store.snapshot(ParamGroup::Spatial).unwrap());
    }

    #[test]
    fn missing_checkpoint() {
        let err = Model::load("/nonexistent/x.safetensors", DType::F32).unwrap_err();
        assert!(err.to_string().contains("checkpoint not found"));
    }

    #[test]
    fn fusion_starts_at_zero() {
        let model = Model::init(small(), DType::F32, 1).unwrap();
        let fusion = model.store.snapshot(ParamGroup::Fusion).unwrap();
        assert!(!fusion.is_empty());
        assert!(fusion.values().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn lossless_codec_rejected_for_model() {
        let mut cfg = small();
        cfg.codec.mode = CodecMode::Lossless;
        assert!(Model::init(cfg, DType::F32, 0).is_err());
    }
}
