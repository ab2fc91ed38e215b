//! Named parameter storage with seeded initialization and per-group freezing.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint parameter groups. The group of a parameter is the first segment of its name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Spatial,
    Branch,
    Fusion,
    Motion,
    NullText,
    Codec,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Spatial,
        ParamGroup::Branch,
        ParamGroup::Fusion,
        ParamGroup::Motion,
        ParamGroup::NullText,
        ParamGroup::Codec,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Spatial => "spatial",
            ParamGroup::Branch => "branch",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Motion => "motion",
            ParamGroup::NullText => "null_text",
            ParamGroup::Codec => "codec",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        let head = name.split('.').next()?;
        Self::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Normal(f64),
}

/// Owns every trainable array of the model.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.vars.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Variables whose group is in `groups`, in name order.
    pub fn vars_in(&self, groups: &[ParamGroup]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(n, _)| ParamGroup::of(n).is_some_and(|g| groups.contains(&g)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Copies of every array in `group`, for bitwise comparisons.
    pub fn snapshot(&self, group: ParamGroup) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .filter(|(n, _)| ParamGroup::of(n) == Some(group))
            .map(|(n, v)| {
                let data = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                Ok((n.clone(), data))
            })
            .collect()
    }

    /// Independent copy of every array; later updates to either store do not affect the other.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut out = Self {
            vars: BTreeMap::new(),
            dtype: self.dtype,
            device: self.device.clone(),
            rng: self.rng.clone(),
        };
        for (n, v) in &self.vars {
            out.vars.insert(n.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) -> Result<()> {
        let tensor = tensor.to_dtype(self.dtype)?;
        match self.vars.get(&name) {
            Some(v) if v.shape() == tensor.shape() => v.set(&tensor)?,
            _ => {
                self.vars.insert(name, Var::from_tensor(&tensor)?);
            }
        }
        Ok(())
    }

    /// Sets every parameter whose name ends in `.bias` to zero.
    pub fn zero_biases(&mut self) -> Result<()> {
        for (name, var) in &self.vars {
            if name.ends_with(".bias") {
                var.set(&var.zeros_like()?)?;
            }
        }
        Ok(())
    }

    fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// A builder rooted at the store; `trainable` decides which groups stay tracked.
    pub fn builder<'a>(&'a mut self, trainable: &'a [ParamGroup]) -> Builder<'a> {
        Builder {
            store: self,
            prefix: String::new(),
            trainable,
        }
    }
}

/// Resolves named parameters while constructing modules.
///
/// Missing parameters are created with their initializer. Parameters outside
/// the trainable groups are returned detached so no gradient flows into them.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    trainable: &'a [ParamGroup],
}

impl<'a> Builder<'a> {
    pub fn pp<'b>(&'b mut self, segment: impl std::fmt::Display) -> Builder<'b> {
        let prefix = if self.prefix.is_empty() {
            segment.to_string()
        } else {
            format!("{}.{segment}", self.prefix)
        };
        Builder {
            store: self.store,
            prefix,
            trainable: self.trainable,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = format!("{}.{name}", self.prefix);
        let var = match self.store.vars.get(&full) {
            Some(v) => {
                if v.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {full} has shape {:?}, expected {shape:?}",
                        v.dims()
                    )));
                }
                v.clone()
            }
            None => self.store.create(&full, shape, init)?,
        };
        let tracked = ParamGroup::of(&full).is_some_and(|g| self.trainable.contains(&g));
        Ok(if tracked {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let make = || {
            let mut s = ParamStore::new(DType::F64, 7);
            let mut b = s.builder(&[]);
            let t = b.pp("spatial").pp("x").get("weight", &[3, 4], Init::FanIn(4)).unwrap();
            t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn groups_from_names() {
        assert_eq!(ParamGroup::of("motion.down.0.q.weight"), Some(ParamGroup::Motion));
        assert_eq!(ParamGroup::of("null_text.embedding"), Some(ParamGroup::NullText));
        assert_eq!(ParamGroup::of("other.x"), None);
    }

    #[test]
    fn frozen_groups_are_detached() {
        let mut s = ParamStore::new(DType::F64, 1);
        let (a, b) = {
            let mut bld = s.builder(&[ParamGroup::Motion]);
            let a = bld.pp("motion").get("w", &[2], Init::Ones).unwrap();
            let b = bld.pp("spatial").get("w", &[2], Init::Ones).unwrap();
            (a, b)
        };
        let loss = (a.sum_all().unwrap() + b.sum_all().unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(s.get("motion.w").unwrap().as_tensor()).is_some());
        assert!(grads.get(s.get("spatial.w").unwrap().as_tensor()).is_none());
    }
}
