use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Initial values for a freshly created parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`.
    Uniform(f64),
}

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    Temporal,
    NonTemporal,
    Nothing,
}

impl Trainable {
    pub fn allows(self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Temporal => is_temporal(name),
            Trainable::NonTemporal => !is_temporal(name),
            Trainable::Nothing => false,
        }
    }
}

pub fn is_temporal(name: &str) -> bool {
    name.contains(".temporal.")
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Named parameter tensors. Missing names are created on first request with
/// an initializer seeded by `(seed, name)`, so values never depend on the
/// order in which layers are built.
#[derive(Clone, Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    seed: u64,
    trainable: Trainable,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self { vars: BTreeMap::new(), dtype, seed, trainable: Trainable::All }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Parameters outside `trainable` are handed to layers detached.
    pub fn set_trainable(&mut self, trainable: Trainable) {
        self.trainable = trainable;
    }

    pub fn trainable(&self) -> Trainable {
        self.trainable
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Vars selected by the current trainable policy.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.vars.iter().filter(|(k, _)| self.trainable.allows(k)).map(|(_, v)| v.clone()).collect()
    }

    pub fn insert(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let t = tensor.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    /// Deep copy with every tensor cast to `dtype`.
    pub fn cast(&self, dtype: DType) -> Result<ParamStore> {
        let mut out = ParamStore { vars: BTreeMap::new(), dtype, seed: self.seed, trainable: self.trainable };
        for (k, v) in &self.vars {
            out.insert(k, &v.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    /// Fails on any non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        for (k, v) in &self.vars {
            let s = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if s.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {k}")));
            }
        }
        Ok(())
    }

    /// Returns the parameter `name`, creating it if absent.
    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let var = match self.vars.get(name) {
            Some(v) => {
                if v.dims() != shape {
                    return Err(Error::Shape(format!("parameter {name}: stored {:?}, expected {shape:?}", v.dims())));
                }
                v.clone()
            }
            None => {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform(bound) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                    }
                };
                let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
                let v = Var::from_tensor(&t)?;
                self.vars.insert(name.to_string(), v.clone());
                v
            }
        };
        Ok(if self.trainable.allows(name) { var.as_tensor().clone() } else { var.as_tensor().detach() })
    }
}
