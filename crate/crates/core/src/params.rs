//! Named parameter tensors with seeded initialization.
//!
//! Trainable entries are candle [`Var`]s; frozen entries are plain tensors
//! that never enter the autograd graph.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::tensor_io::RawTensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Weight + bias specs for a dense layer, fan-in scaled.
pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize, zero: bool) -> Vec<ParamSpec> {
    let w = if zero {
        Init::Zeros
    } else {
        Init::Normal(1.0 / (d_in as f64).sqrt())
    };
    vec![
        ParamSpec::new(format!("{prefix}.weight"), &[d_out, d_in], w),
        ParamSpec::new(format!("{prefix}.bias"), &[d_out], Init::Zeros),
    ]
}

#[derive(Debug, Clone)]
enum Param {
    Trainable(Var),
    Frozen(Tensor),
}

impl Param {
    fn tensor(&self) -> &Tensor {
        match self {
            Param::Trainable(v) => v.as_tensor(),
            Param::Frozen(t) => t,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

fn name_stream(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

fn materialize(spec: &ParamSpec, seed: u64) -> Vec<f64> {
    let n: usize = spec.shape.iter().product();
    match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(name_stream(seed, &spec.name));
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect()
        }
    }
}

impl ParamSet {
    pub fn init(
        specs: &[ParamSpec],
        seed: u64,
        dtype: DType,
        device: &Device,
        trainable: bool,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for spec in specs {
            let values = materialize(spec, seed);
            let t = Tensor::from_vec(values, spec.shape.as_slice(), device)?.to_dtype(dtype)?;
            let p = if trainable {
                Param::Trainable(Var::from_tensor(&t)?)
            } else {
                Param::Frozen(t)
            };
            if entries.insert(spec.name.clone(), p).is_some() {
                return Err(Error::contract(format!(
                    "duplicate parameter `{}`",
                    spec.name
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Rebuilds a set from decoded tensors, checking names and shapes against `specs`.
    pub fn from_raw(
        specs: &[ParamSpec],
        raw: &BTreeMap<String, RawTensor>,
        dtype: DType,
        device: &Device,
        trainable: bool,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for spec in specs {
            let r = raw
                .get(&spec.name)
                .ok_or_else(|| Error::contract(format!("missing tensor `{}`", spec.name)))?;
            if r.shape != spec.shape {
                return Err(Error::contract(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    spec.name, r.shape, spec.shape
                )));
            }
            let t = r.to_tensor(dtype, device)?;
            let p = if trainable {
                Param::Trainable(Var::from_tensor(&t)?)
            } else {
                Param::Frozen(t)
            };
            entries.insert(spec.name.clone(), p);
        }
        if let Some(extra) = raw.keys().find(|k| !entries.contains_key(*k)) {
            return Err(Error::contract(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.entries
            .get(name)
            .map(|p| p.tensor().clone())
            .ok_or_else(|| Error::contract(format!("no parameter named `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.tensor().elem_count()).sum()
    }

    pub fn is_trainable(&self) -> bool {
        self.entries
            .values()
            .all(|p| matches!(p, Param::Trainable(_)))
    }

    /// Trainable variables in name order. Frozen entries are skipped.
    pub fn vars(&self) -> Vec<(&str, &Var)> {
        self.entries
            .iter()
            .filter_map(|(k, p)| match p {
                Param::Trainable(v) => Some((k.as_str(), v)),
                Param::Frozen(_) => None,
            })
            .collect()
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, p)| (k.as_str(), p.tensor()))
    }

    /// Detached copies: the result holds no variables.
    pub fn frozen(&self) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|(k, p)| Ok((k.clone(), Param::Frozen(p.tensor().detach().copy()?))))
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    /// Fresh trainable copies that do not alias the originals.
    pub fn trainable_copy(&self) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|(k, p)| {
                Ok((
                    k.clone(),
                    Param::Trainable(Var::from_tensor(&p.tensor().detach().copy()?)?),
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn to_raw(&self) -> Result<BTreeMap<String, RawTensor>> {
        self.entries
            .iter()
            .map(|(k, p)| Ok((k.clone(), RawTensor::from_tensor(p.tensor())?)))
            .collect()
    }

    /// SHA-256 over every parameter's name and native-precision bytes.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, p) in &self.entries {
            h.update(k.as_bytes());
            let t = p.tensor().flatten_all()?;
            match t.dtype() {
                DType::F64 => t
                    .to_vec1::<f64>()?
                    .iter()
                    .for_each(|v| h.update(v.to_le_bytes())),
                _ => t
                    .to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .for_each(|v| h.update(v.to_le_bytes())),
            }
        }
        Ok(crate::hex(&h.finalize()))
    }

    /// Overwrites one trainable parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        match self.entries.get(name) {
            Some(Param::Trainable(v)) => Ok(v.set(value)?),
            Some(Param::Frozen(_)) => Err(Error::contract(format!("parameter `{name}` is frozen"))),
            None => Err(Error::contract(format!("no parameter named `{name}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        let mut s = linear_specs("a", 3, 2, false);
        s.extend(linear_specs("b", 2, 2, true));
        s
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = ParamSet::init(&specs(), 7, DType::F32, &Device::Cpu, true).unwrap();
        let b = ParamSet::init(&specs(), 7, DType::F32, &Device::Cpu, true).unwrap();
        let c = ParamSet::init(&specs(), 8, DType::F32, &Device::Cpu, true).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        assert_ne!(a.checksum().unwrap(), c.checksum().unwrap());
        let zero = b.get("b.weight").unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(zero.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn frozen_sets_hold_no_vars() {
        let a = ParamSet::init(&specs(), 1, DType::F64, &Device::Cpu, true).unwrap();
        assert_eq!(a.vars().len(), 4);
        let f = a.frozen().unwrap();
        assert!(f.vars().is_empty());
        assert_eq!(f.checksum().unwrap(), a.checksum().unwrap());
        assert!(f
            .set(
                "a.bias",
                &Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap()
            )
            .is_err());
    }

    #[test]
    fn raw_roundtrip_checks_shapes() {
        let a = ParamSet::init(&specs(), 1, DType::F32, &Device::Cpu, false).unwrap();
        let raw = a.to_raw().unwrap();
        let b = ParamSet::from_raw(&specs(), &raw, DType::F32, &Device::Cpu, false).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        let mut bad = raw.clone();
        bad.insert(
            "a.bias".into(),
            RawTensor::new(vec![3], vec![0.0; 3]).unwrap(),
        );
        let err = ParamSet::from_raw(&specs(), &bad, DType::F32, &Device::Cpu, false).unwrap_err();
        assert!(err.to_string().contains("a.bias"));
    }
}
