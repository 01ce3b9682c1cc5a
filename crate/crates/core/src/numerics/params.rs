use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::real::Real;
use crate::numerics::tensor::Tensor;

/// Initialization scheme for a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    UniformFanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct Entry<R: Real> {
    value: Tensor<R>,
    grad: Tensor<R>,
}

/// Named parameter tensors plus accumulated gradients. Iteration order is the
/// name order (BTreeMap), so optimizer sweeps are deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore<R: Real> {
    entries: BTreeMap<String, Entry<R>>,
    seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl<R: Real> ParamStore<R> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Seed for one named parameter, derived from the global seed so that
    /// adding or removing other parameters never shifts anyone's stream.
    fn param_seed(&self, name: &str) -> u64 {
        splitmix64(self.seed ^ fnv1a(name.as_bytes()))
    }

    /// Fetch a parameter, creating it with `init` on first use.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<&Tensor<R>> {
        if !self.entries.contains_key(name) {
            let value = self.init_tensor(name, shape, init);
            let grad = Tensor::zeros(shape.to_vec());
            self.entries.insert(
                name.to_string(),
                Entry { value, grad },
            );
        }
        let entry = &self.entries[name];
        if entry.value.shape() != shape {
            return Err(Error::Dimension(format!(
                "parameter {name} has shape {:?}, requested {shape:?}",
                entry.value.shape()
            )));
        }
        Ok(&self.entries[name].value)
    }

    fn init_tensor(&self, name: &str, shape: &[usize], init: Init) -> Tensor<R> {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![R::ZERO; numel],
            Init::Ones => vec![R::ONE; numel],
            Init::UniformFanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.param_seed(name));
                (0..numel)
                    .map(|_| R::from_f64(rng.random_range(-bound..bound)))
                    .collect()
            }
        };
        Tensor::new(shape.to_vec(), data).expect("init shape/data consistent")
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<R>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<R>> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<R>) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(e) => {
                if e.value.shape() != value.shape() {
                    return Err(Error::Dimension(format!(
                        "set_value shape mismatch for {name}"
                    )));
                }
                e.value = value;
                Ok(())
            }
            None => {
                let grad = Tensor::zeros(value.shape().to_vec());
                self.entries.insert(name.to_string(), Entry { value, grad });
                Ok(())
            }
        }
    }

    /// Add `delta` into the stored gradient of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor<R>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter {name}")))?;
        if e.grad.shape() != delta.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape mismatch for {name}"
            )));
        }
        for (g, d) in e.grad.data_mut().iter_mut().zip(delta.data().iter()) {
            *g += *d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(R::ZERO);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>, &Tensor<R>)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.value, &e.grad))
    }

    /// In-place update of every parameter: `f(name, value, grad)`.
    pub fn update_each(&mut self, mut f: impl FnMut(&str, &mut Tensor<R>, &Tensor<R>)) {
        for (name, e) in self.entries.iter_mut() {
            f(name, &mut e.value, &e.grad);
        }
    }

    /// Export values as `(name, shape, f64 data)` rows for persistence.
    pub fn export(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.value.shape().to_vec(), e.value.to_f64_vec()))
            .collect()
    }

    /// Restore values previously produced by `export`.
    pub fn import(&mut self, rows: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        for (name, shape, data) in rows {
            let value = Tensor::from_f64s(shape.clone(), data)?;
            self.set_value(name, value)?;
        }
        Ok(())
    }
}
