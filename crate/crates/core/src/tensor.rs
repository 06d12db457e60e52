//! Parameters and the registry that owns them.
//!
//! All parameters are stored as dense `f64` matrices. Logically 1-D tensors
//! (biases, layer-norm scales) keep their declared shape `[n]` but are stored
//! as a `1×n` matrix so the graph can treat every parameter uniformly.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::stream;

/// Default init range for weight matrices; biases start at zero.
pub const INIT_RANGE: f64 = 0.05;

/// A named tensor with an optional gradient and a freeze flag.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    name: String,
    /// Declared shape, e.g. `[768]` for a bias or `[768, 48]` for a weight.
    shape: Vec<usize>,
    /// Row-major storage; 1-D tensors are stored as a single row.
    values: Array2<f64>,
    /// Present after a backward pass has touched this parameter.
    grad: Option<Array2<f64>>,
    trainable: bool,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Array2<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 || expected != values.len() {
            return Err(Error::shape(
                "ParamTensor::new",
                &shape,
                &[values.nrows(), values.ncols()],
            ));
        }
        if shape.len() == 2 && (values.nrows() != shape[0] || values.ncols() != shape[1]) {
            return Err(Error::shape(
                "ParamTensor::new",
                &shape,
                &[values.nrows(), values.ncols()],
            ));
        }
        Ok(ParamTensor {
            name: name.into(),
            shape,
            values,
            grad: None,
            trainable: true,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&Array2<f64>> {
        self.grad.as_ref()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Number of scalar entries.
    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn accumulate_grad(&mut self, delta: &Array2<f64>) -> Result<()> {
        if delta.dim() != self.values.dim() {
            return Err(Error::shape(
                format!("grad for '{}'", self.name),
                &[self.values.nrows(), self.values.ncols()],
                &[delta.nrows(), delta.ncols()],
            ));
        }
        match &mut self.grad {
            Some(g) => *g += delta,
            None => self.grad = Some(delta.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Ordered collection of parameters; iteration order is insertion order, so
/// checksums and checkpoints are deterministic given the construction
/// sequence.
#[derive(Debug, Clone)]
pub struct ParamRegistry {
    params: IndexMap<String, ParamTensor>,
    pub rng_seed: u64,
}

impl ParamRegistry {
    pub fn new(rng_seed: u64) -> Self {
        ParamRegistry {
            params: IndexMap::new(),
            rng_seed,
        }
    }

    pub fn insert(&mut self, param: ParamTensor) -> Result<()> {
        if self.params.contains_key(param.name()) {
            return Err(Error::State(format!(
                "parameter '{}' already registered",
                param.name()
            )));
        }
        self.params.insert(param.name().to_string(), param);
        Ok(())
    }

    /// Weight matrix initialized uniform(-INIT_RANGE, INIT_RANGE) from the
    /// stream named after the parameter.
    pub fn add_weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let mut rng = stream(self.rng_seed, &format!("init:{name}"));
        let values = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-INIT_RANGE..INIT_RANGE));
        self.insert(ParamTensor::new(name, vec![rows, cols], values)?)
    }

    /// Weight matrix initialized to all zeros (adapter up-projections).
    pub fn add_zero_weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.insert(ParamTensor::new(
            name,
            vec![rows, cols],
            Array2::zeros((rows, cols)),
        )?)
    }

    /// 1-D parameter of zeros (biases, layer-norm shifts).
    pub fn add_zeros(&mut self, name: &str, len: usize) -> Result<()> {
        self.insert(ParamTensor::new(name, vec![len], Array2::zeros((1, len)))?)
    }

    /// 1-D parameter of ones (layer-norm scales).
    pub fn add_ones(&mut self, name: &str, len: usize) -> Result<()> {
        self.insert(ParamTensor::new(name, vec![len], Array2::ones((1, len)))?)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&ParamTensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::lookup("parameter", name, Vec::new()))
    }

    pub fn require_mut(&mut self, name: &str) -> Result<&mut ParamTensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::lookup("parameter", name, Vec::new()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn total_params(&self) -> usize {
        self.iter().map(ParamTensor::count).sum()
    }

    /// Total scalar count over trainable parameters only.
    pub fn trainable_params(&self) -> usize {
        self.iter()
            .filter(|p| p.trainable())
            .map(ParamTensor::count)
            .sum()
    }

    /// Set every parameter's freeze flag from a predicate on its name.
    pub fn set_trainable_where(&mut self, trainable: impl Fn(&str) -> bool) {
        for p in self.params.values_mut() {
            let t = trainable(p.name());
            p.set_trainable(t);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.zero_grad();
        }
    }

    /// Enforce the freezing contract: after backward, frozen parameters must
    /// report an all-zero gradient.
    pub fn zero_frozen_grads(&mut self) {
        for p in self.params.values_mut() {
            if !p.trainable() {
                p.zero_grad();
            }
        }
    }

    /// SHA-256 over the canonical encoding of every parameter whose name
    /// matches the filter, in registry order. Two registries agree on a
    /// checksum iff the selected parameters are bit-identical.
    pub fn checksum_where(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for p in self.iter().filter(|p| filter(p.name())) {
            hasher.update((p.name().len() as u32).to_le_bytes());
            hasher.update(p.name().as_bytes());
            hasher.update((p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in p.values().iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
