//! Named parameter storage and the small layers built on it.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named trainable tensors.
///
/// Tensors are shared with tapes through `Arc`; after a tape is dropped,
/// updates through [`ParamStore::get_mut`] do not copy.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(Arc::new(tensor));
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.tensors[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        if tensor.shape() != self.get(id).shape() {
            return Err(Error::shape(
                "param_store",
                format!("{}: {:?} vs {:?}", self.names[id.0], tensor.shape(), self.get(id).shape()),
            ));
        }
        self.tensors[id.0] = Arc::new(tensor);
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t.as_ref()))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Mutable access to several distinct parameters at once, in the order
    /// given.
    pub fn get_many_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor<T>> {
        let mut slots: Vec<Option<&mut Arc<Tensor<T>>>> = self.tensors.iter_mut().map(Some).collect();
        ids.iter()
            .map(|id| Arc::make_mut(slots[id.0].take().expect("distinct parameter ids")))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values of the selected
    /// parameters.
    pub fn digest(&self, select: impl Fn(ParamId) -> bool) -> String {
        let mut h = Sha256::new();
        for (id, name, t) in self.iter() {
            if !select(id) {
                continue;
            }
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Places each parameter on the tape; `trainable` decides which receive
    /// gradients. `overrides` substitutes values for selected ids.
    pub fn new<T: Scalar>(
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        trainable: impl Fn(ParamId) -> bool,
        overrides: &HashMap<ParamId, Arc<Tensor<T>>>,
    ) -> Self {
        let vars = store
            .ids()
            .map(|id| {
                let value = overrides.get(&id).cloned().unwrap_or_else(|| store.shared(id));
                tape.leaf(value, trainable(id))
            })
            .collect();
        Self { vars }
    }

    pub fn all<T: Scalar>(store: &ParamStore<T>, tape: &mut Tape<T>, trainable: bool) -> Self {
        Self::new(store, tape, |_| trainable, &HashMap::new())
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Affine map `x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights uniform in ±1/√fan_in, zero bias.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[fan_in, fan_out], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b.var(self.weight))?;
        tape.add_row(y, b.var(self.bias))
    }

    pub fn scalar_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

impl LayerNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[width])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
            width,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, b.var(self.gain), b.var(self.bias))
    }
}

/// `Linear(ReLU(LayerNorm(x)))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rho {
    pub norm: LayerNorm,
    pub linear: Linear,
}

impl Rho {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: LayerNorm::init(store, &format!("{name}.norm"), fan_in),
            linear: Linear::init(store, &format!("{name}.linear"), fan_in, fan_out, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, b, x)?;
        let h = tape.relu(h);
        self.linear.forward(tape, b, h)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.norm.gain, self.norm.bias, self.linear.weight, self.linear.bias]
    }
}
