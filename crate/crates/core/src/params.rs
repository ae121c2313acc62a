//! Named parameter storage, per-pass binding onto a gradient tape, and the
//! convolution layer every network block is built from.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tdstereo_tensor::{ConvSpec, Graph, Tensor, Var};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of weight tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites every parameter with the same-named tensor of `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(invalid(format!(
                "parameter count mismatch: model has {}, source has {}",
                self.len(),
                other.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .id(name)
                .ok_or_else(|| invalid(format!("missing parameter {name}")))?;
            let t = other.get(src);
            if t.shape() != self.values[i].shape() {
                return Err(invalid(format!(
                    "parameter {name}: shape {:?} does not match model shape {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}

/// A gradient tape with the model parameters bound lazily as leaves.
///
/// Binding the same [`ParamId`] twice yields the same [`Var`], so weights
/// shared between branches accumulate gradient from every use.
pub struct Tape<'s> {
    graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .graph
            .leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradients aligned with the store; parameters that were never bound
    /// or received no gradient come back as `None`.
    pub fn param_grads(&self) -> Vec<Option<&Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.graph.grad(v)))
            .collect()
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }
}

impl Deref for Tape<'_> {
    type Target = Graph;

    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Tape<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Kaiming normal for a leaky-rectified layer with the given slope.
    He { slope: f64 },
    /// Kaiming normal scaled by an extra factor.
    ScaledHe { slope: f64, scale: f64 },
    Zeros,
    Constant(f64),
    Uniform { low: f64, high: f64 },
    Exact(Tensor),
}

/// Creates parameters under a name prefix with a deterministic RNG.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> ParamBuilder<'b> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let fan_in: usize = shape.iter().skip(1).product();
        let value = match init {
            Init::He { slope } => self.kaiming(shape, fan_in, slope, 1.0)?,
            Init::ScaledHe { slope, scale } => self.kaiming(shape, fan_in, slope, scale)?,
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Constant(c) => Tensor::full(shape.to_vec(), c),
            Init::Uniform { low, high } => {
                use rand::Rng;
                let rng = &mut *self.rng;
                Tensor::from_fn(shape.to_vec(), |_| rng.random_range(low..high))
            }
            Init::Exact(t) => {
                if t.shape() != shape {
                    return Err(invalid(format!(
                        "initial value for {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                t
            }
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.insert(full, value)
    }

    fn kaiming(&mut self, shape: &[usize], fan_in: usize, slope: f64, scale: f64) -> Result<Tensor> {
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        let std = scale * gain / (fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        let rng = &mut *self.rng;
        Ok(Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng)))
    }

    /// A convolution layer. `kernel` lists the spatial extents (two or
    /// three of them); transposed layers store kernels as `in×out×k…`.
    pub fn conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: &[usize],
        spec: ConvSpec,
        weight: Init,
        bias: Option<Init>,
    ) -> Result<Conv> {
        let mut shape = if spec.transposed {
            vec![in_ch, out_ch]
        } else {
            vec![out_ch, in_ch]
        };
        shape.extend_from_slice(kernel);
        let mut scope = self.scope(name);
        let weight = scope.tensor("weight", &shape, weight)?;
        let bias = match bias {
            Some(init) => Some(scope.tensor("bias", &[out_ch], init)?),
            None => None,
        };
        Ok(Conv { weight, bias, spec })
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        Ok(tape.conv(x, w, b, &self.spec)?)
    }

    /// Convolution followed by a leaky rectifier.
    pub fn forward_leaky(&self, tape: &mut Tape, x: Var, slope: f64) -> Result<Var> {
        let y = self.forward(tape, x)?;
        Ok(tape.leaky_relu(y, slope)?)
    }
}
