use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, NnError, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization rule for a new parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / fan_in)`; for weights followed by ReLU.
    Relu {
        fan_in: usize,
    },
    /// Uniform in `±sqrt(3 / fan_in)`; unit output variance for unit inputs.
    Linear {
        fan_in: usize,
    },
    Uniform(f64),
}

/// Named, seeded collection of trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: ChaCha8Rng,
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Registers a parameter. Names must be unique within the store.
    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        let n: usize = shape.iter().product();
        let bound = match init {
            Init::Zeros | Init::Ones => 0.0,
            Init::Relu { fan_in } => (6.0 / fan_in.max(1) as f64).sqrt(),
            Init::Linear { fan_in } => (3.0 / fan_in.max(1) as f64).sqrt(),
            Init::Uniform(b) => b,
        };
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            _ => (0..n)
                .map(|_| self.rng.random_range(-1.0..=1.0) * bound)
                .collect(),
        };
        self.names.push(name.to_string());
        self.tensors
            .push(Tensor::from_vec(shape, data).expect("length matches shape"));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.input(t.clone())).collect())
    }

    /// Copies gradients from a graph after `backward`. Parameters that did
    /// not reach the loss receive zeros.
    pub fn collect_grads(&mut self, g: &Graph, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            let grad = g
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()]);
            t.set_grad(grad).expect("graph value has parameter shape");
        }
    }

    /// Adds gradients from another pass onto the stored ones.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            let Some(add) = g.grad(v) else { continue };
            let mut cur = t
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; add.len()]);
            cur.iter_mut().zip(add).for_each(|(c, a)| *c += a);
            t.set_grad(cur).expect("graph value has parameter shape");
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// All parameter values concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// All stored gradients concatenated in store order (zeros where absent).
    pub fn flatten_grads(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.len()],
            })
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(NnError::shape(
                "set_flat",
                format!(
                    "{} values for {} parameters",
                    values.len(),
                    self.num_scalars()
                ),
            ));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if values.len() != t.len() {
            return Err(NnError::shape(
                "set",
                format!("{} values for {:?}", values.len(), t.shape()),
            ));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Overwrites every parameter with uniform draws in `±scale`.
    pub fn randomize<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = rng.random_range(-scale..=scale);
            }
        }
    }
}
