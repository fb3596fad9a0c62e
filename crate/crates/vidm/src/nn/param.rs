//! Named parameter storage with accumulated gradients.
//!
//! Layers hold `ParamId` handles into a per-model `ParamStore`; the optimizer,
//! checkpoint writer, and gradient probes all walk the store by index, which
//! keeps update order and serialization order identical across runs.

use ndarray::ArrayD;

use crate::num::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<F: Real> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

#[derive(Debug, Clone)]
pub struct ParamStore<F: Real> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        self.entries.push(ParamEntry { name, value, grad });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].grad
    }

    pub fn accum_grad(&mut self, id: ParamId, delta: &ArrayD<F>) {
        self.entries[id.0].grad.zip_mut_with(delta, |g, &d| {
            *g = *g + d;
        });
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(F::from_f64(0.0));
        }
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Perturb one scalar of one parameter (finite-difference probes).
    pub fn nudge(&mut self, id: ParamId, flat_index: usize, delta: F) {
        let v = self.entries[id.0]
            .value
            .as_slice_mut()
            .expect("parameters are contiguous");
        v[flat_index] = v[flat_index] + delta;
    }

    /// Bitwise equality of parameter values (names and shapes included).
    pub fn values_equal(&self, other: &ParamStore<F>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.value.shape() == b.value.shape() && a.value == b.value
            })
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal(0, sqrt(2 / fan_in)); the default for convs and linears.
    He { fan_in: usize },
    /// Uniform(-1/fan_in, 1/fan_in); first layer of sine-activated MLPs.
    SirenFirst { fan_in: usize },
    /// Uniform(-sqrt(6/fan_in)/omega, +sqrt(6/fan_in)/omega).
    SirenHidden { fan_in: usize, omega: f64 },
    Zero,
    Const(f64),
}

impl Init {
    pub fn sample<F: Real>(self, shape: &[usize], rng: &mut Rng) -> ArrayD<F> {
        match self {
            Init::He { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                let mut arr = ArrayD::zeros(ndarray::IxDyn(shape));
                for v in arr.iter_mut() {
                    *v = F::from_f64(rng.normal_f64() * std);
                }
                arr
            }
            Init::SirenFirst { fan_in } => {
                let lim = 1.0 / fan_in as f64;
                let mut arr = ArrayD::zeros(ndarray::IxDyn(shape));
                for v in arr.iter_mut() {
                    *v = rng.uniform(-lim, lim);
                }
                arr
            }
            Init::SirenHidden { fan_in, omega } => {
                let lim = (6.0 / fan_in as f64).sqrt() / omega;
                let mut arr = ArrayD::zeros(ndarray::IxDyn(shape));
                for v in arr.iter_mut() {
                    *v = rng.uniform(-lim, lim);
                }
                arr
            }
            Init::Zero => ArrayD::zeros(ndarray::IxDyn(shape)),
            Init::Const(c) => ArrayD::from_elem(ndarray::IxDyn(shape), F::from_f64(c)),
        }
    }
}
