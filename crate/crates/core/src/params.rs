//! Flat named parameter storage shared by the generator, discriminator and
//! classifier head. Models register parameters at construction and refer to
//! them by id; binding a store to a tape yields one leaf per parameter in
//! registration order, which keeps optimizer state, checkpoints and gradient
//! audits aligned.

use ndarray::IxDyn;
use rand::{Rng, RngCore};

use crate::tape::{Arr, Tape, Var};

pub type ParamId = usize;

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name '{}'",
            name
        );
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.values[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Insert every parameter as a leaf on `tape`, in registration order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Binding<'t> {
        Binding { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }
}

/// Tape-bound view of a [`ParamStore`].
pub struct Binding<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Binding<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Xavier-uniform matrix [rows, cols].
pub fn xavier2(rng: &mut dyn RngCore, rows: usize, cols: usize) -> Arr {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Arr::from_shape_simple_fn(IxDyn(&[rows, cols]), || rng.gen_range(-bound..bound))
}

/// Xavier-uniform tensor with explicit fan sizes (for convolution kernels).
pub fn xavier_shaped(rng: &mut dyn RngCore, shape: &[usize], fan_in: usize, fan_out: usize) -> Arr {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Arr::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..bound))
}

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    Arr::ones(IxDyn(shape))
}
