//! Layers and probability distributions built on the autodiff engine.

pub mod dist;
mod layers;

pub use layers::{CnnEncoder, GruCell, Linear, Mlp};

use rand::Rng;

use crate::scalar::{lit, Scalar};
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor};

/// A graph paired with the parameter store its layers read from.
#[derive(Clone, Copy)]
pub struct Ctx<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    pub store: &'g ParamStore<T>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>) -> Self {
        Self { graph, store }
    }

    pub fn param(&self, id: ParamId) -> Tensor<'g, T> {
        self.graph.param(self.store, id)
    }
}

/// Uniform fan-in initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| lit(rng.random_range(-bound..bound))).collect()
}

/// Adds a parameter initialised with [`uniform_fan_in`].
pub fn add_uniform<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    group: ParamGroup,
) -> ParamId {
    let n = shape.iter().product();
    store.add(name, shape, uniform_fan_in(rng, fan_in, n), group)
}
