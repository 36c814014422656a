//! Named parameter arrays and their initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Handles to every parameter of a store after binding it into a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| g.param(i, &p.value))
                .collect(),
        }
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Tensor::new(
                        p.value.shape.clone(),
                        p.value.data.iter().map(|v| U::of(v.f64())).collect(),
                    ),
                })
                .collect(),
        }
    }
}

pub fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(dist.sample(rng))).collect())
}

/// He-normal for a weight whose rows are fan-in.
pub fn he_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let fan_in = shape[0] as f64;
    normal(rng, shape, (2.0 / fan_in).sqrt())
}

pub fn constant<T: Real>(shape: &[usize], v: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![T::of(v); n])
}
