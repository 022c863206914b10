//! Named parameter storage and the composite layers of the network.

mod cost;
mod layers;

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tape, Tensor, Var};

pub use cost::{conv_flops, depthwise_flops, pointwise_flops, Cost};
pub use layers::{
    Conv, ConvSpec, Depthwise, DwSepConv, DwSepConvSpec, InceptionRef, InceptionRefSpec, MultiScaleBlock,
    MultiScaleBlockSpec, Pointwise,
};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    /// The tape variable bound to this parameter by [`ParamStore::bind`].
    pub fn var(self, bound: &[Var]) -> Var {
        bound[self.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, uniquely named parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            trainable: true,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Element count over trainable parameters.
    pub fn num_trainable_elements(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Same names and shapes, new values (in store order).
    pub fn with_values<U: Element>(&self, values: Vec<Tensor<U>>) -> Result<ParamStore<U>> {
        if values.len() != self.params.len() {
            return Err(Error::config(format!(
                "{} values for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        let params = self
            .params
            .iter()
            .zip(values)
            .map(|(p, t)| {
                if t.shape() != p.tensor.shape() {
                    return Err(Error::config(format!(
                        "parameter {} expects shape {}, got {}",
                        p.name,
                        p.tensor.shape(),
                        t.shape()
                    )));
                }
                Ok(Parameter {
                    name: p.name.clone(),
                    tensor: t,
                    trainable: p.trainable,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ParamStore {
            params,
            index: self.index.clone(),
        })
    }

    /// Records every parameter as a tagged leaf; the returned vector is
    /// indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p.tensor.clone()))
            .collect()
    }
}

/// He-uniform initialisation: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform<R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<f32> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

pub fn bias_shape(channels: usize) -> Shape {
    Shape::new(1, channels, 1, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(Shape::scalar())).unwrap();
        assert!(matches!(s.add("a", Tensor::zeros(Shape::scalar())), Err(Error::Config(_))));
    }

    #[test]
    fn bind_tags_every_parameter() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::ones(Shape::new(1, 1, 1, 2))).unwrap();
        let b = s.add("b", Tensor::ones(Shape::new(1, 1, 1, 2))).unwrap();
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let y = tape.add(a.var(&p), b.var(&p)).unwrap();
        let y = tape.sum(y).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param(a.index()).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.param(b.index()).unwrap(), &[1.0, 1.0]);
    }
}
