use std::cell::RefCell;
use std::sync::Arc;

use indexmap::IndexMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Grads, Graph, Var};
use crate::tensor::Tensor;

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Element> {
    entries: IndexMap<String, Arc<Tensor<T>>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(Arc::as_ref)
    }

    /// Copy-on-write access; free when no graph still holds the tensor.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(Arc::make_mut)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|t| t.is_finite())
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
            })
    }

    /// Checks that `self` has exactly the names and shapes of `reference`,
    /// naming the first offending parameter otherwise.
    pub fn check_schema(&self, reference: &ParamSet<T>) -> Result<()> {
        for (name, expected) in reference.iter() {
            match self.get(name) {
                None => return Err(TensorError::UnknownParam(name.to_string())),
                Some(found) if found.shape() != expected.shape() => {
                    return Err(TensorError::ParamShape {
                        name: name.to_string(),
                        expected: expected.shape().to_vec(),
                        found: found.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.names().find(|n| reference.get(n).is_none()) {
            return Err(TensorError::UnknownParam(extra.to_string()));
        }
        Ok(())
    }

    pub fn bind<'g, 'p>(&'p self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, 'p, T> {
        Bound {
            graph,
            params: self,
            trainable,
            ids: RefCell::new(vec![None; self.len()]),
        }
    }
}

/// A parameter set attached to one graph. Each parameter becomes a single
/// leaf, so weight sharing (recurrent convolutions) accumulates correctly.
pub struct Bound<'g, 'p, T: Element> {
    graph: &'g Graph<T>,
    params: &'p ParamSet<T>,
    trainable: bool,
    ids: RefCell<Vec<Option<usize>>>,
}

impl<'g, T: Element> Bound<'g, '_, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.entries.contains_key(name)
    }

    /// Panics on an unknown name: schemas are validated when parameters are
    /// created or loaded.
    pub fn var(&self, name: &str) -> Var<'g, T> {
        let (idx, _, value) = self
            .params
            .entries
            .get_full(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from set"));
        let mut ids = self.ids.borrow_mut();
        if let Some(id) = ids[idx] {
            return Var { graph: self.graph, id };
        }
        let v = self.graph.leaf_shared(value.clone(), self.trainable);
        ids[idx] = Some(v.id);
        v
    }

    /// Moves this set's gradients out of a backward result.
    pub fn grads(&self, grads: &mut Grads<T>) -> ParamGrads<T> {
        let ids = self.ids.borrow();
        ParamGrads {
            grads: ids.iter().map(|id| id.and_then(|id| grads.take_id(id))).collect(),
        }
    }
}

/// Gradients aligned with a [`ParamSet`]'s order.
#[derive(Clone, Debug)]
pub struct ParamGrads<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> ParamGrads<T> {
    pub fn get(&self, index: usize) -> Option<&Tensor<T>> {
        self.grads.get(index).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: ParamGrads<T>) {
        for (a, b) in self.grads.iter_mut().zip(other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(&b),
                (None, Some(b)) => *a = Some(b),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        let s = T::lit(s);
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_parameter_accumulates() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Tensor::from_f64(&[1], &[3.0]).unwrap());
        let g = Graph::new();
        let b = ps.bind(&g, true);
        let x = g.constant(Tensor::from_f64(&[1], &[2.0]).unwrap());
        // y = w * (w * x) -> dy/dw = 2 w x
        let y = b.var("w").mul(b.var("w").mul(x)).sum();
        let mut grads = g.backward(y);
        let pg = b.grads(&mut grads);
        assert_eq!(pg.get(0).unwrap().data(), &[12.0]);
    }

    #[test]
    fn schema_mismatch_names_parameter() {
        let mut a = ParamSet::<f32>::new();
        a.insert("enc.w", Tensor::zeros(&[2, 2]));
        let mut b = ParamSet::<f32>::new();
        b.insert("enc.w", Tensor::zeros(&[3, 2]));
        let err = b.check_schema(&a).unwrap_err().to_string();
        assert!(err.contains("enc.w"), "{err}");
    }
}
