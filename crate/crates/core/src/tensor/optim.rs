use std::collections::HashMap;

use super::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers such as batch-norm running statistics are stored alongside
    /// parameters but never receive gradients.
    pub trainable: bool,
}

/// Ordered, named parameter registry. Order is insertion order and defines
/// the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, trainable });
        Ok(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.params[self.id(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let id = self.id(name)?;
        Ok(&mut self.params[id].value)
    }

    pub fn by_id(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Number of trainable scalars in parameters whose name starts with `prefix`.
    pub fn trainable_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Plain stochastic gradient descent: `p ← p − lr·g`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    learning_rate: f64,
}

impl Sgd {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and non-negative, got {learning_rate}")));
        }
        Ok(Self { learning_rate })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_slice<T: Float>(&self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), grads.len());
        let lr = T::of(self.learning_rate);
        params.iter_mut().zip(grads).for_each(|(p, &g)| *p -= lr * g);
    }

    /// Applies `(param id, gradient)` pairs. Non-trainable entries are skipped.
    pub fn step<T: Float>(&self, store: &mut ParamStore<T>, grads: &[(usize, Tensor<T>)]) -> Result<()> {
        for (id, g) in grads {
            let p = store.by_id_mut(*id);
            if !p.trainable {
                continue;
            }
            if p.value.shape() != g.shape() {
                return Err(Error::shape(format!("gradient for `{}` has shape {:?}", p.name, g.shape())));
            }
            self.step_slice(p.value.data_mut(), g.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_matches_rule() {
        let sgd = Sgd::new(0.005).unwrap();
        let mut p = [1.0f64];
        sgd.step_slice(&mut p, &[2.0]);
        assert!((p[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn quadratic_decays_geometrically() {
        // f(p) = p², f'(p) = 2p; each step multiplies p by (1 − 0.2).
        let sgd = Sgd::new(0.1).unwrap();
        let mut p = [1.0f64];
        for _ in 0..100 {
            let g = [2.0 * p[0]];
            sgd.step_slice(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-8, "p = {}", p[0]);
        assert!((p[0] - 0.8f64.powi(100)).abs() < 1e-20);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f32>::new();
        let id = store.insert("w", Tensor::from_vec(vec![0.5, -1.5]), true).unwrap();
        let before = store.clone();
        Sgd::new(0.3).unwrap().step(&mut store, &[(id, Tensor::zeros(vec![2]))]).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut store = ParamStore::<f32>::new();
        let id = store.insert("running", Tensor::from_vec(vec![1.0]), false).unwrap();
        Sgd::new(1.0).unwrap().step(&mut store, &[(id, Tensor::from_vec(vec![5.0]))]).unwrap();
        assert_eq!(store.get("running").unwrap().data(), &[1.0]);
    }

    #[test]
    fn rejects_duplicates_and_bad_rates() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::zeros(vec![1]), true).unwrap();
        assert!(store.insert("a", Tensor::zeros(vec![1]), true).is_err());
        assert!(Sgd::new(-1.0).is_err());
        assert!(Sgd::new(f64::NAN).is_err());
    }
}
