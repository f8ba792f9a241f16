//! Named parameter storage and per-tape bindings.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Gradients, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for checkpoints and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<E: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    index: Arc<HashMap<String, usize>>,
}

impl<E: Real> Default for ParamStore<E> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: Arc::default() }
    }
}

impl<E: Real> ParamStore<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let i = self.names.len();
        Arc::make_mut(&mut self.index).insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    /// Dense layer `[fan_in, fan_out]` with N(0, 1/fan_in) weights and zero bias,
    /// stored as `{prefix}.w` and `{prefix}.b`.
    pub fn insert_linear<R: Rng + ?Sized>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<()> {
        self.insert(format!("{prefix}.w"), Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
    }

    /// Zero-initialized dense layer.
    pub fn insert_linear_zero(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.insert(format!("{prefix}.w"), Tensor::zeros(&[fan_in, fan_out]))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.tensors[i]).ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::invalid(format!("unknown parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<F: Real>(&self) -> ParamStore<F> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<E>) -> Result<Bound<'t, E>> {
        let vars = self.tensors.iter().map(|t| tape.param(t)).collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars, index: Arc::clone(&self.index) })
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<E>) -> Result<Bound<'t, E>> {
        let vars = self.tensors.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars, index: Arc::clone(&self.index) })
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t, E: Real> {
    vars: Vec<Var<'t, E>>,
    index: Arc<HashMap<String, usize>>,
}

impl<'t, E: Real> Bound<'t, E> {
    /// Uses already-recorded vars (in `store` order) as the parameters.
    pub fn from_vars(store: &ParamStore<E>, vars: Vec<Var<'t, E>>) -> Self {
        assert_eq!(vars.len(), store.len(), "one var per parameter");
        Bound { vars, index: Arc::clone(&store.index) }
    }

    pub fn var(&self, name: &str) -> Result<Var<'t, E>> {
        self.index.get(name).map(|&i| self.vars[i]).ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    /// `x @ w + b` using `{prefix}.w` / `{prefix}.b`.
    pub fn linear(&self, prefix: &str, x: &Var<'t, E>) -> Result<Var<'t, E>> {
        x.matmul(&self.var(&format!("{prefix}.w"))?)?.add_last(&self.var(&format!("{prefix}.b"))?)
    }

    /// Gradients for every parameter in store order; missing ones are zero.
    pub fn collect_grads(&self, grads: &mut Gradients<E>) -> Vec<Vec<E>> {
        self.vars
            .iter()
            .map(|v| grads.take(v).unwrap_or_else(|| vec![E::zero(); v.value().numel()]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_lookup() {
        let mut p = ParamStore::<f32>::new();
        p.insert("b", Tensor::zeros(&[2])).unwrap();
        p.insert("a", Tensor::zeros(&[3])).unwrap();
        assert_eq!(p.names(), ["b", "a"]);
        assert_eq!(p.num_scalars(), 5);
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
        assert!(p.get("c").is_err());
    }

    #[test]
    fn bound_linear_gradients() {
        let mut p = ParamStore::<f64>::new();
        p.insert("l.w", Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap()).unwrap();
        p.insert("l.b", Tensor::new(&[1], vec![0.5]).unwrap()).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape).unwrap();
        let x = tape.constant(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
        let y = bound.linear("l", &x).unwrap().sum().unwrap();
        assert_eq!(y.item(), 11.5);
        let mut g = tape.backward(&y).unwrap();
        let grads = bound.collect_grads(&mut g);
        assert_eq!(grads, vec![vec![3.0, 4.0], vec![1.0]]);
    }
}
