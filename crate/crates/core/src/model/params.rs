use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Named parameter tensors in declaration order. The order is part of the
/// checkpoint format.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Initialization rule for a freshly declared parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    /// Xavier-normal for a square `d × d` projection: std `√(1/d)`.
    Xavier,
    Ones,
    Zeros,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its slot. Names must be unique.
    pub fn declare<R: Rng + ?Sized>(&mut self, name: &str, shape: Vec<usize>, init: Init, rng: &mut R) -> usize {
        assert!(self.slot(name).is_none(), "parameter {name} declared twice");
        let t = match init {
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Xavier => {
                let fan = shape[0] as f64;
                let fan_out = *shape.last().unwrap() as f64;
                Tensor::randn(shape, (2.0 / (fan + fan_out)).sqrt(), rng)
            }
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Zeros => Tensor::zeros(shape),
        };
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slot(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slot(name).map(|i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// A forward pass in progress: the tape plus lazily bound parameter leaves.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Ctx<'a> {
    /// With `trainable`, parameters are differentiable leaves; otherwise
    /// constants, so nothing is retained for a backward pass.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self { g: Graph::new(), store, bound: vec![None; store.len()], trainable }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for parameter `name`, created on first use.
    pub fn p(&mut self, name: &str) -> Var {
        let slot = self.store.slot(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.bound[slot] {
            return v;
        }
        let value = self.store.tensors[slot].clone();
        let v = if self.trainable { self.g.param(value) } else { self.g.constant(value) };
        self.bound[slot] = Some(v);
        v
    }

    /// Leaves bound so far, by store slot.
    pub fn bound(&self) -> &[Option<Var>] {
        &self.bound
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn declaration_order_and_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.declare("b", vec![2, 2], Init::Xavier, &mut rng);
        s.declare("a", vec![3], Init::Ones, &mut rng);
        assert_eq!(s.names(), &["b".to_string(), "a".to_string()]);
        assert_eq!(s.get("a").unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(s.numel(), 7);
        let mut cx = Ctx::new(&s, true);
        let a1 = cx.p("a");
        assert_eq!(a1, cx.p("a"));
        assert!(cx.bound()[0].is_none());
    }
}
