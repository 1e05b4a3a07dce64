use dcl_tensor::{Graph, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    /// Weight drawn from N(0, 0.02).
    pub(crate) fn push_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut R) {
        let dist = Normal::new(0.0, 0.02).expect("valid std");
        self.push(name, Tensor::from_fn(shape, |_| T::lit(dist.sample(rng))));
    }

    pub(crate) fn push_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.push(name, Tensor::zeros(shape));
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Place every tensor on `g`, as trainable leaves or as constants.
    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: bool) -> Vec<Var<'g, T>> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Sequential reader over bound parameters; forward passes consume them in
/// construction order.
pub(crate) struct Cursor<'a, 'g, T: Real> {
    vars: &'a [Var<'g, T>],
    pos: usize,
}

impl<'a, 'g, T: Real> Cursor<'a, 'g, T> {
    pub fn new(vars: &'a [Var<'g, T>]) -> Self {
        Self { vars, pos: 0 }
    }

    pub fn next(&mut self) -> Var<'g, T> {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub fn finish(self) {
        debug_assert_eq!(self.pos, self.vars.len(), "parameters left unused");
    }
}
