use super::{Gradients, Tape, Tensor, TensorError, Var};

/// Named parameter tensors in a fixed canonical order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Places every parameter on `tape` as a leaf; the returned handles are
    /// aligned with the store's slots.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Gradients for each slot, in store order.
    pub fn collect_grads(&self, grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| grads.wrt(v)).collect()
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }
}

/// Plain gradient descent: `p ← p − lr·g` for every parameter.
///
/// Gradients are checked before anything is written, so a non-finite
/// gradient leaves `params` untouched.
pub fn sgd_step(params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<(), TensorError> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(TensorError::InvalidLearningRate(lr));
    }
    for (slot, g) in grads.iter().enumerate() {
        let p = params.get(slot);
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(TensorError::NonFiniteGradient { name: params.name(slot).to_string() });
        }
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
    }
    Ok(())
}
