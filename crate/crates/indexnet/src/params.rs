use crate::tensor::Tensor;

/// Uniform access to a model's trainable tensors.
///
/// `params` and `params_mut` list the same tensors in the same order; gradient
/// vectors produced by the network modules follow that order too.
pub trait Parameterized {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}
