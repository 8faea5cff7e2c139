use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Trainable tensor with a stable name and its optimizer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    /// Layer path, e.g. `block1.layer0.conv.weight`; unique within a model.
    pub name: String,
    pub value: Tensor<T>,
    /// Momentum buffer; always shaped like `value`.
    pub velocity: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let velocity = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value,
            velocity,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
