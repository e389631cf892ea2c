//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain shape + row-major buffer. [`Tape`] records
//! operations during a forward pass and replays them backwards to produce
//! gradients; [`store::ParamStore`] holds named trainable tensors together
//! with their Adam state. Everything is single-threaded and deterministic:
//! the same seed always produces bit-identical forward values and updates.

mod tape;

pub mod gradcheck;
pub mod nn;
pub mod store;

pub use nn::{
    bind_conv, bind_linear, bind_lstm, conv, init_conv, init_linear, init_lstm, linear,
    lstm_sequence, lstm_step, mean_pool, row_leaves, xavier, ConvVars, LinearVars, LstmVars,
};
pub use store::{Adam, GradMap, ParamStore};
pub use tape::{Gradients, Tape, Var};

/// Dense row-major f32 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build from shape and data. Panics if the element count disagrees
    /// with the shape product or any dimension is zero.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor: zero dimension in shape {shape:?}"
        );
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor: shape {shape:?} wants {n} elements, got {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn from_slice(shape: &[usize], data: &[f32]) -> Self {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_checked() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic(expected = "wants 6 elements")]
    fn bad_length_rejected() {
        Tensor::new(vec![2, 3], vec![0.0; 5]);
    }
}
