use crate::error::{shape, Result};
use crate::features::{InputTensor, TENSOR_LEN};
use crate::scalar::Real;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err(&shape, "zero-sized dimension"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err(&shape, &format!("expects {len} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); len],
        }
    }

    /// Stacks input windows into an `(N, 2, 2, 11)` batch.
    pub fn from_inputs(inputs: &[InputTensor]) -> Result<Self> {
        if inputs.is_empty() {
            return Err(shape("empty input batch"));
        }
        let mut data = vec![T::zero(); inputs.len() * TENSOR_LEN];
        for (chunk, t) in data.chunks_exact_mut(TENSOR_LEN).zip(inputs) {
            t.write_real(chunk);
        }
        let [c, h, w] = InputTensor::SHAPE;
        Ok(Self {
            shape: vec![inputs.len(), c, h, w],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d);
            flat = flat * d + i;
        }
        self.data[flat]
    }
}

fn shape_err(s: &[usize], msg: &str) -> crate::Error {
    shape(format!("tensor {s:?}: {msg}"))
}
