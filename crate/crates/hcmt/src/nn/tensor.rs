use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;

/// A named parameter: an f64 value array plus a same-shape gradient slot.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![0.0; len], grad: vec![0.0; len] }
    }

    /// Glorot-uniform initialization for a `[out, in]` weight matrix.
    pub fn glorot(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let mut t = Tensor::zeros(&[out_dim, in_dim]);
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        for v in t.values.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        assert_eq!(self.shape.len(), 2);
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.values).unwrap()
    }

    pub fn view1(&self) -> ArrayView1<'_, f64> {
        assert_eq!(self.shape.len(), 1);
        ArrayView1::from_shape(self.shape[0], &self.values).unwrap()
    }

    pub fn grad_view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        assert_eq!(self.shape.len(), 2);
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.grad).unwrap()
    }

    pub fn grad_view1_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        assert_eq!(self.shape.len(), 1);
        ArrayViewMut1::from_shape(self.shape[0], &mut self.grad).unwrap()
    }
}
