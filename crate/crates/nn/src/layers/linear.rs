use rand::Rng;

use crate::init::{trunc_normal, INIT_STD};
use crate::tensor::{join, Module, Param, Tensor};
use crate::{matmul, Real};

/// Affine map over the trailing dimension: `y = x W + b`, `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_dim: usize,
    out_dim: usize,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self::with_std(in_dim, out_dim, INIT_STD, rng)
    }

    /// Weights from a truncated normal with the given standard deviation.
    pub fn with_std<R: Rng>(in_dim: usize, out_dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::new(&[in_dim, out_dim], trunc_normal(rng, in_dim * out_dim, std)),
            bias: Param::zeros(&[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.last_dim(), self.in_dim, "linear input width");
        let rows = x.rows();
        let mut y = vec![T::zero(); rows * self.out_dim];
        for row in y.chunks_mut(self.out_dim) {
            row.copy_from_slice(&self.bias.value);
        }
        matmul(rows, self.in_dim, self.out_dim, x.data(), false, &self.weight.value, false, &mut y, true);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = self.out_dim;
        Tensor::from_vec(&shape, y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        self.accumulate_param_grads(x, dy);
        let rows = x.rows();
        let mut dx = vec![T::zero(); rows * self.in_dim];
        matmul(rows, self.out_dim, self.in_dim, dy.data(), false, &self.weight.value, true, &mut dx, false);
        Tensor::from_vec(x.shape(), dx)
    }

    pub fn accumulate_param_grads(&mut self, x: &Tensor<T>, dy: &Tensor<T>) {
        let rows = x.rows();
        assert_eq!(dy.rows(), rows);
        matmul(self.in_dim, rows, self.out_dim, x.data(), true, dy.data(), false, &mut self.weight.grad, true);
        for row in dy.data().chunks(self.out_dim) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
