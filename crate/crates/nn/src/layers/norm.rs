use crate::tensor::{join, Module, Param, Tensor};
use crate::Real;

/// Layer normalization over the trailing dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    eps: f64,
}

pub struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self { gamma: Param::filled(&[dim], T::one()), beta: Param::zeros(&[dim]), eps }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, LnCache<T>) {
        let d = x.last_dim();
        assert_eq!(d, self.gamma.len());
        let rows = x.rows();
        let inv_d = T::one() / T::of(d as f64);
        let eps = T::of(self.eps);
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * self.gamma.value[j] + self.beta.value[j];
            }
        }
        (Tensor::from_vec(x.shape(), y), LnCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d = dy.last_dim();
        let rows = dy.rows();
        let inv_d = T::one() / T::of(d as f64);
        let mut dx = vec![T::zero(); dy.len()];
        let mut dxhat = vec![T::zero(); d];
        for r in 0..rows {
            let g = &dy.data()[r * d..(r + 1) * d];
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..d {
                self.gamma.grad[j] += g[j] * xh[j];
                self.beta.grad[j] += g[j];
                dxhat[j] = g[j] * self.gamma.value[j];
                s1 += dxhat[j];
                s2 += dxhat[j] * xh[j];
            }
            s1 *= inv_d;
            s2 *= inv_d;
            let rs = cache.rstd[r];
            for j in 0..d {
                dx[r * d + j] = rs * (dxhat[j] - s1 - xh[j] * s2);
            }
        }
        Tensor::from_vec(dy.shape(), dx)
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

/// Batch normalization over the channel (trailing) dimension of NHWC maps.
///
/// Running statistics follow `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    momentum: f64,
    eps: f64,
}

pub struct BnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    training: bool,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(&[channels], T::zero()),
            running_var: Param::buffer(&[channels], T::one()),
            momentum,
            eps,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, training: bool) -> (Tensor<T>, BnCache<T>) {
        let c = x.last_dim();
        let n = x.rows();
        let eps = T::of(self.eps);
        let (mean, var) = if training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            let inv_n = T::one() / T::of(n as f64);
            mean.iter_mut().for_each(|m| *m *= inv_n);
            for row in x.data().chunks(c) {
                for j in 0..c {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_n);
            let mom = T::of(self.momentum);
            let unbias = if n > 1 { T::of(n as f64 / (n as f64 - 1.0)) } else { T::one() };
            for j in 0..c {
                self.running_mean.value[j] = mom * self.running_mean.value[j] + (T::one() - mom) * mean[j];
                self.running_var.value[j] = mom * self.running_var.value[j] + (T::one() - mom) * var[j] * unbias;
            }
            (mean, var)
        } else {
            (self.running_mean.value.clone(), self.running_var.value.clone())
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for (r, row) in x.data().chunks(c).enumerate() {
            for j in 0..c {
                let h = (row[j] - mean[j]) * rstd[j];
                xhat[r * c + j] = h;
                y[r * c + j] = h * self.gamma.value[j] + self.beta.value[j];
            }
        }
        (Tensor::from_vec(x.shape(), y), BnCache { xhat, rstd, training })
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let c = dy.last_dim();
        let n = dy.rows();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (r, row) in dy.data().chunks(c).enumerate() {
            for j in 0..c {
                sum_g[j] += row[j];
                sum_gx[j] += row[j] * cache.xhat[r * c + j];
            }
        }
        for j in 0..c {
            self.gamma.grad[j] += sum_gx[j];
            self.beta.grad[j] += sum_g[j];
        }
        let mut dx = vec![T::zero(); dy.len()];
        let inv_n = T::one() / T::of(n as f64);
        for (r, row) in dy.data().chunks(c).enumerate() {
            for j in 0..c {
                let k = self.gamma.value[j] * cache.rstd[j];
                dx[r * c + j] = if cache.training {
                    k * (row[j] - inv_n * sum_g[j] - cache.xhat[r * c + j] * inv_n * sum_gx[j])
                } else {
                    k * row[j]
                };
            }
        }
        Tensor::from_vec(dy.shape(), dx)
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}
