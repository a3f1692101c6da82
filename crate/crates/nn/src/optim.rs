use crate::tensor::Param;
use crate::Real;

/// Adam with bias correction; one instance per parameter group.
///
/// Moment buffers are matched to parameters by visit order, so the same
/// module must be passed on every step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, params: &mut [(String, &mut Param<T>)]) {
        let trainable: Vec<&mut Param<T>> =
            params.iter_mut().filter(|(_, p)| p.trainable).map(|(_, p)| &mut **p).collect();
        if self.m.is_empty() {
            self.m = trainable.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = trainable.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.m.len(), trainable.len(), "optimizer bound to a different module");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in trainable.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j].as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let upd = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                p.value[j] -= T::of(upd);
            }
        }
    }

    /// Moment buffers flattened for checkpointing: `(step, [m..], [v..])`.
    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        assert_eq!(m.len(), v.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// Scales all trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut [(String, &mut Param<T>)], max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.grad.iter())
        .map(|g| {
            let g = g.as_f64();
            g * g
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for (_, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
