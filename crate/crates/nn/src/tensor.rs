use crate::Real;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape: shape.to_vec(), data }
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as `(len / last_dim, last_dim)`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim().max(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape size mismatch");
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along the leading dimension.
    pub fn concat0(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty());
        let tail = &parts[0].shape[1..];
        let mut lead = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            assert_eq!(&p.shape[1..], tail, "concat0 trailing shape mismatch");
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Self { shape, data }
    }

    /// Split along the leading dimension at `at`.
    pub fn split0(&self, at: usize) -> (Self, Self) {
        let per: usize = self.shape[1..].iter().product();
        let (a, b) = self.data.split_at(at * per);
        let mut sa = self.shape.clone();
        sa[0] = at;
        let mut sb = self.shape.clone();
        sb[0] = self.shape[0] - at;
        (Self { shape: sa, data: a.to_vec() }, Self { shape: sb, data: b.to_vec() })
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f64() as f32).collect()
    }
}

/// A named-by-position parameter tensor with its gradient accumulator.
///
/// Non-trainable buffers (batch-norm running statistics) carry an empty
/// gradient and are skipped by the optimizer but still checkpointed.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(shape: &[usize], value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self { value, grad, shape: shape.to_vec(), trainable: true }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self::new(shape, vec![v; shape.iter().product()])
    }

    pub fn buffer(shape: &[usize], v: T) -> Self {
        Self { value: vec![v; shape.iter().product()], grad: Vec::new(), shape: shape.to_vec(), trainable: false }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Uniform access to the named parameters of a module tree.
pub trait Module<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    /// Number of trainable scalars.
    fn num_params(&self) -> usize {
        self.named_params().iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.len()).sum()
    }

    /// Order-sensitive FNV-1a checksum over all parameter bits.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, p) in self.named_params() {
            for v in &p.value {
                let bits = v.as_f64().to_bits();
                for byte in bits.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
