use rand::Rng;
use zwm_nn::layers::{
    relu_backward, relu_inplace, sigmoid, BatchNorm2d, BnCache, Conv2d, ConvTranspose2x2, Linear, MaxPool2x2, PoolCache,
};
use zwm_nn::{join, Module, Param, Real, Tensor};

use super::{check_image_batch, ModelConfig};

/// Output is kept this far from 0 and 1 so it stays strictly inside the open interval in `f32`.
pub const OUTPUT_MARGIN: f64 = 1e-6;

/// conv3×3 → batch norm → ReLU.
#[derive(Clone, Debug)]
struct ConvBnRelu<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

struct CbrCache<T> {
    x: Tensor<T>,
    bn: BnCache<T>,
    y: Tensor<T>,
}

impl<T: Real> ConvBnRelu<T> {
    fn new<R: Rng>(cin: usize, cout: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self { conv: Conv2d::new(cin, cout, 3, rng), bn: BatchNorm2d::new(cout, cfg.bn_momentum, cfg.bn_eps) }
    }

    fn forward(&mut self, x: &Tensor<T>, training: bool) -> (Tensor<T>, CbrCache<T>) {
        let h = self.conv.forward(x);
        let (mut y, bn) = self.bn.forward(&h, training);
        relu_inplace(y.data_mut());
        (y.clone(), CbrCache { x: x.clone(), bn, y })
    }

    fn backward(&mut self, c: &CbrCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        relu_backward(c.y.data(), g.data_mut());
        let g = self.bn.backward(&c.bn, &g);
        self.conv.backward(&c.x, &g)
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.conv.visit(&join(prefix, "conv"), out);
        self.bn.visit(&join(prefix, "bn"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv.visit_mut(&join(prefix, "conv"), out);
        self.bn.visit_mut(&join(prefix, "bn"), out);
    }
}

/// transposed conv 2×2/2 → batch norm → ReLU.
#[derive(Clone, Debug)]
struct UpStage<T> {
    up: ConvTranspose2x2<T>,
    bn: BatchNorm2d<T>,
}

struct UpCache<T> {
    x: Tensor<T>,
    bn: BnCache<T>,
    y: Tensor<T>,
}

impl<T: Real> UpStage<T> {
    fn new<R: Rng>(cin: usize, cout: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self { up: ConvTranspose2x2::new(cin, cout, rng), bn: BatchNorm2d::new(cout, cfg.bn_momentum, cfg.bn_eps) }
    }

    fn forward(&mut self, x: &Tensor<T>, training: bool) -> (Tensor<T>, UpCache<T>) {
        let h = self.up.forward(x);
        let (mut y, bn) = self.bn.forward(&h, training);
        relu_inplace(y.data_mut());
        (y.clone(), UpCache { x: x.clone(), bn, y })
    }

    fn backward(&mut self, c: &UpCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        relu_backward(c.y.data(), g.data_mut());
        let g = self.bn.backward(&c.bn, &g);
        self.up.backward(&c.x, &g)
    }
}

/// Convolutional encoder–decoder: four conv/pool stages down to an
/// 8×8×`r_bottleneck` code, four transposed-conv stages back up, then a
/// per-pixel linear map to RGB and a sigmoid.
#[derive(Clone, Debug)]
pub struct Reconstructor<T> {
    down: Vec<ConvBnRelu<T>>,
    bottleneck: ConvBnRelu<T>,
    up: Vec<UpStage<T>>,
    out: Linear<T>,
}

pub struct ReconCache<T> {
    down: Vec<(CbrCache<T>, PoolCache)>,
    bottleneck: CbrCache<T>,
    up: Vec<UpCache<T>>,
    last: Tensor<T>,
    y: Tensor<T>,
}

impl<T: Real> ReconCache<T> {
    /// Shape of the bottleneck activation `(B, 8, 8, C)`.
    pub fn bottleneck_shape(&self) -> &[usize] {
        self.bottleneck.y.shape()
    }
}

impl<T: Real> Reconstructor<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let w = &cfg.r_widths;
        let mut cin = 3;
        let mut down = Vec::new();
        for &c in w {
            down.push(ConvBnRelu::new(cin, c, cfg, rng));
            cin = c;
        }
        let bottleneck = ConvBnRelu::new(cin, cfg.r_bottleneck, cfg, rng);
        let mut up = Vec::new();
        let mut cin = cfg.r_bottleneck;
        for &c in w.iter().rev() {
            up.push(UpStage::new(cin, c, cfg, rng));
            cin = c;
        }
        Self {
            down,
            bottleneck,
            up,
            // fan-in scale so the initial output already varies with its input
            out: Linear::with_std(cin, 3, 1.0 / (cin as f64).sqrt(), rng),
        }
    }

    /// `training` selects batch statistics (and updates running statistics).
    pub fn forward(&mut self, f: &Tensor<T>, training: bool) -> (Tensor<T>, ReconCache<T>) {
        check_image_batch(f);
        let mut h = f.clone();
        let mut down = Vec::with_capacity(self.down.len());
        for stage in &mut self.down {
            let (y, c) = stage.forward(&h, training);
            let (p, pc) = MaxPool2x2.forward(&y);
            down.push((c, pc));
            h = p;
        }
        let (mut h, bottleneck) = self.bottleneck.forward(&h, training);
        let mut up = Vec::with_capacity(self.up.len());
        for stage in &mut self.up {
            let (y, c) = stage.forward(&h, training);
            up.push(c);
            h = y;
        }
        let logits = self.out.forward(&h);
        let (lo, hi) = (T::of(OUTPUT_MARGIN), T::of(1.0 - OUTPUT_MARGIN));
        let y = logits.map(|v| sigmoid(v).max(lo).min(hi));
        (y.clone(), ReconCache { down, bottleneck, up, last: h, y })
    }

    /// Inference-mode reconstruction (running batch-norm statistics).
    pub fn reconstruct(&self, f: &Tensor<T>) -> Tensor<T> {
        // forward needs &mut for running statistics; inference leaves them alone
        self.clone().forward(f, false).0
    }

    /// Accumulates parameter gradients and returns `dL/dF_s`.
    pub fn backward(&mut self, cache: &ReconCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let g: Vec<T> = cache.y.data().iter().zip(dy.data()).map(|(&y, &d)| d * y * (T::one() - y)).collect();
        let mut g = self.out.backward(&cache.last, &Tensor::from_vec(dy.shape(), g));
        for (stage, c) in self.up.iter_mut().zip(&cache.up).rev() {
            g = stage.backward(c, &g);
        }
        g = self.bottleneck.backward(&cache.bottleneck, &g);
        for (stage, (c, pc)) in self.down.iter_mut().zip(&cache.down).rev() {
            g = MaxPool2x2.backward(pc, &g);
            g = stage.backward(c, &g);
        }
        g
    }
}

impl<T: Real> Module<T> for Reconstructor<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, s) in self.down.iter().enumerate() {
            s.visit(&join(prefix, &format!("down.{i}")), out);
        }
        self.bottleneck.visit(&join(prefix, "bottleneck"), out);
        for (i, s) in self.up.iter().enumerate() {
            let p = join(prefix, &format!("up.{i}"));
            s.up.visit(&join(&p, "up"), out);
            s.bn.visit(&join(&p, "bn"), out);
        }
        self.out.visit(&join(prefix, "out"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, s) in self.down.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("down.{i}")), out);
        }
        self.bottleneck.visit_mut(&join(prefix, "bottleneck"), out);
        for (i, s) in self.up.iter_mut().enumerate() {
            let p = join(prefix, &format!("up.{i}"));
            s.up.visit_mut(&join(&p, "up"), out);
            s.bn.visit_mut(&join(&p, "bn"), out);
        }
        self.out.visit_mut(&join(prefix, "out"), out);
    }
}
