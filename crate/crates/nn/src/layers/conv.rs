use rand::Rng;

use crate::init::{trunc_normal, INIT_STD};
use crate::tensor::{join, Module, Param, Tensor};
use crate::{matmul, Real};

fn dims4<T: Real>(x: &Tensor<T>) -> [usize; 4] {
    match x.shape() {
        &[b, h, w, c] => [b, h, w, c],
        s => panic!("expected NHWC tensor, got {s:?}"),
    }
}

/// Stride-1 "same" convolution with an odd square kernel on NHWC maps.
///
/// Lowered to im2col + GEMM one image at a time; the weight is stored
/// `(k * k * in_ch) x out_ch` with rows ordered `(ky, kx, c)`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_ch: usize,
    out_ch: usize,
    ksize: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, ksize: usize, rng: &mut R) -> Self {
        assert!(ksize % 2 == 1, "kernel size must be odd");
        let fan = ksize * ksize * in_ch;
        Self {
            weight: Param::new(&[fan, out_ch], trunc_normal(rng, fan * out_ch, INIT_STD)),
            bias: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
            ksize,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    /// Rows are gathered from a zero-padded copy so each `(pixel, ky)` is one
    /// contiguous run of `k * c` values.
    fn im2col(&self, img: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (k, c) = (self.ksize, self.in_ch);
        let p = k / 2;
        let pw = w + 2 * p;
        let run = k * c;
        let mut padded = vec![T::zero(); (h + 2 * p) * pw * c];
        for i in 0..h {
            padded[((i + p) * pw + p) * c..][..w * c].copy_from_slice(&img[i * w * c..][..w * c]);
        }
        for (pix, row) in cols.chunks_exact_mut(k * run).enumerate() {
            let (i, j) = (pix / w, pix % w);
            for (ky, dst) in row.chunks_exact_mut(run).enumerate() {
                dst.copy_from_slice(&padded[((i + ky) * pw + j) * c..][..run]);
            }
        }
    }

    fn col2im_add(&self, cols: &[T], h: usize, w: usize, img: &mut [T]) {
        let (k, c) = (self.ksize, self.in_ch);
        let p = k / 2;
        let pw = w + 2 * p;
        let run = k * c;
        let mut padded = vec![T::zero(); (h + 2 * p) * pw * c];
        for (pix, row) in cols.chunks_exact(k * run).enumerate() {
            let (i, j) = (pix / w, pix % w);
            for (ky, src) in row.chunks_exact(run).enumerate() {
                let dst = &mut padded[((i + ky) * pw + j) * c..][..run];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for i in 0..h {
            let src = &padded[((i + p) * pw + p) * c..][..w * c];
            for (d, &s) in img[i * w * c..][..w * c].iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [b, h, w, c] = dims4(x);
        assert_eq!(c, self.in_ch, "conv input channels");
        let width = self.ksize * self.ksize * c;
        let mut cols = vec![T::zero(); h * w * width];
        let mut y = vec![T::zero(); b * h * w * self.out_ch];
        for n in 0..b {
            self.im2col(&x.data()[n * h * w * c..][..h * w * c], h, w, &mut cols);
            let out = &mut y[n * h * w * self.out_ch..][..h * w * self.out_ch];
            for row in out.chunks_mut(self.out_ch) {
                row.copy_from_slice(&self.bias.value);
            }
            matmul(h * w, width, self.out_ch, &cols, false, &self.weight.value, false, out, true);
        }
        Tensor::from_vec(&[b, h, w, self.out_ch], y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [b, h, w, c] = dims4(x);
        let width = self.ksize * self.ksize * c;
        let mut cols = vec![T::zero(); h * w * width];
        let mut dcols = vec![T::zero(); h * w * width];
        let mut dx = vec![T::zero(); x.len()];
        for n in 0..b {
            self.im2col(&x.data()[n * h * w * c..][..h * w * c], h, w, &mut cols);
            let g = &dy.data()[n * h * w * self.out_ch..][..h * w * self.out_ch];
            matmul(width, h * w, self.out_ch, &cols, true, g, false, &mut self.weight.grad, true);
            for row in g.chunks(self.out_ch) {
                for (bg, &v) in self.bias.grad.iter_mut().zip(row) {
                    *bg += v;
                }
            }
            matmul(h * w, self.out_ch, width, g, false, &self.weight.value, true, &mut dcols, false);
            self.col2im_add(&dcols, h, w, &mut dx[n * h * w * c..][..h * w * c]);
        }
        Tensor::from_vec(x.shape(), dx)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x upsampling).
///
/// Each input pixel expands to its own 2x2 output block; the weight is
/// stored `in_ch x (2 * 2 * out_ch)` with columns ordered `(dy, dx, c)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_ch: usize,
    out_ch: usize,
}

impl<T: Real> ConvTranspose2x2<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(&[in_ch, 4 * out_ch], trunc_normal(rng, in_ch * 4 * out_ch, INIT_STD)),
            bias: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [b, h, w, c] = dims4(x);
        assert_eq!(c, self.in_ch, "transposed conv input channels");
        let oc = self.out_ch;
        let pixels = b * h * w;
        let mut z = vec![T::zero(); pixels * 4 * oc];
        matmul(pixels, c, 4 * oc, x.data(), false, &self.weight.value, false, &mut z, false);
        let (oh, ow) = (2 * h, 2 * w);
        let mut y = vec![T::zero(); b * oh * ow * oc];
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let src = &z[((n * h + i) * w + j) * 4 * oc..][..4 * oc];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let o = ((n * oh + 2 * i + dy) * ow + 2 * j + dx) * oc;
                            let blk = &src[(dy * 2 + dx) * oc..][..oc];
                            for ((d, &s), &bb) in y[o..o + oc].iter_mut().zip(blk).zip(&self.bias.value) {
                                *d = s + bb;
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[b, oh, ow, oc], y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy_t: &Tensor<T>) -> Tensor<T> {
        let [b, h, w, c] = dims4(x);
        let oc = self.out_ch;
        let (oh, ow) = (2 * h, 2 * w);
        let pixels = b * h * w;
        let mut dz = vec![T::zero(); pixels * 4 * oc];
        let g = dy_t.data();
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let dst = &mut dz[((n * h + i) * w + j) * 4 * oc..][..4 * oc];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let o = ((n * oh + 2 * i + dy) * ow + 2 * j + dx) * oc;
                            dst[(dy * 2 + dx) * oc..][..oc].copy_from_slice(&g[o..o + oc]);
                        }
                    }
                }
            }
        }
        for row in g.chunks(oc) {
            for (bg, &v) in self.bias.grad.iter_mut().zip(row) {
                *bg += v;
            }
        }
        matmul(c, pixels, 4 * oc, x.data(), true, &dz, false, &mut self.weight.grad, true);
        let mut dx = vec![T::zero(); x.len()];
        matmul(pixels, 4 * oc, c, &dz, false, &self.weight.value, true, &mut dx, false);
        Tensor::from_vec(x.shape(), dx)
    }
}

impl<T: Real> Module<T> for ConvTranspose2x2<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// 2x2 max pooling with stride 2 on NHWC maps.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaxPool2x2;

pub struct PoolCache {
    argmax: Vec<u8>,
    in_shape: [usize; 4],
}

impl MaxPool2x2 {
    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> (Tensor<T>, PoolCache) {
        let [b, h, w, c] = dims4(x);
        assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even spatial size");
        let (oh, ow) = (h / 2, w / 2);
        let mut y = vec![T::zero(); b * oh * ow * c];
        let mut argmax = vec![0u8; y.len()];
        let xd = x.data();
        for n in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    let o = ((n * oh + i) * ow + j) * c;
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut arg = 0u8;
                        for (q, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                            let v = xd[((n * h + 2 * i + dy) * w + 2 * j + dx) * c + ch];
                            if v > best {
                                best = v;
                                arg = q as u8;
                            }
                        }
                        y[o + ch] = best;
                        argmax[o + ch] = arg;
                    }
                }
            }
        }
        (Tensor::from_vec(&[b, oh, ow, c], y), PoolCache { argmax, in_shape: [b, h, w, c] })
    }

    pub fn backward<T: Real>(&self, cache: &PoolCache, dy: &Tensor<T>) -> Tensor<T> {
        let [b, h, w, c] = cache.in_shape;
        let (oh, ow) = (h / 2, w / 2);
        let mut dx = vec![T::zero(); b * h * w * c];
        for n in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    let o = ((n * oh + i) * ow + j) * c;
                    for ch in 0..c {
                        let q = cache.argmax[o + ch] as usize;
                        let (dy_, dx_) = (q / 2, q % 2);
                        dx[((n * h + 2 * i + dy_) * w + 2 * j + dx_) * c + ch] += dy.data()[o + ch];
                    }
                }
            }
        }
        Tensor::from_vec(&cache.in_shape, dx)
    }
}
