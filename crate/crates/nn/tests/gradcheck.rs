//! Central finite-difference checks of every layer's backward pass (f64).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zwm_nn::layers::{BatchNorm2d, Conv2d, ConvTranspose2x2, LayerNorm, Linear, MaxPool2x2, TransformerBlock};
use zwm_nn::{Module, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Checks input and parameter gradients of `f(module, x)` under probe loss `sum(r * y)`.
fn check<M: Module<f64> + Clone>(
    module: M,
    x: Tensor<f64>,
    fwd: impl Fn(&mut M, &Tensor<f64>) -> Tensor<f64>,
    bwd: impl Fn(&mut M, &Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
    tol: f64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut m = module.clone();
    let y = fwd(&mut m.clone(), &x);
    let r = rand_tensor(&mut rng, y.shape(), 1.0);
    m.zero_grad();
    let dx = bwd(&mut m, &x, &r);
    let h = 1e-5;

    let probe = |mm: &M, xx: &Tensor<f64>| dot(&fwd(&mut mm.clone(), xx), &r);
    let idx: Vec<usize> = (0..12).map(|_| rng.gen_range(0..x.len())).collect();
    let an: Vec<f64> = idx.iter().map(|&i| dx.data()[i]).collect();
    let fd: Vec<f64> = idx
        .iter()
        .map(|&i| {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            (probe(&module, &xp) - probe(&module, &xm)) / (2.0 * h)
        })
        .collect();
    assert!(rel_err(&an, &fd) < tol, "input grad rel err {}", rel_err(&an, &fd));

    let names: Vec<String> = m.named_params().iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect();
    for name in names {
        let grad = m.named_params().into_iter().find(|(n, _)| *n == name).unwrap().1.grad.clone();
        let picks: Vec<usize> = (0..6).map(|_| rng.gen_range(0..grad.len())).collect();
        let an: Vec<f64> = picks.iter().map(|&i| grad[i]).collect();
        let fd: Vec<f64> = picks
            .iter()
            .map(|&i| {
                let shifted = |delta: f64| {
                    let mut mm = module.clone();
                    for (n, p) in mm.named_params_mut() {
                        if n == name {
                            p.value[i] += delta;
                        }
                    }
                    probe(&mm, &x)
                };
                (shifted(h) - shifted(-h)) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(&an, &fd) < tol, "{name} grad rel err {}", rel_err(&an, &fd));
    }
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut l = Linear::<f64>::new(5, 4, &mut rng);
    l.bias.value.iter_mut().for_each(|b| *b = 0.1);
    let x = rand_tensor(&mut rng, &[3, 2, 5], 1.0);
    check(l, x, |m, x| m.forward(x), |m, x, r| m.backward(x, r), 1e-7);
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ln = LayerNorm::<f64>::new(6, 1e-6);
    ln.gamma.value = (0..6).map(|i| 0.5 + i as f64 * 0.1).collect();
    let x = rand_tensor(&mut rng, &[4, 6], 2.0);
    check(
        ln,
        x,
        |m, x| m.forward(x).0,
        |m, x, r| {
            let (_, c) = m.forward(x);
            m.backward(&c, r)
        },
        1e-6,
    );
}

#[test]
fn transformer_block_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut blk = TransformerBlock::<f64>::new(8, 2, 4, 1e-6, &mut rng);
    // Larger weights than the default init so attention is far from uniform.
    for (_, p) in blk.named_params_mut() {
        if p.shape.len() == 2 {
            p.value.iter_mut().for_each(|v| *v *= 15.0);
        }
    }
    let x = rand_tensor(&mut rng, &[2, 5, 8], 1.0);
    check(
        blk,
        x,
        |m, x| m.forward(x).0,
        |m, x, r| {
            let (_, c) = m.forward(x);
            m.backward(&c, r)
        },
        1e-6,
    );
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut conv = Conv2d::<f64>::new(3, 4, 3, &mut rng);
    conv.weight.value.iter_mut().for_each(|v| *v *= 20.0);
    let x = rand_tensor(&mut rng, &[2, 5, 6, 3], 1.0);
    check(conv, x, |m, x| m.forward(x), |m, x, r| m.backward(x, r), 1e-7);
}

#[test]
fn transposed_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let up = ConvTranspose2x2::<f64>::new(3, 2, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 3], 1.0);
    check(up, x, |m, x| m.forward(x), |m, x, r| m.backward(x, r), 1e-7);
}

#[test]
fn batch_norm_training_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bn = BatchNorm2d::<f64>::new(3, 0.9, 1e-5);
    bn.gamma.value = vec![0.7, 1.3, -0.4];
    let x = rand_tensor(&mut rng, &[2, 3, 3, 3], 1.5);
    check(
        bn,
        x,
        |m, x| m.forward(x, true).0,
        |m, x, r| {
            let (_, c) = m.forward(x, true);
            m.backward(&c, r)
        },
        1e-6,
    );
}

#[test]
fn max_pool_routes_gradient_to_argmax() {
    let x = Tensor::from_vec(&[1, 2, 2, 1], vec![0.1, 0.9, 0.3, 0.2]);
    let (y, cache) = MaxPool2x2.forward(&x);
    assert_eq!(y.data(), &[0.9]);
    let dx = MaxPool2x2.backward(&cache, &Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]));
    assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
}

#[test]
fn transposed_conv_upsamples_each_pixel_into_its_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut up = ConvTranspose2x2::<f64>::new(1, 1, &mut rng);
    up.weight.value = vec![1.0, 2.0, 3.0, 4.0];
    let x = Tensor::from_vec(&[1, 1, 2, 1], vec![1.0, 10.0]);
    let y = up.forward(&x);
    assert_eq!(y.shape(), &[1, 2, 4, 1]);
    assert_eq!(y.data(), &[1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0]);
}

#[test]
fn batch_norm_running_stats_use_momentum() {
    let mut bn = BatchNorm2d::<f64>::new(1, 0.9, 1e-5);
    let x = Tensor::from_vec(&[1, 1, 2, 1], vec![1.0, 3.0]);
    bn.forward(&x, true);
    assert!((bn.running_mean.value[0] - 0.2).abs() < 1e-12);
    // unbiased batch variance 2.0
    assert!((bn.running_var.value[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    let before = bn.running_mean.value.clone();
    bn.forward(&x, false);
    assert_eq!(before, bn.running_mean.value);
}
