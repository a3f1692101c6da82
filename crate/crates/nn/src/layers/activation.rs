use crate::Real;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: &[T]) -> Vec<T> {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    x.iter().map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh())).collect()
}

pub fn gelu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    let (c, a, half, three) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5), T::of(3.0));
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let t = (c * (v + a * v * v * v)).tanh();
            let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
            g * d
        })
        .collect()
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through ReLU given its output.
pub fn relu_backward<T: Real>(out: &[T], dy: &mut [T]) {
    for (g, &o) in dy.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_rows_inplace<T: Real>(x: &mut [T], cols: usize) {
    for row in x.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        let xs: Vec<f64> = (-30..=30).map(|i| i as f64 * 0.17).collect();
        let ones = vec![1.0; xs.len()];
        let an = gelu_backward(&xs, &ones);
        let h = 1e-6;
        for (i, &x) in xs.iter().enumerate() {
            let fd = (gelu(&[x + h])[0] - gelu(&[x - h])[0]) / (2.0 * h);
            assert!((fd - an[i]).abs() < 1e-7, "x={x}");
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!((sigmoid(800.0f64) - 1.0).abs() < 1e-12);
        assert!((sigmoid(3.0f64) + sigmoid(-3.0f64) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![1.0f64, 2.0, 3.0, -1000.0, 0.0, 1000.0];
        softmax_rows_inplace(&mut x, 3);
        assert!((x[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((x[5] - 1.0).abs() < 1e-12);
    }
}
