use super::{Element, Tensor};

/// Central-difference gradient of a scalar function: element `i` is
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Tensor<T>
where
    T: Element,
    F: FnMut(&Tensor<T>) -> T,
{
    let mut probe = x.detached();
    let two_h = h + h;
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / two_h);
    }
    Tensor::new(x.shape(), grad).expect("shape of x")
}

/// `max_i |a_i − b_i| / max(max|a|, max|b|, 1e-8)`.
pub fn max_relative_error<T: Element>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let to = |v: &T| v.to_f64().unwrap_or(f64::NAN);
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (to(x) - to(y)).abs())
        .fold(0.0, f64::max);
    let scale = a
        .iter()
        .chain(b)
        .map(|v| to(v).abs())
        .fold(1e-8, f64::max);
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::<f64>::new(&[3], vec![0.3, -2.0, 7.5]).unwrap();
        let g = finite_difference_gradient(|t| t.sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_sum() {
        let x = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_difference_gradient(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(max_relative_error(&[1.0f64, 2.0], &[1.0, 2.0]), 0.0);
        assert!((max_relative_error(&[1.0f64, 4.0], &[1.0, 3.0]) - 0.25).abs() < 1e-15);
        assert!(max_relative_error(&[0.0f64], &[1e-12]) < 1e-3);
    }
}
