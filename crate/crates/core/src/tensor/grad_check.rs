use super::Tensor;

/// Central-difference gradient estimate of `f` at `params`.
///
/// The step is applied in f32 storage, so the denominator uses the actually
/// representable perturbation rather than `2h`.
pub fn finite_diff<F>(mut f: F, params: &Tensor, h: f64) -> Vec<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.numel());
    for i in 0..params.numel() {
        let x = params.data()[i];
        let plus = (f64::from(x) + h) as f32;
        let minus = (f64::from(x) - h) as f32;
        probe.data_mut()[i] = plus;
        let fp = f(&probe);
        probe.data_mut()[i] = minus;
        let fm = f(&probe);
        probe.data_mut()[i] = x;
        out.push((fp - fm) / (f64::from(plus) - f64::from(minus)));
    }
    out
}

/// Central difference along selected coordinates only.
pub fn finite_diff_at<F>(mut f: F, params: &Tensor, coords: &[usize], h: f64) -> Vec<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = params.clone();
    coords
        .iter()
        .map(|&i| {
            let x = params.data()[i];
            let plus = (f64::from(x) + h) as f32;
            let minus = (f64::from(x) - h) as f32;
            probe.data_mut()[i] = plus;
            let fp = f(&probe);
            probe.data_mut()[i] = minus;
            let fm = f(&probe);
            probe.data_mut()[i] = x;
            (fp - fm) / (f64::from(plus) - f64::from(minus))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff(|t| t.data().iter().map(|&v| f64::from(v).powi(2)).sum(), &p, 1e-3);
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn linear_is_exact() {
        let p = Tensor::new(vec![3], vec![0.3, -1.7, 5.0]).unwrap();
        let coef = [2.5, -0.75, 4.0];
        let g = finite_diff(
            |t| t.data().iter().zip(coef).map(|(&v, c)| f64::from(v) * c).sum(),
            &p,
            1e-3,
        );
        for (gi, c) in g.iter().zip(coef) {
            assert!((gi - c).abs() < 1e-9);
        }
    }
}
