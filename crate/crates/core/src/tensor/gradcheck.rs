use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-6;

/// Central-difference gradient of a scalar function:
/// `(f(x + ε·e_j) − f(x − ε·e_j)) / 2ε` for every element `j`.
///
/// `f` is evaluated twice at `t` first; any bitwise disagreement means it is
/// not deterministic and the oracle refuses to run.
pub fn finite_diff_grad<F>(mut f: F, t: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Oracle(format!("eps must be positive, got {eps}")));
    }
    let a = f(t)?;
    let b = f(t)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {a} vs {b}"
        )));
    }
    let mut probe = t.clone();
    let mut grad = Tensor::zeros(t.shape());
    for j in 0..t.numel() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[j] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[j] = orig;
        grad.data_mut()[j] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// `max_j |a_j − b_j| / max(|a_j|, |b_j|, floor)`.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)` over whole tensors.
pub fn tensor_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let norm = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / norm(a).max(norm(b)).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let t = Tensor::new(vec![2, 2], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let g = finite_diff_grad(|x| Ok(x.sum()), &t, DEFAULT_FD_EPS).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn square_at_three() {
        let t = Tensor::scalar(3.0);
        let g = finite_diff_grad(|x| Ok(x.item() * x.item()), &t, 1e-6).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn detects_nondeterminism() {
        let t = Tensor::scalar(1.0);
        let mut calls = 0.0;
        let err = finite_diff_grad(
            |x| {
                calls += 1.0;
                Ok(x.item() + calls)
            },
            &t,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }

    #[test]
    fn rejects_bad_eps() {
        let t = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|x| Ok(x.item()), &t, 0.0).is_err());
    }
}
