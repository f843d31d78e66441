//! Central finite differences, for checking analytic gradients.

use crate::nn::ParamSet;
use crate::{Error, Result};

/// `(f(p + h e_k) - f(p - h e_k)) / 2h` for every scalar `k` of `params`.
pub fn central_difference<F>(params: &ParamSet, h: f64, mut f: F) -> Result<ParamSet>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut probe = params.clone();
    let mut out = params.zeros_like();
    for k in 0..params.scalar_count() {
        let x = params.flat_get(k);
        probe.flat_set(k, x + h);
        let plus = f(&probe)?;
        probe.flat_set(k, x - h);
        let minus = f(&probe)?;
        probe.flat_set(k, x);
        out.flat_set(k, (plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all scalars. The floor keeps
/// gradients that are zero up to round-off from dominating.
pub fn max_relative_error(analytic: &ParamSet, numeric: &ParamSet, floor: f64) -> Result<f64> {
    analytic.check_layout(numeric, "max_relative_error")?;
    Ok(analytic
        .flat_iter()
        .zip(numeric.flat_iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn quadratic_has_exact_central_difference() {
        let p = ParamSet::new(vec![Param::new("w", vec![3], vec![1.0, -2.0, 0.5]).unwrap()]);
        let g = central_difference(&p, 1e-3, |q| Ok(q.flat_iter().map(|x| x * x).sum())).unwrap();
        let expected: Vec<f64> = p.flat_iter().map(|x| 2.0 * x).collect();
        for (a, b) in g.flat_iter().zip(expected) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_error_uses_floor() {
        let a = ParamSet::new(vec![Param::new("w", vec![2], vec![1.0, 1e-12]).unwrap()]);
        let b = ParamSet::new(vec![Param::new("w", vec![2], vec![1.01, 0.0]).unwrap()]);
        let e = max_relative_error(&a, &b, 1e-8).unwrap();
        assert!((e - 0.01 / 1.01).abs() < 1e-12);
    }
}
