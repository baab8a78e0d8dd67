use super::{Result, TensorError};

/// Central finite differences of `f` at `x` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let coords: Vec<usize> = (0..x.len()).collect();
    central_difference_at(&mut f, x, h, &coords)
}

fn central_difference_at(
    f: &mut impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFiniteEvaluation);
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub checked: usize,
}

/// Compares the analytic gradient reported by `f` with central differences.
///
/// `f` returns `(value, gradient)` at a point. The error for a coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`; the maximum over
/// the checked coordinates (all, or `coords` when given) is reported.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    params: &[f64],
    h: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let (value, analytic) = f(params)?;
    if !value.is_finite() || analytic.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFiniteEvaluation);
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut value_only = |x: &[f64]| f(x).map(|(v, _)| v);
    let numeric = central_difference_at(&mut value_only, params, h, coords)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: coords.first().copied().unwrap_or(0),
        checked: coords.len(),
    };
    for (&i, &n) in coords.iter().zip(&numeric) {
        let a = analytic[i];
        let err = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coordinate = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = [0.3, -1.2, 4.0, 2.5];
        let r = grad_check(|x| Ok((x.iter().sum(), vec![1.0; x.len()])), &x, 1e-5, None).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn doubled_gradient_is_caught() {
        // f = sum(x^2), analytic reported as 2 * true gradient
        let x = [1.0, -2.0, 3.0];
        let r = grad_check(
            |x| Ok((x.iter().map(|v| v * v).sum(), x.iter().map(|v| 4.0 * v).collect())),
            &x,
            1e-5,
            None,
        )
        .unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_evaluation_reported() {
        let r = grad_check(|x| Ok((1.0 / (x[0] - 1e-6).max(0.0), vec![0.0])), &[1e-6], 1e-5, None);
        assert!(matches!(r, Err(TensorError::NonFiniteEvaluation)));
    }
}
