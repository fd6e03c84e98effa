/// Compares reverse-mode gradients against central finite differences.
///
/// `f` returns the loss value and its analytic gradient at the given point.
/// Per-component relative error is `|a - n| / max(|a|, |n|, 1e-6)`, where the
/// floor keeps components with vanishing gradients from dominating. Returns
/// the worst component.
pub fn grad_check<F>(f: F, params: &[f64], epsilon: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    grad_check_masked(f, params, epsilon, None)
}

/// As [`grad_check`], restricted to components where `mask` is true.
/// Used for parameters the forward pass deliberately treats as constants.
pub fn grad_check_masked<F>(f: F, params: &[f64], epsilon: f64, mask: Option<&[bool]>) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        probe[i] = params[i] + epsilon;
        let (plus, _) = f(&probe);
        probe[i] = params[i] - epsilon;
        let (minus, _) = f(&probe);
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |p: &[f64]| {
            let v = 0.5 * p.iter().map(|x| x * x).sum::<f64>();
            (v, p.to_vec())
        };
        let err = grad_check(f, &[0.3, -1.2, 2.5, 0.7], 1e-5);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |p: &[f64]| (p[0] * p[0], vec![p[0]]);
        assert!(grad_check(f, &[1.0], 1e-5) > 0.4);
    }
}
