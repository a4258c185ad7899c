use super::tensor::{Gradients, NetworkParams};
use crate::error::{Error, Result};

/// Worst disagreement found by [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss_fn`, one
/// coordinate at a time.
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &NetworkParams,
    analytic: &Gradients,
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&NetworkParams) -> Result<f64>,
{
    let mut probe = params.clone();
    finite_diff_check_at(
        |name, i, v| {
            let slot = &mut probe.get_mut(name).expect("key checked").data_mut()[i];
            let orig = *slot;
            *slot = v;
            let l = loss_fn(&probe);
            probe.get_mut(name).expect("key checked").data_mut()[i] = orig;
            l
        },
        params,
        analytic,
        epsilon,
    )
}

/// Like [`finite_diff_check`], but `loss_at(name, index, value)` receives the
/// single perturbed coordinate, so the loss can be evaluated incrementally.
/// Any constant offset in the returned loss cancels.
pub fn finite_diff_check_at<F>(
    mut loss_at: F,
    params: &NetworkParams,
    analytic: &Gradients,
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&str, usize, f64) -> Result<f64>,
{
    if !(1e-8..=1e-4).contains(&epsilon) {
        return Err(Error::invalid("epsilon", format!("{epsilon:e} outside [1e-8, 1e-4]")));
    }
    if !params.same_keys(analytic) {
        return Err(Error::invalid("analytic", "gradient keys differ from parameter keys"));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (name, value) in params.iter() {
        let grad = analytic.get(name)?;
        for i in 0..grad.len() {
            let orig = value.data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                let l = loss_at(name, i, v)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("loss while perturbing {name}[{i}]"),
                    });
                }
                Ok(l)
            };
            let plus = eval(orig + epsilon)?;
            let minus = eval(orig - epsilon)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[i];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn params() -> NetworkParams {
        let mut p = NetworkParams::new();
        p.insert("a", Tensor::vector(vec![0.3, -1.2, 2.5])).unwrap();
        p.insert("b", Tensor::from_fn(&[2, 2], |i| i as f64 - 1.5)).unwrap();
        p
    }

    #[test]
    fn quadratic_loss_matches_identity_gradient() {
        let p = params();
        let loss = |q: &NetworkParams| -> Result<f64> {
            Ok(0.5 * q.iter().map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>())
        };
        let r = finite_diff_check(loss, &p, &p, 1e-6).unwrap();
        assert_eq!(r.checked, 7);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn linear_loss_is_exact_up_to_rounding() {
        let p = params();
        let coeffs = p.clone();
        let loss = |q: &NetworkParams| -> Result<f64> {
            Ok(q.iter()
                .zip(coeffs.iter())
                .map(|((_, t), (_, c))| t.data().iter().zip(c.data()).map(|(x, k)| x * k).sum::<f64>())
                .sum())
        };
        let r = finite_diff_check(loss, &p, &coeffs, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn non_finite_loss_names_the_parameter() {
        let p = params();
        let loss = |q: &NetworkParams| -> Result<f64> {
            let b = q.get("b")?.data()[0];
            Ok(if b > -1.5 { f64::NAN } else { 0.0 })
        };
        let err = finite_diff_check(loss, &p, &p.zeros_like(), 1e-6).unwrap_err();
        assert!(err.to_string().contains("b[0]"), "{err}");
    }

    #[test]
    fn epsilon_range_is_enforced() {
        let p = params();
        let loss = |_: &NetworkParams| -> Result<f64> { Ok(0.0) };
        assert!(finite_diff_check(loss, &p, &p, 1e-2).is_err());
        assert!(finite_diff_check(loss, &p, &p, 1e-9).is_err());
    }
}
