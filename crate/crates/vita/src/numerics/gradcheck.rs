//! Central-difference validation harness for every differentiable loss in
//! the crate. Analytic gradients come from the tape; numeric gradients from
//! `(f(p+eps) - f(p-eps)) / (2 eps)` per coordinate, subsampled evenly for
//! large tensors.

use std::rc::Rc;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub num_params_checked: usize,
}

impl GradCheckReport {
    /// A non-finite value in either gradient is reported as an infinite
    /// relative error, so this is the single pass criterion.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error.is_finite() && self.max_relative_error <= tol
    }
}

/// Coordinates to probe for a tensor of `len` elements: all of them when
/// small, otherwise an even subsample of at least 64.
fn probe_indices(len: usize, coords_per_tensor: usize) -> Vec<usize> {
    let want = coords_per_tensor.max(64).min(len);
    if want == len {
        (0..len).collect()
    } else {
        (0..want).map(|i| i * len / want).collect()
    }
}

/// Compare the tape gradient of `loss_fn` against central finite
/// differences at each (subsampled) parameter coordinate.
///
/// `loss_fn` must build a scalar loss from leaf vars registered in the
/// order of `params`; it is re-invoked on perturbed copies for the numeric
/// side, so it has to be a pure function of the parameter values.
pub fn finite_diff_grad_check<F>(
    loss_fn: F,
    params: &[(String, Tensor)],
    eps: f64,
    coords_per_tensor: usize,
) -> GradCheckReport
where
    F: Fn(&Rc<Tape>, &[Var]) -> Var,
{
    assert!(eps > 0.0, "eps must be positive");

    let eval = |values: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = loss_fn(&tape, &vars);
        assert_eq!(loss.value().len(), 1, "loss_fn must be scalar-valued");
        loss.item()
    };

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = loss_fn(&tape, &vars);
    assert_eq!(loss.value().len(), 1, "loss_fn must be scalar-valued");
    let mut grads = loss.backward();
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(v.shape().to_vec())))
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        num_params_checked: 0,
    };
    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    for (pi, (name, tensor)) in params.iter().enumerate() {
        for idx in probe_indices(tensor.len(), coords_per_tensor) {
            let mut plus = base.clone();
            plus[pi].data_mut()[idx] += eps;
            let mut minus = base.clone();
            minus[pi].data_mut()[idx] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[pi].data()[idx];
            report.num_params_checked += 1;

            if !a.is_finite() || !numeric.is_finite() {
                report.max_relative_error = f64::INFINITY;
                report.worst_parameter = format!("{}[{}]", name, idx);
                return report;
            }
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_parameter = format!("{}[{}]", name, idx);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_is_exact() {
        // loss = 0.5 * ||p||^2 has gradient p itself.
        let params = vec![("p".to_string(), Tensor::from_vec(vec![3.0, 4.0]))];
        let report = finite_diff_grad_check(
            |_, vars| vars[0].sqr().sum_all().mul_scalar(0.5),
            &params,
            1e-5,
            64,
        );
        assert!(report.max_relative_error < 1e-8, "rel err {}", report.max_relative_error);
        assert_eq!(report.num_params_checked, 2);
    }

    #[test]
    fn composite_ops_match() {
        let params = vec![
            ("a".to_string(), Tensor::from_vec(vec![0.3, -0.7, 1.2])),
            ("b".to_string(), Tensor::from_vec(vec![0.9, 0.4, -0.2])),
        ];
        let report = finite_diff_grad_check(
            |_, vars| {
                let prod = vars[0].gelu().mul(&vars[1].exp());
                prod.add(&vars[0].sin()).sqr().sum_all()
            },
            &params,
            1e-6,
            64,
        );
        assert!(report.passes(1e-8), "rel err {}", report.max_relative_error);
    }

    #[test]
    fn nan_gradient_is_flagged() {
        let params = vec![("p".to_string(), Tensor::from_vec(vec![-1.0]))];
        // ln of a negative number produces NaN in both value and gradient.
        let report =
            finite_diff_grad_check(|_, vars| vars[0].ln().sum_all(), &params, 1e-6, 64);
        assert!(!report.passes(1e-4));
        assert!(report.max_relative_error.is_infinite());
    }

    #[test]
    fn subsampling_counts() {
        assert_eq!(probe_indices(10, 64).len(), 10);
        assert_eq!(probe_indices(1000, 64).len(), 64);
        assert_eq!(probe_indices(1000, 128).len(), 128);
    }
}
