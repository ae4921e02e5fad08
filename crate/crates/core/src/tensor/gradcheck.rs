use super::{Result, Tape, Tensor, TensorError, Var};

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_analytic − g_fd| / max(|g_fd|, 1e-8)` over checked entries.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose ±ε perturbation crosses a ReLU or log-floor boundary.
    pub excluded_kinks: usize,
    /// `(input index, flat entry)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

/// Compares tape gradients against central differences for every entry of
/// every input.
///
/// `graph` receives a fresh tape and one leaf per input and must return a
/// scalar. Entries near a non-differentiable point are skipped and counted.
pub fn finite_diff_check<F>(graph: F, inputs: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(TensorError::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if let Some(i) = inputs.iter().position(|t| !t.is_finite()) {
        return Err(TensorError::InvalidArgument(format!("input {i} is not finite")));
    }

    let eval = |values: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = graph(&mut tape, &vars)?;
        Ok((tape.scalar(out), tape.kink_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let centre_pattern = tape.kink_pattern();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded_kinks: 0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for e in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[e];
            work[ti].data_mut()[e] = orig + epsilon;
            let (plus, plus_pattern) = eval(&work)?;
            work[ti].data_mut()[e] = orig - epsilon;
            let (minus, minus_pattern) = eval(&work)?;
            work[ti].data_mut()[e] = orig;

            if plus_pattern != centre_pattern || minus_pattern != centre_pattern {
                report.excluded_kinks += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * epsilon);
            let err = (analytic.data()[e] - fd).abs() / fd.abs().max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((ti, e));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_is_exact() {
        let w = Tensor::matrix(3, 2, vec![0.3, -0.1, 0.8, 0.5, -0.7, 0.2]).unwrap();
        let x = Tensor::matrix(1, 3, vec![1.5, -2.0, 0.25]).unwrap();
        let report = finite_diff_check(
            |tape, v| {
                let y = tape.matmul(v[1], v[0])?;
                tape.sum(y)
            },
            &[w, x],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 9);
    }

    #[test]
    fn relu_at_zero_is_excluded() {
        let x = Tensor::vector(vec![0.0, 1.0, -2.0]);
        let report = finite_diff_check(
            |tape, v| {
                let r = tape.relu(v[0])?;
                tape.sum(r)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert_eq!(report.excluded_kinks, 1);
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let r = finite_diff_check(|tape, v| tape.sum(v[0]), &[Tensor::vector(vec![1.0])], 0.0);
        assert!(r.is_err());
    }
}
