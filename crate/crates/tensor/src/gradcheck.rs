//! Central finite-difference gradient checking.

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compares analytic gradients of `f` against central differences.
///
/// `f` builds its output from the given input vars; non-scalar outputs are
/// reduced by summation. Returns the maximum over all input elements of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let out = if g.value(out).len() == 1 { out } else { g.sum(out)? };
        (g, vars, out)
    };
    g.backward(out)?;
    // Perturbed outputs are differenced elementwise before reduction, which
    // keeps large sums from swamping the O(eps) change.
    let evaluate = |values: &[Tensor]| -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).clone())
    };
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            let (up, down) = (orig + epsilon, orig - epsilon);
            probe[i].data_mut()[j] = up;
            let plus = evaluate(&probe)?;
            probe[i].data_mut()[j] = down;
            let minus = evaluate(&probe)?;
            probe[i].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(invalid(
                    "gradient_check",
                    format!("non-finite perturbed value at input {i}, element {j}"),
                ));
            }
            let delta: f64 = plus
                .data()
                .iter()
                .zip(minus.data())
                .map(|(p, m)| p - m)
                .sum();
            let numeric = delta / (up - down);
            let a = analytic[i].data()[j];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
