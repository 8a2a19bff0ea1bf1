//! Central-difference gradient oracle.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of [`rel_err`]; keeps near-zero gradients from turning
/// truncation noise into huge relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// element of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Outcome of comparing tape gradients against finite differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Largest [`rel_err`] over all elements of all inputs.
    pub max_rel_err: f64,
    /// Per-input maxima, in input order.
    pub per_input: Vec<f64>,
}

/// Builds the scalar function `build` on fresh graphs and compares
/// [`Graph::backward`] against [`finite_diff_grad`] for every input.
///
/// `tamper` lets a caller corrupt the analytic gradient before comparison;
/// the gradient-check harness uses it to prove the checker can fail.
pub fn check_with<F, M>(inputs: &[Tensor<f64>], h: f64, build: F, mut tamper: M) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    M: FnMut(usize, &mut Tensor<f64>),
{
    let mut g = Graph::new().without_finite_check();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut analytic = grads.get(vars[i]);
        tamper(i, &mut analytic);
        let numeric = finite_diff_grad(
            |probe| {
                let mut g = Graph::new().without_finite_check();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let root = build(&mut g, &vars)?;
                Ok(g.value(root).item())
            },
            input,
            h,
        )?;
        let worst = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0, f64::max);
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradReport { max_rel_err, per_input })
}

/// [`check_with`] without tampering.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_with(inputs, h, build, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_f64(vec![4], &[0.3, -1.0, 2.5, 7.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-4).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::from_f64(vec![1], &[3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::from_f64(vec![1], &[3.0]).unwrap();
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
    }
}
