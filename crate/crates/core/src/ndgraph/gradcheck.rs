use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Compares the reverse-mode gradient of a scalar function against central
/// differences and returns
/// `max_i |analytic_i - fd_i| / max(1, |fd_i|)`.
///
/// `f` receives a fresh graph and the leaf holding `x` (or its perturbation)
/// and must return a `1 x 1` node.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::contract(format!("step size {h} must be positive")));
    }
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let root = f(&mut g, leaf)?;
    let base = g.value(root).item()?;
    if !base.is_finite() {
        return Err(Error::numeric("finite_diff_check", "f(x) is not finite"));
    }
    g.backward(root)?;
    let analytic = g.grad(leaf).expect("leaf requires grad").clone();

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(probe);
        let root = f(&mut g, leaf)?;
        let v = g.value(root).item()?;
        if !v.is_finite() {
            return Err(Error::numeric("finite_diff_check", "perturbed f is not finite"));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
