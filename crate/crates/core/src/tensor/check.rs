//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of `f` at `point` with central
/// differences and returns the largest
/// `|analytic − numeric| / max(1, |analytic|)` over all entries.
///
/// `f` records a scalar loss on the supplied graph given one parameter
/// leaf per matrix in `point`.
pub fn grad_check<F>(f: F, point: &[Matrix], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("grad_check eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|m| g.param(m.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |params: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|m| g.param(m.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..probe[p].len() {
            let orig = probe[p].as_slice()[i];
            probe[p].as_mut_slice()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[p].as_mut_slice()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[p].as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.as_slice()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
