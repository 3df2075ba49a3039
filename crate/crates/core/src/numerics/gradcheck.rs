//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

/// Maximum over coordinates of
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`, where the
/// numeric derivative is a central difference with the given step.
///
/// `f` records a scalar function of its input node on the supplied graph.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xn = g.param(x.clone());
    let y = f(&mut g, xn)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xn)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let n = g.constant(t);
        let y = f(&mut g, n)?;
        Ok(g.scalar(y))
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite derivative at coordinate {i}"
            )));
        }
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
