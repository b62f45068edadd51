use super::graph::{backward, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare the reverse-mode gradient of a scalar function against central
/// differences with step `h`.
///
/// Returns the largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`
/// over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut graph = Graph::new();
    let xv = graph.param(x.clone());
    let out = f(&mut graph, xv)?;
    let grads = backward(&graph, out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe.clone());
        let out = f(&mut g, v)?;
        let value = g.value(out);
        if !value.is_scalar() {
            return Err(Error::invalid("grad_check", "function must return a scalar"));
        }
        Ok(value.data()[0])
    };

    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
