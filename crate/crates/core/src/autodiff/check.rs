use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Taped and central-difference gradients of the scalar `f` at `point`.
fn gradients<F>(f: &F, point: &Tensor, step: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let mut graph = Graph::new();
    let x = graph.leaf(point.clone())?;
    let loss = f(&mut graph, x)?;
    graph.backward(loss)?;
    let analytic = graph.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p)?;
        let out = f(&mut g, x)?;
        g.value(out).item()
    };
    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }
    Ok((analytic.into_data(), numeric))
}

/// Maximum relative error between the taped gradient of `f` at `point` and a
/// central finite difference with the given `step`.
///
/// Per coordinate the error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let (a, n) = gradients(&f, point, step)?;
    Ok(a.iter().zip(&n).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-12)).fold(0.0, f64::max))
}

/// Norm-wise relative error `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖)`.
///
/// Suited to large parameter tensors where some coordinates have gradients
/// near the finite-difference round-off floor.
pub fn finite_diff_check_normwise<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let (a, n) = gradients(&f, point, step)?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(&n).map(|(a, n)| a - n).collect();
    Ok(norm(&diff) / norm(&a).max(norm(&n)).max(1e-300))
}
