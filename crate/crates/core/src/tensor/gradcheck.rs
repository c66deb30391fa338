//! Central-difference gradient checking.

use super::{Graph, NodeId, Result, Tensor, TensorError};

/// Compare the analytic gradient of a scalar-valued tensor function against
/// central differences and return the worst relative error
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)` over coordinates.
///
/// `f` receives a fresh graph and the leaf id for `x` and must build a
/// scalar loss deterministically (dropout disabled).
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(TensorError::Contract(format!("step {} outside [1e-7, 1e-3]", h)));
    }

    let eval = |values: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(Tensor::new(x.shape().to_vec(), values.to_vec())?.with_grad());
        let loss = f(&mut g, leaf)?;
        if g.value(loss).numel() != 1 {
            return Err(TensorError::Contract("grad_check needs a scalar-valued f".into()));
        }
        Ok(g.value(loss).item())
    };

    // Determinism gate: two evaluations at the same point must agree exactly.
    let v0 = eval(x.data())?;
    let v1 = eval(x.data())?;
    if v0.to_bits() != v1.to_bits() {
        return Err(TensorError::Contract(
            "f is nondeterministic at a fixed point; disable dropout/randomness".into(),
        ));
    }

    let mut g = Graph::new();
    let leaf = g.leaf(x.clone().with_grad());
    let loss = f(&mut g, leaf)?;
    g.backward(loss)?;
    let analytic = g.grad_or_zeros(leaf);

    let mut worst = 0.0f64;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = eval(&probe)?;
        probe[i] = orig - h;
        let minus = eval(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
