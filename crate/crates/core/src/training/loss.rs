use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::moe::l1_gate_penalty;
use crate::scalar::Scalar;

/// The three objective terms and their weighted total, all `[1]`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// Classification loss of the base network.
    pub base: Var,
    /// Batch-mean of `Σ_l ‖g^l‖₁`.
    pub gate: Var,
    /// Auxiliary classification loss on the embedding.
    pub embedding: Var,
}

/// `L_b + λ·L_g + μ·L_e`. Terms with a zero coefficient are not added, so
/// `λ = μ = 0` yields exactly `L_b`.
pub fn deepmoe_loss<T: Scalar>(
    graph: &mut Graph<T>,
    logits: Var,
    aux_logits: Var,
    gates: &[Var],
    labels: &[usize],
    lambda: f64,
    mu: f64,
) -> Result<LossTerms> {
    for (name, v) in [("lambda", lambda), ("mu", mu)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Contract(format!("{name} must be finite and nonnegative, got {v}")));
        }
    }
    let batch = graph.shape(logits)[0];
    if graph.shape(aux_logits)[0] != batch || gates.iter().any(|&g| graph.shape(g)[0] != batch) {
        return Err(Error::Shape(format!("loss inputs disagree on batch size {batch}")));
    }
    let base = graph.softmax_cross_entropy(logits, labels)?;
    let embedding = graph.softmax_cross_entropy(aux_logits, labels)?;
    let l1 = l1_gate_penalty(graph, gates)?;
    let gate = graph.scale(l1, T::lit(1.0 / batch as f64));
    let mut total = base;
    if lambda != 0.0 {
        let t = graph.scale(gate, T::lit(lambda));
        total = graph.add(total, t)?;
    }
    if mu != 0.0 {
        let t = graph.scale(embedding, T::lit(mu));
        total = graph.add(total, t)?;
    }
    Ok(LossTerms { total, base, gate, embedding })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn degenerate_weights_give_base_loss() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 1.0]).unwrap());
        let aux = g.leaf(Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 2.0, 0.0, 1.0]).unwrap());
        let gate = g.leaf(Tensor::new(vec![2, 2], vec![0.5, 0.0, 1.0, 2.0]).unwrap());
        let t = deepmoe_loss(&mut g, logits, aux, &[gate], &[1, 2], 0.0, 0.0).unwrap();
        assert_eq!(g.value(t.total).item(), g.value(t.base).item());
        assert_eq!(g.value(t.gate).item(), 3.5 / 2.0);
        assert!(deepmoe_loss(&mut g, logits, aux, &[gate], &[1, 2], -0.1, 0.0).is_err());
        assert!(deepmoe_loss(&mut g, logits, aux, &[gate], &[1, 2], 0.0, -1.0).is_err());
    }
}
