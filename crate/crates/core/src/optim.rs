//! SGD with momentum and L2 weight decay.

use std::collections::HashMap;

use crate::error::{shape_err, Result};
use crate::params::{ParamGroup, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Velocity buffers keyed by parameter name, allocated on first use.
pub type Velocity<T> = HashMap<String, Tensor<T>>;

/// One step over every trainable parameter that has a gradient:
/// `v <- m*v + grad + wd*p`, `p <- p - lr*v`.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &HashMap<String, Tensor<T>>,
    velocity: &mut Velocity<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let (lr, m, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for entry in params.entries_mut() {
        if !entry.trainable {
            continue;
        }
        let Some(g) = grads.get(&entry.name) else { continue };
        if g.shape() != entry.tensor.shape() {
            return shape_err(format!("gradient {:?} for {} {:?}", g.shape(), entry.name, entry.tensor.shape()));
        }
        let v = velocity.entry(entry.name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for ((p, v), &g) in entry.tensor.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = m * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// SGD state with a set of frozen parameter groups.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Velocity<T>,
    pub frozen: Vec<ParamGroup>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: HashMap::new(), frozen: Vec::new() }
    }

    /// Frozen groups receive no update and keep their velocity untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, mut grads: HashMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        if !self.frozen.is_empty() {
            grads.retain(|name, _| params.entry(name).is_some_and(|e| !self.frozen.contains(&e.group)));
        }
        sgd_momentum_step(params, &grads, &mut self.velocity, lr, self.momentum, self.weight_decay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> (ParamSet<f64>, HashMap<String, Tensor<f64>>) {
        let mut p = ParamSet::default();
        p.insert("w", Tensor::scalar(v), ParamGroup::Base, true);
        (p, HashMap::new())
    }

    #[test]
    fn plain_gradient_step() {
        let (mut p, mut g) = one(1.0);
        g.insert("w".into(), Tensor::scalar(0.5));
        sgd_momentum_step(&mut p, &g, &mut HashMap::new(), 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.0 - 0.1 * 0.5);
    }

    #[test]
    fn velocity_decays_geometrically_without_gradient() {
        let (mut p, mut g) = one(0.0);
        let mut vel = HashMap::new();
        vel.insert("w".to_string(), Tensor::scalar(1.0));
        g.insert("w".into(), Tensor::scalar(0.0));
        for k in 1..=4 {
            sgd_momentum_step(&mut p, &g, &mut vel, 0.1, 0.5, 0.0).unwrap();
            assert_eq!(vel["w"].item(), 0.5f64.powi(k));
        }
    }

    #[test]
    fn three_step_scalar_recurrence() {
        let (lr, m, wd) = (0.1, 0.9, 0.01);
        let grads = [0.3, -0.2, 0.5];
        let (mut p, _) = one(2.0);
        let mut vel = HashMap::new();
        let (mut ep, mut ev) = (2.0f64, 0.0f64);
        for &gv in &grads {
            let mut g = HashMap::new();
            g.insert("w".to_string(), Tensor::scalar(gv));
            sgd_momentum_step(&mut p, &g, &mut vel, lr, m, wd).unwrap();
            ev = m * ev + gv + wd * ep;
            ep -= lr * ev;
        }
        assert!((p.get("w").unwrap().item() - ep).abs() < 1e-15);
    }

    #[test]
    fn frozen_groups_and_buffers_untouched() {
        let mut p = ParamSet::<f64>::default();
        p.insert("a", Tensor::scalar(1.0), ParamGroup::Gate, true);
        p.insert("b", Tensor::scalar(1.0), ParamGroup::Base, false);
        p.insert("c", Tensor::scalar(1.0), ParamGroup::Base, true);
        let mut g = HashMap::new();
        for n in ["a", "b", "c"] {
            g.insert(n.to_string(), Tensor::scalar(1.0));
        }
        let mut opt = Sgd::new(0.0, 0.0);
        opt.frozen.push(ParamGroup::Gate);
        opt.step(&mut p, g, 1.0).unwrap();
        assert_eq!(p.get("a").unwrap().item(), 1.0);
        assert_eq!(p.get("b").unwrap().item(), 1.0);
        assert_eq!(p.get("c").unwrap().item(), 0.0);
    }
}
