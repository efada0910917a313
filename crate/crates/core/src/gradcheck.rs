//! Central finite-difference verification of reverse-mode gradients.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{DeepMoe, ForwardOptions};
use crate::params::{ParamGroup, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::deepmoe_loss;

/// A scalar function of named parameters and an input, at any precision.
pub trait GradCheckable {
    fn loss<S: Scalar>(&self, graph: &mut Graph<S>, params: &ParamSet<S>, input: &Tensor<S>) -> Result<Var>;
}

/// Precision of the finite-difference evaluations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NumericPrecision {
    /// Same scalar type as the analytic gradients.
    Native,
    /// Always `f64`, so that central differences carry no low-precision round-off.
    F64,
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub n_coords: usize,
    pub h: f64,
    pub seed: u64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub numeric: NumericPrecision,
    /// Give up after this many kink rejections per requested coordinate.
    pub max_rejections_per_coord: usize,
}

impl GradcheckOptions {
    pub fn new(n_coords: usize, h: f64, seed: u64) -> Self {
        Self { n_coords, h, seed, floor: 1e-12, numeric: NumericPrecision::F64, max_rejections_per_coord: 20 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub group: ParamGroup,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checks: Vec<CoordCheck>,
    /// Coordinates discarded because `θ ± h` crossed a ReLU or max-pool kink.
    pub skipped_kinks: usize,
}

impl GradcheckReport {
    pub fn checked(&self) -> usize {
        self.checks.len()
    }

    pub fn count_in(&self, group: ParamGroup) -> usize {
        self.checks.iter().filter(|c| c.group == group).count()
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval_at<S: Scalar, N: GradCheckable>(net: &N, params: &ParamSet<S>, input: &Tensor<S>) -> Result<(f64, u64)> {
    let mut g = Graph::new();
    g.track_activation_pattern();
    let l = net.loss(&mut g, params, input)?;
    Ok((g.value(l).item().to_f64_lossy(), g.activation_pattern().expect("tracking enabled")))
}

struct Numeric<S: Scalar> {
    params: ParamSet<S>,
    input: Tensor<S>,
    base_pattern: u64,
}

impl<S: Scalar> Numeric<S> {
    fn new<T: Scalar, N: GradCheckable>(net: &N, params: &ParamSet<T>, input: &Tensor<T>) -> Result<Self> {
        let params = params.cast::<S>();
        let input = input.cast::<S>();
        let (_, base_pattern) = eval_at(net, &params, &input)?;
        Ok(Self { params, input, base_pattern })
    }

    /// Central difference at one coordinate, or `None` across a kink.
    fn derivative<N: GradCheckable>(&mut self, net: &N, name: &str, index: usize, h: f64) -> Result<Option<f64>> {
        let orig = self.params.get(name).unwrap().data()[index];
        let at = |v: S, this: &mut Self| -> Result<(f64, u64)> {
            this.params.get_mut(name).unwrap().data_mut()[index] = v;
            eval_at(net, &this.params, &this.input)
        };
        let hs = S::lit(h);
        let (plus, pp) = at(orig + hs, self)?;
        let (minus, pm) = at(orig - hs, self)?;
        self.params.get_mut(name).unwrap().data_mut()[index] = orig;
        if pp != self.base_pattern || pm != self.base_pattern {
            return Ok(None);
        }
        // The step actually taken after rounding to S.
        let step = (orig + hs).to_f64_lossy() - (orig - hs).to_f64_lossy();
        Ok(Some((plus - minus) / step))
    }
}

/// Compare reverse-mode gradients of `net` at `params` with central
/// differences on randomly sampled coordinates (a tensor uniformly, then a
/// coordinate within it), skipping coordinates near a kink.
pub fn finite_diff_gradcheck_with<T: Scalar, N: GradCheckable>(
    net: &N,
    params: &ParamSet<T>,
    input: &Tensor<T>,
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut g = Graph::new();
    let loss = net.loss(&mut g, params, input)?;
    g.backward(loss)?;
    let grads = g.param_grads(params);
    let candidates: Vec<_> = params.entries().iter().filter(|e| e.trainable && e.tensor.numel() > 0).collect();
    if candidates.is_empty() {
        return Err(Error::Contract("gradient check without trainable parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport::default();
    let mut derivative: Box<dyn FnMut(&str, usize) -> Result<Option<f64>> + '_> = match opts.numeric {
        NumericPrecision::F64 => {
            let mut num = Numeric::<f64>::new(net, params, input)?;
            Box::new(move |n, i| num.derivative(net, n, i, opts.h))
        }
        NumericPrecision::Native => {
            let mut num = Numeric::<T>::new(net, params, input)?;
            Box::new(move |n, i| num.derivative(net, n, i, opts.h))
        }
    };
    let budget = opts.n_coords * (opts.max_rejections_per_coord + 1);
    let total: usize = candidates.iter().map(|e| e.tensor.numel()).sum();
    let mut seen = HashSet::new();
    let mut attempts = 0;
    while report.checks.len() < opts.n_coords && attempts < budget {
        attempts += 1;
        let entry = candidates[rng.random_range(0..candidates.len())];
        let index = rng.random_range(0..entry.tensor.numel());
        if !seen.insert((entry.name.as_str(), index)) {
            if seen.len() >= total {
                break;
            }
            continue;
        }
        let Some(numeric) = derivative(&entry.name, index)? else {
            report.skipped_kinks += 1;
            continue;
        };
        let analytic = grads[&entry.name].data()[index].to_f64_lossy();
        let rel_error = relative_error(analytic, numeric, opts.floor);
        report.max_rel_error = report.max_rel_error.max(rel_error);
        report.checks.push(CoordCheck {
            param: entry.name.clone(),
            group: entry.group,
            index,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(report)
}

/// Maximum relative error over `n_coords` coordinates with default options.
pub fn finite_diff_gradcheck<T: Scalar, N: GradCheckable>(
    net: &N,
    params: &ParamSet<T>,
    input: &Tensor<T>,
    seed: u64,
    n_coords: usize,
    h: f64,
) -> Result<f64> {
    Ok(finite_diff_gradcheck_with(net, params, input, GradcheckOptions::new(n_coords, h, seed))?.max_rel_error)
}

/// Full DeepMoE objective in training mode (batch statistics) on fixed labels.
#[derive(Clone, Debug)]
pub struct DeepMoeObjective {
    pub config: crate::model::ModelConfig,
    pub plan: crate::model::ModelPlan,
    pub labels: Vec<usize>,
    pub lambda: f64,
    pub mu: f64,
}

impl DeepMoeObjective {
    pub fn new<T: Scalar>(model: &DeepMoe<T>, labels: Vec<usize>, lambda: f64, mu: f64) -> Self {
        Self { config: model.config.clone(), plan: model.plan.clone(), labels, lambda, mu }
    }
}

impl GradCheckable for DeepMoeObjective {
    fn loss<S: Scalar>(&self, graph: &mut Graph<S>, params: &ParamSet<S>, input: &Tensor<S>) -> Result<Var> {
        let model = DeepMoe { config: self.config.clone(), plan: self.plan.clone(), params: params.clone() };
        let x = graph.constant(input.clone());
        let out = model.forward(graph, x, ForwardOptions::train())?;
        let terms = deepmoe_loss(graph, out.logits, out.aux_logits, &out.gates, &self.labels, self.lambda, self.mu)?;
        Ok(terms.total)
    }
}
