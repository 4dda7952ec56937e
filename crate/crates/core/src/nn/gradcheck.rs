//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::nn::graph::{Bound, Graph, NodeId};
use crate::nn::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradientReport {
    /// Per store, per parameter.
    pub analytic: Vec<Vec<Tensor>>,
    pub numeric: Vec<Vec<Tensor>>,
    pub max_rel_error: f64,
    /// Name and flat index of the entry with the largest error.
    pub worst: Option<(String, usize)>,
}

impl GradientReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Below this magnitude errors are measured absolutely: central differences
/// on an O(1) loss carry about 1e-11 of rounding noise, so smaller entries
/// cannot be resolved to a relative 1e-4.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn evaluate<F>(stores: &[ParamStore], build: &F, with_grads: bool) -> Result<(f64, Option<Vec<Vec<Tensor>>>)>
where
    F: Fn(&mut Graph<'_>, &[Bound]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound: Vec<Bound> = stores.iter().map(|s| g.bind(s)).collect();
    let loss = build(&mut g, &bound)?;
    let value = g.scalar(loss);
    if !with_grads {
        return Ok((value, None));
    }
    let grads = g.backward(loss)?;
    let per_store = bound.iter().zip(stores).map(|(b, s)| grads.for_params(b, s)).collect();
    Ok((value, Some(per_store)))
}

/// Compares the tape's gradient of the scalar built by `build` against
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every scalar of every store.
pub fn check_gradients<F>(stores: &[ParamStore], epsilon: f64, build: F) -> Result<GradientReport>
where
    F: Fn(&mut Graph<'_>, &[Bound]) -> Result<NodeId>,
{
    let (value, analytic) = evaluate(stores, &build, true)?;
    let (again, _) = evaluate(stores, &build, false)?;
    if value.to_bits() != again.to_bits() {
        return Err(Error::ContractViolation(format!(
            "loss is not deterministic under pinned inputs ({value} vs {again})"
        )));
    }
    let analytic = analytic.expect("requested gradients");
    let mut work: Vec<ParamStore> = stores.to_vec();
    let mut numeric = Vec::with_capacity(stores.len());
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    for s in 0..stores.len() {
        let mut per_param = Vec::with_capacity(stores[s].len());
        for p in 0..stores[s].len() {
            let n = stores[s].values()[p].len();
            let mut num = stores[s].values()[p].clone();
            for i in 0..n {
                let orig = stores[s].values()[p].data()[i];
                work[s].values_mut()[p].data_mut()[i] = orig + epsilon;
                let (plus, _) = evaluate(&work, &build, false)?;
                work[s].values_mut()[p].data_mut()[i] = orig - epsilon;
                let (minus, _) = evaluate(&work, &build, false)?;
                work[s].values_mut()[p].data_mut()[i] = orig;
                let d = (plus - minus) / (2.0 * epsilon);
                num.data_mut()[i] = d;
                let err = relative_error(analytic[s][p].data()[i], d);
                if err > max_rel_error || worst.is_none() {
                    max_rel_error = max_rel_error.max(err);
                    worst = Some((stores[s].names()[p].clone(), i));
                }
            }
            per_param.push(num);
        }
        numeric.push(per_param);
    }
    Ok(GradientReport { analytic, numeric, max_rel_error, worst })
}
