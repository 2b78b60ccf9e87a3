//! Central finite-difference gradient checks.

use super::graph::{Graph, NodeId};
use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::Result;

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `build` with respect to each input
/// entry against central differences. `build` receives one leaf per input
/// and must return a scalar node. Returns the maximum relative error.
pub fn check_gradients<F>(inputs: &[Tensor], epsilon: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad_or_zeros(id)).collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data()[j];
            probe[i].data_mut()[j] = orig + epsilon;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - epsilon;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Same check, perturbing every entry of every parameter in `store`.
pub fn check_parameter_gradients<F>(store: &ParameterStore, epsilon: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let root = build(&mut g, store)?;
    g.backward(root)?;
    let used = g.params().clone();

    let mut probe = store.clone();
    let names: Vec<String> = store.names().cloned().collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let analytic = used
            .get(&name)
            .map(|&id| g.grad_or_zeros(id))
            .unwrap_or_else(|| {
                let [r, c] = store.get(&name).expect("listed name").shape();
                Tensor::zeros(r, c)
            });
        for j in 0..analytic.len() {
            let orig = store.get(&name).expect("listed name").data()[j];
            probe.get_mut(&name).expect("listed name").data_mut()[j] = orig + epsilon;
            let up = {
                let mut g = Graph::new();
                let r = build(&mut g, &probe)?;
                g.value(r).item()
            };
            probe.get_mut(&name).expect("listed name").data_mut()[j] = orig - epsilon;
            let down = {
                let mut g = Graph::new();
                let r = build(&mut g, &probe)?;
                g.value(r).item()
            };
            probe.get_mut(&name).expect("listed name").data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}
