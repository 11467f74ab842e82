//! Central finite-difference gradient checking in 64-bit.

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Max over checked elements of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Largest analytic gradient magnitude among the probed elements.
    pub max_abs_grad: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compare reverse-mode gradients of `f` at `inputs` against central
/// differences with step `h`. At most `max_per_input` evenly spaced elements of
/// each input are probed.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, max_per_input: usize, f: F) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter().map(|&v| grads.get_or_zero(v)).collect()
    };
    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = probe.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.value().item())
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut largest: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = n.div_ceil(max_per_input.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let x0 = input.data()[e];
            probe[i].data_mut()[e] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[e] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[e];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            largest = largest.max(a.abs());
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
        max_abs_grad: largest,
    })
}
