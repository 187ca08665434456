//! Central finite-difference gradient checks.
//!
//! The numerical side only ever runs forward passes, so it is independent of
//! the backward code it validates.

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

fn eval<F>(store: &ParamStore, mode: Mode, inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(store, mode);
    let vars = inputs
        .iter()
        .map(|t| g.input_with_grad(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `h` for every element of every input.
pub fn check<F>(store: &ParamStore, mode: Mode, inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(store, mode);
    let vars = inputs
        .iter()
        .map(|t| g.input_with_grad(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(g);

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for j in 0..a.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(store, mode, &work, &f)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval(store, mode, &work, &f)?;
            work[i].data_mut()[j] = orig;
            numeric[j] = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        rel_errors.push(if denom < 1e-12 { diff } else { diff / denom });
    }
    Ok(GradCheck { rel_errors })
}
