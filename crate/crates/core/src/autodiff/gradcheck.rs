use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central differences.
///
/// `build` receives a fresh graph and one trainable leaf per entry of `inputs`
/// and must return a scalar. Returns the maximum over all leaf entries of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    grad_check_at(build, inputs, h, &coords)
}

/// [`grad_check`] restricted to the `(input, flat index)` entries in `coords`.
pub fn grad_check_at<F>(build: F, inputs: &[Tensor], h: f64, coords: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.check_finite()?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.check_finite()?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| g.grad(*v)).collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(i, j) in coords {
        if i >= inputs.len() || j >= inputs[i].numel() {
            return Err(Error::invalid("grad_check", format!("coordinate {i}[{j}] out of range")));
        }
        let orig = inputs[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(Error::invalid("grad_check", format!("non-finite difference at input {i}[{j}]")));
        }
        let err = (analytic[i].data()[j] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
