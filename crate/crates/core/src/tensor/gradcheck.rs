//! Finite-difference gradient verification.
//!
//! The checker compares reverse-mode gradients against central differences
//! `(f(x + h e_i) - f(x - h e_i)) / 2h` coordinate by coordinate and reports
//! the worst relative error `|a - b| / max(|a|, |b|, 1e-8)`. It runs in
//! 64-bit and is intentionally independent of the backward implementation:
//! the numeric side only ever calls the forward path.

use super::Tensor;
use crate::error::{Error, Result};

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central-difference estimate with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArg("grad_check requires h > 0".into()));
    }
    // Analytic gradient.
    let var = Tensor::var(x.data().to_vec(), x.shape())?;
    let loss = f(&var)?;
    let grads = loss.backward()?;
    let analytic = grads
        .get(&var)
        .ok_or_else(|| Error::InvalidArg("f does not depend on x".into()))?
        .to_vec();

    // Central differences, one coordinate at a time.
    let base = x.data().to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::new(plus, x.shape())?)?.item()?;
        let fm = f(&Tensor::new(minus, x.shape())?)?.item()?;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}

/// Gradient check of a loss over selected parameter coordinates.
///
/// `f` maps the full parameter list to a scalar loss; `coords` names
/// `(param index, flat element index)` pairs to probe. Checking a sampled
/// subset keeps the cost of central differences on large models bounded.
pub fn grad_check_params<F>(
    f: F,
    params: &[Tensor<f64>],
    coords: &[(usize, usize)],
    h: f64,
) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArg("grad_check requires h > 0".into()));
    }
    let vars: Vec<Tensor<f64>> = params
        .iter()
        .map(|p| Tensor::var(p.data().to_vec(), p.shape()))
        .collect::<Result<_>>()?;
    let loss = f(&vars)?;
    let grads = loss.backward()?;

    let mut max_rel = 0.0f64;
    for &(pi, ei) in coords {
        if pi >= params.len() || ei >= params[pi].numel() {
            return Err(Error::InvalidArg(format!(
                "coordinate ({pi}, {ei}) out of range"
            )));
        }
        let analytic = grads.get(&vars[pi]).map(|g| g[ei]).unwrap_or(0.0);

        let eval = |delta: f64| -> Result<f64> {
            let perturbed: Vec<Tensor<f64>> = params
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let mut d = p.data().to_vec();
                    if j == pi {
                        d[ei] += delta;
                    }
                    Tensor::new(d, p.shape())
                })
                .collect::<Result<_>>()?;
            f(&perturbed)?.item()
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    }
    Ok(max_rel)
}
