//! Central finite differences against candle's reverse-mode gradients.

use candle_core::{Tensor, Var};

use crate::error::Result;

/// Numerical gradient of `f` with respect to every element of `var`,
/// `(f(x + h) - f(x - h)) / 2h`. The variable is restored afterwards.
pub fn central_difference<F>(var: &Var, h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut() -> f64,
{
    let original = var.as_tensor().copy()?;
    let dtype = original.dtype();
    let shape = original.shape().clone();
    let base: Vec<f64> = original
        .flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1()?;
    let mut grad = Vec::with_capacity(base.len());
    let mut buf = base.clone();
    for i in 0..base.len() {
        buf[i] = base[i] + h;
        var.set(&Tensor::from_slice(&buf, shape.clone(), original.device())?.to_dtype(dtype)?)?;
        let plus = f();
        buf[i] = base[i] - h;
        var.set(&Tensor::from_slice(&buf, shape.clone(), original.device())?.to_dtype(dtype)?)?;
        let minus = f();
        buf[i] = base[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    var.set(&original)?;
    Ok(grad)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
