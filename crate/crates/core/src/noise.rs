//! Seeded Gaussian noise tensors. Every random draw in the crate goes through
//! an explicit ChaCha stream so runs are reproducible and resumable.

use candle_core::{DType, Device, Shape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

pub fn standard_normal<R, S>(rng: &mut R, shape: S, dtype: DType, device: &Device) -> Result<Tensor>
where
    R: Rng + ?Sized,
    S: Into<Shape>,
{
    let shape = shape.into();
    let v: Vec<f64> = (0..shape.elem_count())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}
