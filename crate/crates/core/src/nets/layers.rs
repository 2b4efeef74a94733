//! Building blocks shared by both problem architectures.

use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Embedding, Linear};

use super::params::ParamStore;
use crate::error::Result;

pub fn elu(x: &Tensor) -> Result<Tensor> {
    Ok(x.elu(1.0)?)
}

/// Dense layer with PyTorch-style `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` init.
pub fn linear(ps: &mut ParamStore, path: &str, d_in: usize, d_out: usize) -> Result<Linear> {
    let bound = 1.0 / (d_in as f64).sqrt();
    let w = ps.uniform(&format!("{path}.weight"), (d_out, d_in), bound)?;
    let b = ps.uniform(&format!("{path}.bias"), d_out, bound)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn embedding(ps: &mut ParamStore, path: &str, count: usize, dim: usize) -> Result<Embedding> {
    let e = ps.uniform(&format!("{path}.weight"), (count, dim), 1.0)?;
    Ok(Embedding::new(e, dim))
}

/// 1D convolution computed as an explicit im2col followed by a matmul, so
/// that its backward pass only involves narrow, concatenation and matmul.
/// candle's CPU convolution gives wrong weight gradients for batches larger
/// than one and underflows on short padded inputs.
#[derive(Clone, Debug)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv1d {
    /// `(B, C, L)` to `(B, L_out, C * k)` patches, ordered `(c, j)`.
    fn patches(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, l) = x.dims3()?;
        let k = self.weight.dim(2)?;
        let s = self.stride;
        let l_out = (l - k) / s + 1;
        let x = if s > 1 {
            x.pad_with_zeros(2, 0, s - 1)?
        } else {
            x.clone()
        };
        let cols = (0..k)
            .map(|j| {
                let seg = x.narrow(2, j, l_out * s)?;
                if s > 1 {
                    seg.reshape((b, c, l_out, s))?.narrow(3, 0, 1)
                } else {
                    seg.unsqueeze(3)
                }
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Tensor::cat(&cols, 3)?
            .permute((0, 2, 1, 3))?
            .reshape((b, l_out, c * k))
    }
}

impl Module for Conv1d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = if self.padding > 0 {
            x.pad_with_zeros(2, self.padding, self.padding)?
        } else {
            x.clone()
        };
        let (c_out, c_in, k) = self.weight.dims3()?;
        let w = self.weight.reshape((c_out, c_in * k))?.t()?;
        let y = self.patches(&x)?.broadcast_matmul(&w)?;
        y.broadcast_add(&self.bias)?.transpose(1, 2)?.contiguous()
    }
}

pub fn conv1d(
    ps: &mut ParamStore,
    path: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Conv1d> {
    let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
    let weight = ps.uniform(&format!("{path}.weight"), (c_out, c_in, kernel), bound)?;
    let bias = ps.uniform(&format!("{path}.bias"), c_out, bound)?;
    Ok(Conv1d {
        weight,
        bias,
        stride,
        padding,
    })
}

pub fn conv2d(
    ps: &mut ParamStore,
    path: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Conv2d> {
    let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
    let w = ps.uniform(
        &format!("{path}.weight"),
        (c_out, c_in, kernel, kernel),
        bound,
    )?;
    let b = ps.uniform(&format!("{path}.bias"), c_out, bound)?;
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    Ok(Conv2d::new(w, Some(b), cfg))
}

/// `x + dense2(elu(dense1(x)))`, width preserving.
#[derive(Clone, Debug)]
pub struct Residual {
    inner: Linear,
    outer: Linear,
}

impl Residual {
    pub fn new(ps: &mut ParamStore, path: &str, width: usize) -> Result<Self> {
        Ok(Self {
            inner: linear(ps, &format!("{path}.inner"), width, width)?,
            outer: linear(ps, &format!("{path}.outer"), width, width)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = elu(&self.inner.forward(x)?)?;
        Ok((x + self.outer.forward(&h)?)?)
    }
}

/// Transposed 1D convolution, output length `(L - 1) * stride + kernel`.
///
/// Computed as a stride-1 convolution over the zero-stuffed, fully padded
/// input, so the backward pass only involves ordinary convolutions.
#[derive(Clone, Debug)]
pub struct TransposedConv1d {
    conv: Conv1d,
    stride: usize,
    kernel: usize,
}

impl TransposedConv1d {
    pub fn new(
        ps: &mut ParamStore,
        path: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: conv1d(ps, path, c_in, c_out, kernel, 1, 0)?,
            stride,
            kernel,
        })
    }

    pub fn output_len(&self, len: usize) -> usize {
        (len - 1) * self.stride + self.kernel
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, l) = x.dims3()?;
        let stuffed = if self.stride > 1 {
            let zeros = Tensor::zeros((b, c, l, self.stride - 1), x.dtype(), x.device())?;
            Tensor::cat(&[&x.unsqueeze(3)?, &zeros], 3)?
                .reshape((b, c, l * self.stride))?
                .narrow(2, 0, (l - 1) * self.stride + 1)?
        } else {
            x.clone()
        };
        let padded = stuffed.pad_with_zeros(2, self.kernel - 1, self.kernel - 1)?;
        Ok(self.conv.forward(&padded)?)
    }
}

/// Interpolation matrix `(2n, n)` of bilinear x2 upscaling along one axis
/// (half-pixel centers, edge clamped).
pub fn bilinear_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; 2 * n * n];
    for o in 0..2 * n {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let frac = src - i0 as f64;
        m[o * n + i0] += 1.0 - frac;
        m[o * n + i1] += frac;
    }
    m
}

/// Bilinear x2 upscaling of a `(B, C, H, W)` tensor with square `H = W`.
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let mh = Tensor::from_vec(bilinear_matrix(h), (2 * h, h), x.device())?.to_dtype(x.dtype())?;
    let mw = if w == h {
        mh.clone()
    } else {
        Tensor::from_vec(bilinear_matrix(w), (2 * w, w), x.device())?.to_dtype(x.dtype())?
    };
    // columns: (B*C*H, W) x (W, 2W)
    let y = x
        .reshape((b * c * h, w))?
        .matmul(&mw.t()?)?
        .reshape((b, c, h, 2 * w))?;
    // rows: move H last, apply, move back
    let y = y
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b * c * 2 * w, h))?
        .matmul(&mh.t()?)?
        .reshape((b, c, 2 * w, 2 * h))?
        .transpose(2, 3)?
        .contiguous()?;
    Ok(y)
}

/// Sums `g(h_j)` over all other nodes: `sum_j g(h_j) - g(h_i)`, nodes on the
/// second-to-last axis.
pub fn sum_over_others(g: &Tensor) -> Result<Tensor> {
    let total = g.sum_keepdim(D::Minus2)?;
    Ok(total.broadcast_sub(g)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn transposed_conv_matches_direct_scatter() {
        let mut ps = ParamStore::new(DType::F64, 4);
        let t = TransposedConv1d::new(&mut ps, "t", 2, 3, 4, 2).unwrap();
        let x = Tensor::from_vec(
            (0..10).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(),
            (1, 2, 5),
            &Device::Cpu,
        )
        .unwrap();
        let y = t.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 3, t.output_len(5)]);
        // scatter definition: y[o, i*s + k'] += x[c, i] * w[o, c, K-1-k']
        let w = t.conv.weight.to_vec3::<f64>().unwrap();
        let b = t.conv.bias.to_vec1::<f64>().unwrap();
        let xs = x.to_vec3::<f64>().unwrap();
        let ys = y.to_vec3::<f64>().unwrap();
        let len = t.output_len(5);
        for o in 0..3 {
            let mut expect = vec![b[o]; len];
            for c in 0..2 {
                for i in 0..5 {
                    for k in 0..4 {
                        expect[i * 2 + k] += xs[0][c][i] * w[o][c][3 - k];
                    }
                }
            }
            for p in 0..len {
                assert!((expect[p] - ys[0][o][p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_rows_are_convex() {
        for n in [1, 4, 8] {
            let m = bilinear_matrix(n);
            for o in 0..2 * n {
                let s: f64 = m[o * n..(o + 1) * n].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        // 2 -> 4: [1, 0.75/0.25, 0.25/0.75, 1]
        let m = bilinear_matrix(2);
        assert_eq!(m, vec![1.0, 0.0, 0.75, 0.25, 0.25, 0.75, 0.0, 1.0]);
    }

    #[test]
    fn upsample_shapes_and_constant_preserved() {
        let x = Tensor::ones((2, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let y = upsample_bilinear2x(&x).unwrap();
        assert_eq!(y.dims(), &[2, 3, 8, 8]);
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn others_sum_excludes_self() {
        let g = Tensor::new(&[[[1.0f64], [2.0], [4.0]]], &Device::Cpu).unwrap();
        let s = sum_over_others(&g)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(s, vec![6.0, 5.0, 3.0]);
        let single = Tensor::new(&[[[3.0f64, -1.0]]], &Device::Cpu).unwrap();
        let s = sum_over_others(&single)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn explicit_padding_matches_builtin_and_survives_short_inputs() {
        let mut ps = ParamStore::new(DType::F64, 5);
        let c = conv1d(&mut ps, "c", 2, 3, 7, 1, 3).unwrap();
        let x = Tensor::from_vec(
            (0..40).map(|i| (i as f64 * 0.29).cos()).collect::<Vec<_>>(),
            (1, 2, 20),
            &Device::Cpu,
        )
        .unwrap();
        let ours = c.forward(&x).unwrap();
        let builtin = x
            .conv1d(&c.weight, 3, 1, 1, 1)
            .unwrap()
            .broadcast_add(&c.bias.reshape((1, 3, 1)).unwrap())
            .unwrap();
        let diff = (ours - builtin).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        let short = candle_core::Var::from_tensor(&x.narrow(2, 0, 5).unwrap()).unwrap();
        let y = c.forward(short.as_tensor()).unwrap();
        assert_eq!(y.dims(), &[1, 3, 5]);
        y.sum_all().unwrap().backward().unwrap();
    }
}
