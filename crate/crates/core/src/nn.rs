//! Small layer library on top of `candle_core` tensors.
//!
//! Layers register their weights through a [`Builder`] so that every tensor
//! lands in the parameter registry with its group and trainability.

use candle_core::{DType, Device, Tensor, Var, D};

use crate::error::Result;
use crate::params::{Builder, Init};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &Builder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(b, in_dim, out_dim, bias, Init::FanIn(in_dim), Init::FanIn(in_dim))
    }

    pub fn zeros(b: &Builder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(b, in_dim, out_dim, bias, Init::Zeros, Init::Zeros)
    }

    pub fn with_init(
        b: &Builder,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        w_init: Init,
        b_init: Init,
    ) -> Result<Self> {
        let weight = b.param("weight", &[out_dim, in_dim], w_init)?;
        let bias = if bias {
            Some(b.param("bias", &[out_dim], b_init)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("linear input has rank >= 1");
        let rows = x.elem_count() / in_dim.max(1);
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank >= 1") = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// 2D convolution with square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &Builder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        Self::with_init(b, in_c, out_c, kernel, stride, padding, bias, Init::FanIn(fan_in))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        b: &Builder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        w_init: Init,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = b.param("weight", &[out_c, in_c, kernel, kernel], w_init)?;
        let bias = if bias {
            Some(b.param("bias", &[out_c], Init::FanIn(fan_in))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (out_c, in_c, k, _) = self.weight.dims4()?;
        let y = if k == 1 && self.stride == 1 && self.padding == 0 {
            // pointwise: a batched matmul over flattened pixels
            let (bsz, _, h, w) = x.dims4()?;
            let w2 = self.weight.reshape((out_c, in_c))?;
            w2.broadcast_matmul(&x.reshape((bsz, in_c, h * w))?)?
                .reshape((bsz, out_c, h, w))?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, out_c, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Transposed convolution whose kernel equals its stride (non-overlapping
/// upsampling), computed as a matmul followed by a pixel shuffle.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub factor: usize,
}

impl ConvTranspose2d {
    pub fn new(b: &Builder, in_c: usize, out_c: usize, factor: usize, bias: bool) -> Result<Self> {
        let fan_in = out_c * factor * factor;
        let weight = b.param("weight", &[in_c, out_c, factor, factor], Init::FanIn(fan_in))?;
        let bias = if bias {
            Some(b.param("bias", &[out_c], Init::FanIn(fan_in))?)
        } else {
            None
        };
        Ok(Self { weight, bias, factor })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (in_c, out_c, k, _) = self.weight.dims4()?;
        let (bsz, _, h, w) = x.dims4()?;
        let cols = x
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .reshape((bsz * h * w, in_c))?
            .matmul(&self.weight.reshape((in_c, out_c * k * k))?)?;
        let y = cols
            .reshape((bsz, h, w, out_c, k, k))?
            .permute((0, 3, 1, 4, 2, 5))?
            .contiguous()?
            .reshape((bsz, out_c, h * k, w * k))?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, out_c, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Tensor,
    pub bias: Tensor,
    running_mean: Option<Var>,
    running_var: Option<Var>,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(b: &Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[channels], Init::Ones)?,
            bias: b.param("bias", &[channels], Init::Zeros)?,
            running_mean: b.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: b.buffer("running_var", &[channels], Init::Ones)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (bsz, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let n = bsz * h * w;
            let flat = x.transpose(0, 1)?.contiguous()?.reshape((c, n))?;
            let mean = flat.mean_keepdim(1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            if let (Some(rm), Some(rv)) = (&self.running_mean, &self.running_var) {
                let m = self.momentum;
                let unbiased = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                let new_mean = ((rm.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                let new_var =
                    ((rv.as_tensor() * (1.0 - m))? + (var.detach().flatten_all()? * (m * unbiased))?)?;
                rm.set(&new_mean)?;
                rv.set(&new_var)?;
            }
            (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
        } else {
            let rm = self
                .running_mean
                .as_ref()
                .map(|v| v.as_tensor().detach())
                .unwrap_or(Tensor::zeros(c, DType::F32, x.device())?);
            let rv = self
                .running_var
                .as_ref()
                .map(|v| v.as_tensor().detach())
                .unwrap_or(Tensor::ones(c, DType::F32, x.device())?);
            (rm.reshape((1, c, 1, 1))?, rv.reshape((1, c, 1, 1))?)
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer norm over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &Builder, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[dim], Init::Ones)?,
            bias: b.param("bias", &[dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Layer norm over the channel dimension of `B×C×H×W` maps.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    pub weight: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNorm2d {
    pub fn new(b: &Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[channels], Init::Ones)?,
            bias: b.param("bias", &[channels], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let xhat = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-interpolation weights for resizing `n_in` samples to `n_out`
/// with half-pixel centers (`align_corners = false`).
pub fn bilinear_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = (src - i0 as f64) as f32;
            let frac = if i0 == i1 { 0.0 } else { frac };
            (i0, i1, frac)
        })
        .collect()
}

/// Dense `n_out × n_in` interpolation matrix.
pub fn interpolation_matrix(n_in: usize, n_out: usize, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f32; n_out * n_in];
    for (i, (i0, i1, frac)) in bilinear_weights(n_in, n_out).into_iter().enumerate() {
        m[i * n_in + i0] += 1.0 - frac;
        m[i * n_in + i1] += frac;
    }
    Ok(Tensor::from_vec(m, (n_out, n_in), device)?)
}

/// Bilinear resize of the two trailing dimensions. Differentiable; exact
/// identity when the size is unchanged.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let rank = x.rank();
    let (h, w) = (x.dim(rank - 2)?, x.dim(rank - 1)?);
    let mut y = x.clone();
    if w != out_w {
        let mw = interpolation_matrix(w, out_w, x.device())?.t()?.contiguous()?;
        y = y.contiguous()?.broadcast_matmul(&mw)?;
    }
    if h != out_h {
        let mh = interpolation_matrix(h, out_h, x.device())?;
        y = mh.broadcast_matmul(&y.contiguous()?)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamGroup, ParamStore};
    use crate::seed::SeedTree;

    fn store() -> ParamStore {
        ParamStore::new(Device::Cpu, SeedTree::new(0))
    }

    #[test]
    fn pointwise_conv_matches_general_conv() {
        let s = store();
        let b = s.root(ParamGroup::Decoder);
        let conv = Conv2d::new(&b.pp("c"), 3, 5, 1, 1, 0, true).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 4, 6), &Device::Cpu).unwrap();
        let fast = conv.forward(&x).unwrap();
        let slow = x
            .conv2d(&conv.weight, 0, 1, 1, 1)
            .unwrap()
            .broadcast_add(&conv.bias.as_ref().unwrap().reshape((1, 5, 1, 1)).unwrap())
            .unwrap();
        let diff = (fast - slow).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn transposed_conv_matches_candle() {
        let s = store();
        let up = ConvTranspose2d::new(&s.root(ParamGroup::Decoder).pp("up"), 4, 3, 2, false).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 4, 3, 5), &Device::Cpu).unwrap();
        let ours = up.forward(&x).unwrap();
        let reference = x.conv_transpose2d(&up.weight, 0, 0, 2, 1).unwrap();
        assert_eq!(ours.dims(), &[2, 3, 6, 10]);
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = Tensor::randn(0f32, 1.0, (1, 2, 5, 7), &Device::Cpu).unwrap();
        let same = resize_bilinear(&x, 5, 7).unwrap();
        assert_eq!(
            same.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let c = Tensor::full(0.75f32, (1, 1, 3, 3), &Device::Cpu).unwrap();
        let up = resize_bilinear(&c, 8, 5).unwrap();
        for v in up.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((v - 0.75).abs() < 1e-7);
        }
    }

    #[test]
    fn bilinear_2x2_to_3x3_center() {
        let x = Tensor::new(&[[0f32, 1.0], [2.0, 3.0]], &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 3, 3).unwrap().to_vec2::<f32>().unwrap();
        assert!((y[1][1] - 1.5).abs() < 1e-7);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let s = store();
        let bn = BatchNorm2d::new(&s.root(ParamGroup::Decoder).pp("bn"), 2).unwrap();
        let x = (Tensor::randn(0f32, 3.0, (4, 2, 3, 3), &Device::Cpu).unwrap() + 5.0).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let m = y.mean_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(m.abs() < 1e-5);
        let rm = s.get("bn.running_mean").unwrap().value().to_vec1::<f32>().unwrap();
        assert!(rm.iter().all(|v| *v > 0.2), "running mean moved toward batch mean: {rm:?}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::randn(0f32, 4.0, (3, 7), &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }
}
