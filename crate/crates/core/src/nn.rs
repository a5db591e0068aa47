//! Layer primitives: linear projection, layer norm, dropout, depth-wise
//! convolution, sinusoidal positions and the convolutional subsampler.

use std::rc::Rc;

use rand::Rng;

use crate::error::{config_err, Error, Result};
use crate::impl_parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Kernel and stride of both subsampling stages.
const SUB_KERNEL: usize = 3;
const SUB_STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `[in × out]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl_parameters!(LinearParams { weight, bias });

impl LinearParams {
    /// Uniform `±1/√in` weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[input, output], bound, rng).with_grad(),
            bias: bias.then(|| Tensor::zeros(&[output]).with_grad()),
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self {
            weight: weight.with_grad(),
            bias: bias.map(Tensor::with_grad),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub fn linear(tape: &Tape, x: &Var, p: &LinearParams) -> Result<Var> {
    let y = tape.matmul(x, &tape.param(&p.weight))?;
    match &p.bias {
        Some(b) => Ok(tape.add_row(&y, &tape.param(b))?),
        None => Ok(y),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl_parameters!(LayerNormParams { gamma, beta });

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[d]).with_grad(),
            beta: Tensor::zeros(&[d]).with_grad(),
            eps: LAYER_NORM_EPS,
        }
    }
}

pub fn layer_norm(tape: &Tape, x: &Var, p: &LayerNormParams) -> Result<Var> {
    Ok(tape.layer_norm(x, &tape.param(&p.gamma), &tape.param(&p.beta), p.eps)?)
}

pub fn gelu(tape: &Tape, x: &Var) -> Var {
    tape.gelu(x)
}

pub fn softmax_rows(tape: &Tape, x: &Var) -> Var {
    tape.softmax(x)
}

/// Inverted dropout: identity at inference, kept entries scaled by `1/(1−p)`
/// during training.
pub fn dropout<R: Rng + ?Sized>(
    tape: &Tape,
    x: &Var,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return config_err(format!("dropout rate must be in [0, 1), got {p}"));
    }
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.value().numel())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Ok(tape.mul_const(x, Rc::new(mask))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseConvParams {
    /// `[channels × K]`
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl_parameters!(DepthwiseConvParams { kernel, bias });

impl DepthwiseConvParams {
    /// Uniform `±1/√K` taps with unit bias, so the gate starts near one.
    pub fn init<R: Rng + ?Sized>(channels: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k % 2 == 0 {
            return config_err(format!("depth-wise kernel width must be odd, got {k}"));
        }
        Ok(Self {
            kernel: Tensor::uniform(&[channels, k], 1.0 / (k as f64).sqrt(), rng).with_grad(),
            bias: Tensor::ones(&[channels]).with_grad(),
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[1]
    }
}

pub fn depthwise_conv1d(tape: &Tape, x: &Var, p: &DepthwiseConvParams) -> Result<Var> {
    Ok(tape.depthwise_conv1d(x, &tape.param(&p.kernel), &tape.param(&p.bias))?)
}

/// Interleaved sin/cos absolute positions, `[T × d]`.
pub fn sinusoidal_pe(len: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return config_err(format!("positional encoding needs an even dimension, got {d}"));
    }
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::from_parts(vec![len, d], data))
}

/// Output length of one valid 3-wide stride-2 stage, if any.
pub fn subsample_stage_len(len: usize) -> Option<usize> {
    (len >= SUB_KERNEL).then(|| (len - SUB_KERNEL) / SUB_STRIDE + 1)
}

/// Sequence length after both subsampling stages.
pub fn subsampled_len(len: usize) -> Option<usize> {
    subsample_stage_len(len).and_then(subsample_stage_len)
}

/// Shortest input that survives both stages.
pub const MIN_SUBSAMPLE_LEN: usize = 7;

/// Input length whose subsampled length is exactly `target`.
pub fn input_len_for(target: usize) -> usize {
    4 * target + 3
}

/// Two valid 3×3 stride-2 convolutions over (time, feature), each followed
/// by GeLU, then a projection of the flattened channels to `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsamplerParams {
    /// `[C × 3 × 3 × 1]`
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    /// `[C × 3 × 3 × C]`
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
    pub proj: LinearParams,
}

impl_parameters!(SubsamplerParams {
    conv1_weight,
    conv1_bias,
    conv2_weight,
    conv2_bias,
    proj
});

impl SubsamplerParams {
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        channels: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let freq = subsampled_len(input_dim).ok_or_else(|| {
            Error::Config(format!(
                "input feature dimension {input_dim} is below the subsampler minimum {MIN_SUBSAMPLE_LEN}"
            ))
        })?;
        let k = SUB_KERNEL;
        let b1 = 1.0 / ((k * k) as f64).sqrt();
        let b2 = 1.0 / ((k * k * channels) as f64).sqrt();
        Ok(Self {
            conv1_weight: Tensor::uniform(&[channels, k, k, 1], b1, rng).with_grad(),
            conv1_bias: Tensor::zeros(&[channels]).with_grad(),
            conv2_weight: Tensor::uniform(&[channels, k, k, channels], b2, rng).with_grad(),
            conv2_bias: Tensor::zeros(&[channels]).with_grad(),
            proj: LinearParams::init(freq * channels, d, true, rng),
        })
    }
}

pub fn conv_subsample(tape: &Tape, x: &Var, p: &SubsamplerParams) -> Result<Var> {
    let (t, f) = (x.shape()[0], x.shape()[1]);
    let out_len = subsampled_len(t).ok_or(Error::TooShort {
        len: t,
        min: MIN_SUBSAMPLE_LEN,
    })?;
    let x = tape.reshape(x, &[t, f, 1])?;
    let h = tape.conv2d(
        &x,
        &tape.param(&p.conv1_weight),
        &tape.param(&p.conv1_bias),
        SUB_STRIDE,
    )?;
    let h = tape.gelu(&h);
    let h = tape.conv2d(
        &h,
        &tape.param(&p.conv2_weight),
        &tape.param(&p.conv2_bias),
        SUB_STRIDE,
    )?;
    let h = tape.gelu(&h);
    debug_assert_eq!(h.shape()[0], out_len);
    let flat = h.shape()[1] * h.shape()[2];
    let h = tape.reshape(&h, &[out_len, flat])?;
    linear(tape, &h, &p.proj)
}
