//! Local-context branch: MLP with convolutional gating.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::impl_parameters;
use crate::nn::{
    depthwise_conv1d, dropout, layer_norm, linear, DepthwiseConvParams, LayerNormParams,
    LinearParams,
};
use crate::tape::{Tape, Var};

/// Convolutional spatial gating unit over `d_hidden / 2` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct CsguParams {
    pub norm: LayerNormParams,
    pub conv: DepthwiseConvParams,
}

impl_parameters!(CsguParams { norm, conv });

impl CsguParams {
    pub fn init<R: Rng + ?Sized>(d_hidden: usize, k: usize, rng: &mut R) -> Result<Self> {
        if d_hidden % 2 != 0 {
            return config_err(format!("hidden dimension must be even, got {d_hidden}"));
        }
        Ok(Self {
            norm: LayerNormParams::new(d_hidden / 2),
            conv: DepthwiseConvParams::init(d_hidden / 2, k, rng)?,
        })
    }
}

/// `Z₁ ⊗ DWConv(LayerNorm(Z₂))` where `(Z₁, Z₂)` are the feature halves of `z`.
/// The gate is linear: nothing nonlinear sits between the convolution and the product.
pub fn csgu(tape: &Tape, z: &Var, p: &CsguParams) -> Result<Var> {
    let n = z.shape()[1];
    if n % 2 != 0 {
        return config_err(format!("gating unit needs an even feature dimension, got {n}"));
    }
    let (z1, z2) = tape.split_half(z)?;
    let gate = depthwise_conv1d(tape, &layer_norm(tape, &z2, &p.norm)?, &p.conv)?;
    Ok(tape.mul(&z1, &gate)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgmlpParams {
    pub norm: LayerNormParams,
    /// `U`: `d → d_hidden`
    pub up: LinearParams,
    pub csgu: CsguParams,
    /// `V`: `d_hidden / 2 → d`
    pub down: LinearParams,
    pub dropout: f64,
}

impl_parameters!(CgmlpParams { norm, up, csgu, down });

impl CgmlpParams {
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        d_hidden: usize,
        k: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let csgu = CsguParams::init(d_hidden, k, rng)?;
        Ok(Self {
            norm: LayerNormParams::new(d),
            up: LinearParams::init(d, d_hidden, true, rng),
            csgu,
            down: LinearParams::init(d_hidden / 2, d, true, rng),
            dropout,
        })
    }
}

/// `Dropout(CSGU(GeLU(LayerNorm(x) U)) V)`.
pub fn cgmlp_forward<R: Rng + ?Sized>(
    tape: &Tape,
    x: &Var,
    p: &CgmlpParams,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let h = layer_norm(tape, x, &p.norm)?;
    let z = tape.gelu(&linear(tape, &h, &p.up)?);
    let gated = csgu(tape, &z, &p.csgu)?;
    let y = linear(tape, &gated, &p.down)?;
    dropout(tape, &y, p.dropout, training, rng)
}

/// Multiply-accumulate count of one cgMLP forward: both channel projections
/// plus the depth-wise convolution.
pub fn cgmlp_flop_estimate(t: u64, d: u64, d_hidden: u64, k: u64) -> u64 {
    t * d * d_hidden + t * d * d_hidden / 2 + t * k * d_hidden / 2
}
