//! Global-context branch: multi-headed scaled dot-product self-attention,
//! the linear-time Fastformer alternative, and the attention pooling they
//! (and the weighted-average merge) share.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::impl_parameters;
use crate::nn::{dropout, layer_norm, linear, LayerNormParams, LinearParams};
use crate::params::{join, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Mhsa,
    Fastformer,
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionKind::Mhsa => "mhsa",
            AttentionKind::Fastformer => "fastformer",
        })
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mhsa" => Ok(AttentionKind::Mhsa),
            "fastformer" => Ok(AttentionKind::Fastformer),
            other => Err(format!("unknown attention kind {other:?}")),
        }
    }
}

fn head_dim(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return config_err(format!("model dimension {d} is not divisible by {heads} heads"));
    }
    Ok(d / heads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjections {
    pub query: LinearParams,
    /// No bias: a key bias only shifts each score row by a constant, which
    /// the softmax cancels.
    pub key: LinearParams,
    pub value: LinearParams,
}

impl_parameters!(HeadProjections { query, key, value });

#[derive(Debug, Clone, PartialEq)]
pub struct MhsaParams {
    pub heads: Vec<HeadProjections>,
    pub output: LinearParams,
}

impl_parameters!(MhsaParams { heads, output });

impl MhsaParams {
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let dh = head_dim(d, heads)?;
        let heads = (0..heads)
            .map(|_| HeadProjections {
                query: LinearParams::init(d, dh, true, rng),
                key: LinearParams::init(d, dh, false, rng),
                value: LinearParams::init(d, dh, true, rng),
            })
            .collect();
        Ok(Self {
            heads,
            output: LinearParams::init(d, d, true, rng),
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }
}

/// `softmax(Q Kᵀ / √dₖ) V`. When `trace` is given the weight matrix is pushed onto it.
pub fn scaled_dot_attention(
    tape: &Tape,
    q: &Var,
    k: &Var,
    v: &Var,
    trace: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let dk = q.shape().get(1).copied().unwrap_or(1);
    let scale = 1.0 / (dk as f64).sqrt();
    let (out, probs) = tape.scaled_dot_attention(q, k, v, scale, trace.is_some())?;
    if let (Some(sink), Some(p)) = (trace, probs) {
        sink.push(p);
    }
    Ok(out)
}

pub fn multi_head_attention(
    tape: &Tape,
    x: &Var,
    p: &MhsaParams,
    mut trace: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    head_dim(x.shape()[1], p.num_heads())?;
    let mut outs = Vec::with_capacity(p.num_heads());
    for head in &p.heads {
        let q = linear(tape, x, &head.query)?;
        let k = linear(tape, x, &head.key)?;
        let v = linear(tape, x, &head.value)?;
        outs.push(scaled_dot_attention(tape, &q, &k, &v, trace.as_deref_mut())?);
    }
    let cat = if outs.len() == 1 {
        outs.pop().expect("one head")
    } else {
        tape.concat_cols(&outs)?
    };
    linear(tape, &cat, &p.output)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnPoolingParams {
    /// Learnable query vector, `[d]`.
    pub w: Tensor,
}

impl_parameters!(AttnPoolingParams { w });

impl AttnPoolingParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::uniform(&[d], 1.0 / (d as f64).sqrt(), rng).with_grad(),
        }
    }
}

/// Collapses `[T×d]` to `[1×d]` as `Σ αᵢ yᵢ`, `α = softmax(Y w / √d)`.
pub fn attention_pooling(tape: &Tape, y: &Var, p: &AttnPoolingParams) -> Result<Var> {
    let d = y.shape()[1];
    let w = tape.reshape(&tape.param(&p.w), &[d, 1])?;
    let scores = tape.matmul(y, &w)?;
    let scores = tape.scale(&tape.transpose(&scores)?, 1.0 / (d as f64).sqrt());
    let alpha = tape.softmax(&scores);
    Ok(tape.matmul(&alpha, y)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastformerParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    /// One pooling vector per head, each of the head dimension.
    pub query_pool: Vec<AttnPoolingParams>,
    pub key_pool: Vec<AttnPoolingParams>,
    pub output: LinearParams,
}

impl_parameters!(FastformerParams {
    query,
    key,
    value,
    query_pool,
    key_pool,
    output
});

impl FastformerParams {
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let dh = head_dim(d, heads)?;
        Ok(Self {
            query: LinearParams::init(d, d, true, rng),
            key: LinearParams::init(d, d, true, rng),
            value: LinearParams::init(d, d, true, rng),
            query_pool: (0..heads).map(|_| AttnPoolingParams::init(dh, rng)).collect(),
            key_pool: (0..heads).map(|_| AttnPoolingParams::init(dh, rng)).collect(),
            output: LinearParams::init(d, d, true, rng),
        })
    }

    pub fn num_heads(&self) -> usize {
        self.query_pool.len()
    }
}

/// Additive-attention block with linear cost in `T`.
///
/// Per head: the pooled query gates every key, the pooled gated key gates
/// every value. The gated values of all heads are projected and the query is
/// added back.
pub fn fastformer(tape: &Tape, x: &Var, p: &FastformerParams) -> Result<Var> {
    let d = x.shape()[1];
    let t = x.shape()[0];
    let heads = p.num_heads();
    let dh = head_dim(d, heads)?;
    let q = linear(tape, x, &p.query)?;
    let k = linear(tape, x, &p.key)?;
    let v = linear(tape, x, &p.value)?;
    let mut gated = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (
                tape.slice_cols(&q, h * dh, dh)?,
                tape.slice_cols(&k, h * dh, dh)?,
                tape.slice_cols(&v, h * dh, dh)?,
            )
        };
        let q_global = attention_pooling(tape, &qh, &p.query_pool[h])?;
        let k_mixed = tape.mul(&tape.repeat_rows(&q_global, t)?, &kh)?;
        let k_global = attention_pooling(tape, &k_mixed, &p.key_pool[h])?;
        gated.push(tape.mul(&tape.repeat_rows(&k_global, t)?, &vh)?);
    }
    let cat = if heads == 1 {
        gated.pop().expect("one head")
    } else {
        tape.concat_cols(&gated)?
    };
    let out = linear(tape, &cat, &p.output)?;
    Ok(tape.add(&out, &q)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionParams {
    Mhsa(MhsaParams),
    Fastformer(FastformerParams),
}

impl AttentionParams {
    pub fn kind(&self) -> AttentionKind {
        match self {
            AttentionParams::Mhsa(_) => AttentionKind::Mhsa,
            AttentionParams::Fastformer(_) => AttentionKind::Fastformer,
        }
    }
}

impl Parameters for AttentionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        match self {
            AttentionParams::Mhsa(p) => p.visit(&join(prefix, "mhsa"), f),
            AttentionParams::Fastformer(p) => p.visit(&join(prefix, "fastformer"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            AttentionParams::Mhsa(p) => p.visit_mut(&join(prefix, "mhsa"), f),
            AttentionParams::Fastformer(p) => p.visit_mut(&join(prefix, "fastformer"), f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBranchParams {
    pub norm: LayerNormParams,
    pub attention: AttentionParams,
    pub dropout: f64,
}

impl_parameters!(AttentionBranchParams { norm, attention });

impl AttentionBranchParams {
    pub fn init<R: Rng + ?Sized>(
        kind: AttentionKind,
        d: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let attention = match kind {
            AttentionKind::Mhsa => AttentionParams::Mhsa(MhsaParams::init(d, heads, rng)?),
            AttentionKind::Fastformer => {
                AttentionParams::Fastformer(FastformerParams::init(d, heads, rng)?)
            }
        };
        Ok(Self {
            norm: LayerNormParams::new(d),
            attention,
            dropout,
        })
    }
}

/// `Dropout(Attention(LayerNorm(x)))`. Attention maps are only available for MHSA.
pub fn attention_branch_forward<R: Rng + ?Sized>(
    tape: &Tape,
    x: &Var,
    p: &AttentionBranchParams,
    training: bool,
    rng: &mut R,
    trace: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let h = layer_norm(tape, x, &p.norm)?;
    let y = match &p.attention {
        AttentionParams::Mhsa(m) => multi_head_attention(tape, &h, m, trace)?,
        AttentionParams::Fastformer(f) => fastformer(tape, &h, f)?,
    };
    dropout(tape, &y, p.dropout, training, rng)
}
