//! Block assembly: parallel branches over a shared input, merge, residual;
//! the encoder stack behind subsampling and positional encoding; branch
//! dropout and attention-branch pruning.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_branch_forward, attention_pooling, multi_head_attention, AttentionBranchParams,
    AttentionKind, AttnPoolingParams, MhsaParams,
};
use crate::cgmlp::{cgmlp_forward, CgmlpParams};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::error::{config_err, Error, Result};
use crate::impl_parameters;
use crate::nn::{
    conv_subsample, dropout, layer_norm, linear, sinusoidal_pe, subsampled_len, LayerNormParams,
    LinearParams, SubsamplerParams, MIN_SUBSAMPLE_LEN,
};
use crate::params::{join, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    Concat,
    WeightedAverage,
}

impl std::fmt::Display for MergeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MergeKind::Concat => "concat",
            MergeKind::WeightedAverage => "weighted_average",
        })
    }
}

/// Which block type the stack is built from. `Transformer` is the
/// attention-then-feed-forward control used for diagonality comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Branchformer,
    Transformer,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Branchformer => "branchformer",
            Architecture::Transformer => "transformer",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "branchformer" => Ok(Architecture::Branchformer),
            "transformer" => Ok(Architecture::Transformer),
            other => Err(format!("unknown architecture {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub heads: usize,
    pub kernel_size: usize,
    pub attention: AttentionKind,
    pub merge: MergeKind,
    pub dropout: f64,
    pub branch_dropout: f64,
    pub seed: u64,
    /// Feature dimension of the encoder input.
    pub input_dim: usize,
}

impl EncoderConfig {
    /// The small configuration used by the gradient suite.
    pub fn toy(attention: AttentionKind, merge: MergeKind) -> Self {
        Self {
            num_blocks: 2,
            d_model: 8,
            d_hidden: 16,
            heads: 2,
            kernel_size: 3,
            attention,
            merge,
            dropout: 0.0,
            branch_dropout: 0.0,
            seed: 0,
            input_dim: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model;
        if d == 0 || d % 2 != 0 {
            return config_err(format!("d_model must be positive and even, got {d}"));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return config_err(format!("d_model {d} is not divisible by {} heads", self.heads));
        }
        if self.d_hidden == 0 || self.d_hidden % 2 != 0 {
            return config_err(format!("d_hidden must be positive and even, got {}", self.d_hidden));
        }
        if self.kernel_size % 2 == 0 {
            return config_err(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        for (name, p) in [("dropout", self.dropout), ("branch_dropout", self.branch_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return config_err(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        if self.branch_dropout > 0.0 && self.merge == MergeKind::Concat {
            return config_err("branch dropout requires the weighted_average merge");
        }
        if self.input_dim < MIN_SUBSAMPLE_LEN {
            return config_err(format!(
                "input_dim must be at least {MIN_SUBSAMPLE_LEN}, got {}",
                self.input_dim
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// `key=value` pairs under `prefix.`; values are JSON literals.
    pub fn to_header(&self, prefix: &str, out: &mut BTreeMap<String, String>) {
        let value = serde_json::to_value(self).expect("config serializes");
        for (k, v) in value.as_object().expect("config is an object") {
            out.insert(format!("{prefix}.{k}"), v.to_string());
        }
    }

    pub fn from_header(prefix: &str, header: &BTreeMap<String, String>) -> Result<Self> {
        let mut obj = serde_json::Map::new();
        let lead = format!("{prefix}.");
        for (k, v) in header {
            if let Some(field) = k.strip_prefix(&lead) {
                let parsed = serde_json::from_str(v).map_err(|e| {
                    CheckpointError::Header(format!("{k}: {e}"))
                })?;
                obj.insert(field.to_string(), parsed);
            }
        }
        let c: Self = serde_json::from_value(serde_json::Value::Object(obj))
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedMergeParams {
    pub pool_att: AttnPoolingParams,
    pub pool_mlp: AttnPoolingParams,
    /// `d → 1`, no bias.
    pub proj_att: LinearParams,
    /// `d → 1`, no bias.
    pub proj_mlp: LinearParams,
    pub branch_dropout: f64,
}

impl_parameters!(WeightedMergeParams {
    pool_att,
    pool_mlp,
    proj_att,
    proj_mlp
});

#[derive(Debug, Clone, PartialEq)]
pub enum MergeParams {
    /// `concat(Y_att, Y_mlp) W_merge` with `W_merge: 2d → d`.
    Concat(LinearParams),
    WeightedAverage(WeightedMergeParams),
    /// Left behind by pruning: the block output is the cgMLP branch alone.
    CgmlpOnly,
}

impl Parameters for MergeParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        match self {
            MergeParams::Concat(p) => p.visit(&join(prefix, "concat"), f),
            MergeParams::WeightedAverage(p) => p.visit(&join(prefix, "weighted"), f),
            MergeParams::CgmlpOnly => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            MergeParams::Concat(p) => p.visit_mut(&join(prefix, "concat"), f),
            MergeParams::WeightedAverage(p) => p.visit_mut(&join(prefix, "weighted"), f),
            MergeParams::CgmlpOnly => {}
        }
    }
}

impl MergeParams {
    pub fn init<R: Rng + ?Sized>(kind: MergeKind, d: usize, branch_dropout: f64, rng: &mut R) -> Self {
        match kind {
            MergeKind::Concat => MergeParams::Concat(LinearParams::init(2 * d, d, true, rng)),
            MergeKind::WeightedAverage => MergeParams::WeightedAverage(WeightedMergeParams {
                pool_att: AttnPoolingParams::init(d, rng),
                pool_mlp: AttnPoolingParams::init(d, rng),
                proj_att: LinearParams::init(d, 1, false, rng),
                proj_mlp: LinearParams::init(d, 1, false, rng),
                branch_dropout,
            }),
        }
    }
}

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(crate::tensor::TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

pub fn merge_concat(tape: &Tape, y_att: &Var, y_mlp: &Var, w_merge: &LinearParams) -> Result<Var> {
    same_shape("merge_concat", y_att, y_mlp)?;
    let cat = tape.concat_cols(&[y_att.clone(), y_mlp.clone()])?;
    linear(tape, &cat, w_merge)
}

/// `w_att Y_att + w_mlp Y_mlp` with `(w_att, w_mlp) = softmax(pool(Y_att)·a, pool(Y_mlp)·m)`.
/// `forced` replaces the learned weights. Returns the weights used.
pub fn merge_weighted_average(
    tape: &Tape,
    y_att: &Var,
    y_mlp: &Var,
    p: &WeightedMergeParams,
    forced: Option<[f64; 2]>,
) -> Result<(Var, [f64; 2])> {
    same_shape("merge_weighted_average", y_att, y_mlp)?;
    let (w_att, w_mlp) = match forced {
        Some([a, m]) => (tape.constant(Tensor::scalar(a)), tape.constant(Tensor::scalar(m))),
        None => {
            let s_att = linear(tape, &attention_pooling(tape, y_att, &p.pool_att)?, &p.proj_att)?;
            let s_mlp = linear(tape, &attention_pooling(tape, y_mlp, &p.pool_mlp)?, &p.proj_mlp)?;
            let w = tape.softmax(&tape.concat_cols(&[s_att, s_mlp])?);
            (tape.slice_cols(&w, 0, 1)?, tape.slice_cols(&w, 1, 1)?)
        }
    };
    let weights = [w_att.data()[0], w_mlp.data()[0]];
    let out = tape.add(&tape.scalar_mul(&w_att, y_att)?, &tape.scalar_mul(&w_mlp, y_mlp)?)?;
    Ok((out, weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchDecision {
    KeepBoth,
    DropAttention,
}

/// Per-block, per-forward draw. Consumes no randomness unless training with `p > 0`.
pub fn branch_dropout<R: Rng + ?Sized>(
    p: f64,
    merge: MergeKind,
    training: bool,
    rng: &mut R,
) -> Result<BranchDecision> {
    if merge == MergeKind::Concat {
        return config_err("branch dropout requires the weighted_average merge");
    }
    if !(0.0..1.0).contains(&p) {
        return config_err(format!("branch dropout rate must be in [0, 1), got {p}"));
    }
    if !training || p == 0.0 || rng.random::<f64>() >= p {
        Ok(BranchDecision::KeepBoth)
    } else {
        Ok(BranchDecision::DropAttention)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// `None` once pruned.
    pub attention: Option<AttentionBranchParams>,
    pub cgmlp: CgmlpParams,
    pub merge: MergeParams,
}

impl_parameters!(BlockParams { attention, cgmlp, merge });

impl BlockParams {
    pub fn init<R: Rng + ?Sized>(c: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let attention =
            AttentionBranchParams::init(c.attention, c.d_model, c.heads, c.dropout, rng)?;
        let cgmlp = CgmlpParams::init(c.d_model, c.d_hidden, c.kernel_size, c.dropout, rng)?;
        let merge = MergeParams::init(c.merge, c.d_model, c.branch_dropout, rng);
        Ok(Self {
            attention: Some(attention),
            cgmlp,
            merge,
        })
    }
}

/// Attention-then-feed-forward residual block, each sublayer pre-normed.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlockParams {
    pub attn_norm: LayerNormParams,
    pub attention: MhsaParams,
    pub ffn_norm: LayerNormParams,
    pub ffn_up: LinearParams,
    pub ffn_down: LinearParams,
    pub dropout: f64,
}

impl_parameters!(TransformerBlockParams {
    attn_norm,
    attention,
    ffn_norm,
    ffn_up,
    ffn_down
});

impl TransformerBlockParams {
    pub fn init<R: Rng + ?Sized>(c: &EncoderConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNormParams::new(c.d_model),
            attention: MhsaParams::init(c.d_model, c.heads, rng)?,
            ffn_norm: LayerNormParams::new(c.d_model),
            ffn_up: LinearParams::init(c.d_model, c.d_hidden, true, rng),
            ffn_down: LinearParams::init(c.d_hidden, c.d_model, true, rng),
            dropout: c.dropout,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Branch(BlockParams),
    Transformer(TransformerBlockParams),
}

impl Parameters for Layer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        match self {
            Layer::Branch(p) => p.visit(prefix, f),
            Layer::Transformer(p) => p.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Layer::Branch(p) => p.visit_mut(prefix, f),
            Layer::Transformer(p) => p.visit_mut(prefix, f),
        }
    }
}

/// Observations collected during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Probe {
    /// Store MHSA attention maps (one `[T×T]` matrix per head) per layer.
    pub capture_attention: bool,
    pub attention_maps: Vec<(usize, Vec<Tensor>)>,
    /// `(layer, [w_att, w_mlp])` for every weighted-average or pruned block.
    pub branch_weights: Vec<(usize, [f64; 2])>,
    /// Number of attention-branch evaluations.
    pub attention_evaluations: usize,
    /// Layers whose attention branch was dropped.
    pub dropped: Vec<usize>,
}

enum RngSlot<'a> {
    Owned(SeededRng),
    Borrowed(&'a mut SeededRng),
}

/// Mode and side channels of one forward pass.
pub struct Forward<'a> {
    pub training: bool,
    rng: RngSlot<'a>,
    pub probe: Option<&'a mut Probe>,
    /// Overrides every weighted-average merge with fixed `(w_att, w_mlp)`.
    pub force_weights: Option<[f64; 2]>,
}

impl<'a> Forward<'a> {
    pub fn inference() -> Self {
        Self {
            training: false,
            rng: RngSlot::Owned(SeededRng::seed_from_u64(0)),
            probe: None,
            force_weights: None,
        }
    }

    pub fn training(rng: &'a mut SeededRng) -> Self {
        Self {
            training: true,
            rng: RngSlot::Borrowed(rng),
            probe: None,
            force_weights: None,
        }
    }

    pub fn with_probe(mut self, probe: &'a mut Probe) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn with_forced_weights(mut self, w: [f64; 2]) -> Self {
        self.force_weights = Some(w);
        self
    }

    pub fn rng(&mut self) -> &mut SeededRng {
        match &mut self.rng {
            RngSlot::Owned(r) => r,
            RngSlot::Borrowed(r) => r,
        }
    }

    fn capture(&self) -> bool {
        self.probe.as_ref().is_some_and(|p| p.capture_attention)
    }
}

/// `x + Merge(AttentionBranch(x), CgmlpBranch(x))`; both branches read the same `x`.
pub fn block_forward(
    tape: &Tape,
    x: &Var,
    p: &BlockParams,
    layer: usize,
    ctx: &mut Forward<'_>,
) -> Result<Var> {
    let decision = match (&p.merge, &p.attention) {
        (MergeParams::WeightedAverage(m), Some(_)) => branch_dropout(
            m.branch_dropout,
            MergeKind::WeightedAverage,
            ctx.training,
            ctx.rng(),
        )?,
        _ => BranchDecision::KeepBoth,
    };
    let y_att = match (&p.attention, decision) {
        (Some(a), BranchDecision::KeepBoth) => {
            let mut maps = ctx.capture().then(Vec::new);
            let training = ctx.training;
            let y = attention_branch_forward(tape, x, a, training, ctx.rng(), maps.as_mut())?;
            if let Some(probe) = ctx.probe.as_deref_mut() {
                probe.attention_evaluations += 1;
                if let Some(maps) = maps.filter(|m| !m.is_empty()) {
                    probe.attention_maps.push((layer, maps));
                }
            }
            Some(y)
        }
        _ => None,
    };
    let training = ctx.training;
    let y_mlp = cgmlp_forward(tape, x, &p.cgmlp, training, ctx.rng())?;
    let (merged, weights) = match (&p.merge, y_att) {
        (MergeParams::Concat(w), Some(ya)) => (merge_concat(tape, &ya, &y_mlp, w)?, None),
        (MergeParams::WeightedAverage(m), Some(ya)) => {
            let (out, w) = merge_weighted_average(tape, &ya, &y_mlp, m, ctx.force_weights)?;
            (out, Some(w))
        }
        (MergeParams::WeightedAverage(_), None) => {
            if let Some(probe) = ctx.probe.as_deref_mut() {
                probe.dropped.push(layer);
            }
            (y_mlp, Some([0.0, 1.0]))
        }
        (MergeParams::CgmlpOnly, None) => (y_mlp, Some([0.0, 1.0])),
        (MergeParams::Concat(_), None) | (MergeParams::CgmlpOnly, Some(_)) => {
            return Err(Error::Unsupported(format!(
                "block {layer}: merge does not match the branches present"
            )))
        }
    };
    if let (Some(w), Some(probe)) = (weights, ctx.probe.as_deref_mut()) {
        probe.branch_weights.push((layer, w));
    }
    Ok(tape.add(x, &merged)?)
}

pub fn transformer_block_forward(
    tape: &Tape,
    x: &Var,
    p: &TransformerBlockParams,
    layer: usize,
    ctx: &mut Forward<'_>,
) -> Result<Var> {
    let mut maps = ctx.capture().then(Vec::new);
    let a = multi_head_attention(tape, &layer_norm(tape, x, &p.attn_norm)?, &p.attention, maps.as_mut())?;
    if let Some(probe) = ctx.probe.as_deref_mut() {
        probe.attention_evaluations += 1;
        if let Some(maps) = maps {
            probe.attention_maps.push((layer, maps));
        }
    }
    let training = ctx.training;
    let x = tape.add(x, &dropout(tape, &a, p.dropout, training, ctx.rng())?)?;
    let h = tape.gelu(&linear(tape, &layer_norm(tape, &x, &p.ffn_norm)?, &p.ffn_up)?);
    let f = linear(tape, &h, &p.ffn_down)?;
    Ok(tape.add(&x, &dropout(tape, &f, p.dropout, training, ctx.rng())?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub architecture: Architecture,
    pub subsampler: SubsamplerParams,
    pub blocks: Vec<Layer>,
}

impl Parameters for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.subsampler.visit(&join(prefix, "subsampler"), f);
        self.blocks.visit(&join(prefix, "blocks"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.subsampler.visit_mut(&join(prefix, "subsampler"), f);
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
    }
}

impl EncoderParams {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: &EncoderConfig, architecture: Architecture) -> Result<Self> {
        let mut rng = SeededRng::seed_from_u64(config.seed);
        Self::init_with(config, architecture, &mut rng)
    }

    pub fn init_with<R: Rng + ?Sized>(
        config: &EncoderConfig,
        architecture: Architecture,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if architecture == Architecture::Transformer && config.attention != AttentionKind::Mhsa {
            return config_err("the transformer control uses mhsa attention");
        }
        let subsampler = SubsamplerParams::init(config.input_dim, config.d_model, config.d_model, rng)?;
        let blocks = (0..config.num_blocks)
            .map(|_| match architecture {
                Architecture::Branchformer => BlockParams::init(config, rng).map(Layer::Branch),
                Architecture::Transformer => {
                    TransformerBlockParams::init(config, rng).map(Layer::Transformer)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            architecture,
            subsampler,
            blocks,
        })
    }

    pub fn is_pruned(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| matches!(b, Layer::Branch(p) if p.attention.is_none()))
    }

    /// Output length for `input_len` frames.
    pub fn output_len(&self, input_len: usize) -> Result<usize> {
        subsampled_len(input_len).ok_or(Error::TooShort {
            len: input_len,
            min: MIN_SUBSAMPLE_LEN,
        })
    }

    /// `features: [T×F]` → `[T′×d]`: subsample, add positional encoding, run the blocks.
    pub fn forward(&self, tape: &Tape, features: &Var, ctx: &mut Forward<'_>) -> Result<Var> {
        if features.value().rank() != 2 || features.shape()[1] != self.config.input_dim {
            return Err(Error::Config(format!(
                "expected features of shape [T × {}], got {:?}",
                self.config.input_dim,
                features.shape()
            )));
        }
        let x = conv_subsample(tape, features, &self.subsampler)?;
        let pe = sinusoidal_pe(x.shape()[0], self.config.d_model)?;
        let mut x = tape.add(&x, &tape.constant(pe))?;
        for (i, layer) in self.blocks.iter().enumerate() {
            x = match layer {
                Layer::Branch(p) => block_forward(tape, &x, p, i, ctx)?,
                Layer::Transformer(p) => transformer_block_forward(tape, &x, p, i, ctx)?,
            };
        }
        Ok(x)
    }

    /// Inference forward without gradient recording.
    pub fn infer(&self, features: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let y = self.forward(&tape, &tape.constant(features.clone()), &mut Forward::inference())?;
        Ok(y.to_tensor())
    }

    pub fn header(&self) -> BTreeMap<String, String> {
        let mut h = BTreeMap::new();
        self.config.to_header("encoder", &mut h);
        h.insert("architecture".into(), self.architecture.to_string());
        h.insert("pruned".into(), self.is_pruned().to_string());
        h
    }

    /// Parameter skeleton described by a checkpoint header (values are placeholders).
    pub fn skeleton_from_header(header: &BTreeMap<String, String>) -> Result<Self> {
        let config = EncoderConfig::from_header("encoder", header)?;
        let get = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| CheckpointError::Header(format!("missing key {k}")))
        };
        let architecture: Architecture = get("architecture")?
            .parse()
            .map_err(CheckpointError::Header)?;
        let pruned: bool = get("pruned")?
            .parse()
            .map_err(|_| CheckpointError::Header("pruned must be true or false".into()))?;
        let params = Self::init(&config, architecture)?;
        if pruned {
            prune_to_cgmlp(&params)
        } else {
            Ok(params)
        }
    }
}

/// Drops every attention branch. The result computes exactly what the original
/// computes with all merge weights forced to `(0, 1)`.
pub fn prune_to_cgmlp(params: &EncoderParams) -> Result<EncoderParams> {
    if params.architecture != Architecture::Branchformer {
        return Err(Error::Unsupported("only branchformer stacks can be pruned".into()));
    }
    let mut out = params.clone();
    for (i, layer) in out.blocks.iter_mut().enumerate() {
        let Layer::Branch(b) = layer else { unreachable!() };
        match b.merge {
            MergeParams::WeightedAverage(_) | MergeParams::CgmlpOnly => {
                b.attention = None;
                b.merge = MergeParams::CgmlpOnly;
            }
            MergeParams::Concat(_) => {
                return Err(Error::Unsupported(format!(
                    "block {i}: pruning requires the weighted_average merge"
                )))
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    Checkpoint::from_params(params.header(), params).save(path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let ckpt = Checkpoint::load(path)?;
    let mut params = EncoderParams::skeleton_from_header(&ckpt.header)?;
    ckpt.restore_into(&mut params)?;
    Ok(params)
}

/// Loads parameter values into the shapes implied by `config`, ignoring the
/// configuration stored in the file.
pub fn load_checkpoint_as(path: &Path, config: &EncoderConfig) -> Result<EncoderParams> {
    let ckpt = Checkpoint::load(path)?;
    let architecture: Architecture = ckpt
        .get("architecture")?
        .parse()
        .map_err(CheckpointError::Header)?;
    let mut params = EncoderParams::init(config, architecture)?;
    if ckpt.get("pruned")? == "true" {
        params = prune_to_cgmlp(&params)?;
    }
    ckpt.restore_into(&mut params)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> SeededRng {
        SeededRng::seed_from_u64(seed)
    }

    fn eval(f: impl FnOnce(&Tape) -> Result<Var>) -> Tensor {
        f(&Tape::inference()).unwrap().to_tensor()
    }

    #[test]
    fn concat_selector_and_adder() {
        let mut r = rng(1);
        let ya = Tensor::uniform(&[3, 2], 1.0, &mut r);
        let ym = Tensor::uniform(&[3, 2], 1.0, &mut r);
        let eye = Tensor::eye(2);
        let sel = Tensor::vstack(&[&eye, &Tensor::zeros(&[2, 2])]).unwrap();
        let add = Tensor::vstack(&[&eye, &eye]).unwrap();
        let run = |w: Tensor| {
            eval(|t| {
                merge_concat(
                    t,
                    &t.constant(ya.clone()),
                    &t.constant(ym.clone()),
                    &LinearParams::from_tensors(w, None),
                )
            })
        };
        assert!(run(sel).bit_eq(&ya));
        let sum = run(add);
        for i in 0..6 {
            assert_eq!(sum.data()[i], ya.data()[i] + ym.data()[i]);
        }
    }

    #[test]
    fn concat_matches_explicit_oracle() {
        let mut r = rng(2);
        let ya = Tensor::uniform(&[2, 2], 1.0, &mut r);
        let ym = Tensor::uniform(&[2, 2], 1.0, &mut r);
        let mut w = LinearParams::init(4, 2, true, &mut r);
        w.bias = Some(Tensor::new(&[2], vec![0.3, -0.1]).unwrap());
        let y = eval(|t| merge_concat(t, &t.constant(ya.clone()), &t.constant(ym.clone()), &w));
        for i in 0..2 {
            let cat = [ya.get2(i, 0), ya.get2(i, 1), ym.get2(i, 0), ym.get2(i, 1)];
            for j in 0..2 {
                let expect: f64 = (0..4).map(|k| cat[k] * w.weight.get2(k, j)).sum::<f64>()
                    + w.bias.as_ref().unwrap().data()[j];
                assert!((y.get2(i, j) - expect).abs() < 1e-14);
            }
        }
        let tape = Tape::inference();
        assert!(merge_concat(
            &tape,
            &tape.constant(Tensor::zeros(&[2, 2])),
            &tape.constant(Tensor::zeros(&[3, 2])),
            &w
        )
        .is_err());
    }

    fn weighted(d: usize, seed: u64) -> WeightedMergeParams {
        match MergeParams::init(MergeKind::WeightedAverage, d, 0.0, &mut rng(seed)) {
            MergeParams::WeightedAverage(p) => p,
            _ => unreachable!(),
        }
    }

    #[test]
    fn weighted_average_identical_branches() {
        let p = weighted(3, 3);
        let y = Tensor::uniform(&[4, 3], 1.0, &mut rng(4));
        let tape = Tape::inference();
        let (out, w) =
            merge_weighted_average(&tape, &tape.constant(y.clone()), &tape.constant(y.clone()), &p, None)
                .unwrap();
        assert!(out.value().max_abs_diff(&y) < 1e-15);
        assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_average_symmetric_projection_is_midpoint() {
        let mut p = weighted(2, 5);
        p.proj_att.weight = Tensor::zeros(&[2, 1]);
        p.proj_mlp.weight = Tensor::zeros(&[2, 1]);
        let mut r = rng(6);
        let ya = Tensor::uniform(&[3, 2], 1.0, &mut r);
        let ym = Tensor::uniform(&[3, 2], 1.0, &mut r);
        let tape = Tape::inference();
        let (out, w) =
            merge_weighted_average(&tape, &tape.constant(ya.clone()), &tape.constant(ym.clone()), &p, None)
                .unwrap();
        assert_eq!(w, [0.5, 0.5]);
        for i in 0..6 {
            assert!((out.data()[i] - 0.5 * (ya.data()[i] + ym.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_average_scalar_trace() {
        // T = 1, d = 1: pooling returns the row, scores are a·y and m·y.
        let mut p = weighted(1, 7);
        p.proj_att.weight = Tensor::new(&[1, 1], vec![0.8]).unwrap();
        p.proj_mlp.weight = Tensor::new(&[1, 1], vec![-0.3]).unwrap();
        let (ya, ym) = (2.0, -1.5);
        let tape = Tape::inference();
        let (out, w) = merge_weighted_average(
            &tape,
            &tape.constant(Tensor::new(&[1, 1], vec![ya]).unwrap()),
            &tape.constant(Tensor::new(&[1, 1], vec![ym]).unwrap()),
            &p,
            None,
        )
        .unwrap();
        let (sa, sm) = (0.8 * ya, -0.3 * ym);
        let wa = 1.0 / (1.0 + (sm - sa).exp());
        assert!((w[0] - wa).abs() < 1e-15);
        assert!((out.item() - (wa * ya + (1.0 - wa) * ym)).abs() < 1e-14);
    }

    #[test]
    fn branch_dropout_rules() {
        let mut r = rng(8);
        assert!(branch_dropout(0.5, MergeKind::Concat, true, &mut r).is_err());
        assert!(branch_dropout(1.0, MergeKind::WeightedAverage, true, &mut r).is_err());
        for _ in 0..100 {
            assert_eq!(
                branch_dropout(0.0, MergeKind::WeightedAverage, true, &mut r).unwrap(),
                BranchDecision::KeepBoth
            );
            assert_eq!(
                branch_dropout(0.9, MergeKind::WeightedAverage, false, &mut r).unwrap(),
                BranchDecision::KeepBoth
            );
        }
        let drops = (0..10_000)
            .filter(|_| {
                branch_dropout(0.5, MergeKind::WeightedAverage, true, &mut r).unwrap()
                    == BranchDecision::DropAttention
            })
            .count();
        assert!((drops as f64 / 10_000.0 - 0.5).abs() < 0.02, "{drops}");
    }

    #[test]
    fn zero_gamma_block_is_identity() {
        let c = EncoderConfig::toy(AttentionKind::Mhsa, MergeKind::WeightedAverage);
        let mut b = BlockParams::init(&c, &mut rng(9)).unwrap();
        b.visit_mut("", &mut |name, t| {
            if name.ends_with("norm.gamma") || name.ends_with("bias") {
                t.data_mut().fill(0.0);
            }
        });
        // The CSGU gate norm also zeroed; the outer norms alone already suffice.
        let x = Tensor::uniform(&[5, 8], 1.0, &mut rng(10));
        let tape = Tape::inference();
        let y = block_forward(&tape, &tape.constant(x.clone()), &b, 0, &mut Forward::inference()).unwrap();
        assert!(y.value().bit_eq(&x));
    }

    #[test]
    fn pinned_attention_weights_give_attention_residual_block() {
        let c = EncoderConfig::toy(AttentionKind::Mhsa, MergeKind::WeightedAverage);
        let b = BlockParams::init(&c, &mut rng(11)).unwrap();
        let x = Tensor::uniform(&[6, 8], 1.0, &mut rng(12));
        let tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let mut ctx = Forward::inference().with_forced_weights([1.0, 0.0]);
        let y = block_forward(&tape, &xv, &b, 0, &mut ctx).unwrap();
        let a = b.attention.as_ref().unwrap();
        let oracle = attention_branch_forward(&tape, &xv, a, false, &mut rng(0), None).unwrap();
        let oracle = tape.add(&xv, &oracle).unwrap();
        assert!(y.value().max_abs_diff(oracle.value()) < 1e-15);
    }

    #[test]
    fn dropped_branch_is_not_evaluated() {
        let mut c = EncoderConfig::toy(AttentionKind::Fastformer, MergeKind::WeightedAverage);
        c.branch_dropout = 0.5;
        let b = BlockParams::init(&c, &mut rng(13)).unwrap();
        let x = Tensor::uniform(&[5, 8], 1.0, &mut rng(14));
        let mut saw_drop = false;
        for seed in 0..20 {
            let mut probe = Probe::default();
            let mut r = rng(seed);
            let tape = Tape::inference();
            let xv = tape.constant(x.clone());
            let y = block_forward(&tape, &xv, &b, 0, &mut Forward::training(&mut r).with_probe(&mut probe)).unwrap();
            if probe.dropped.is_empty() {
                assert_eq!(probe.attention_evaluations, 1);
                continue;
            }
            saw_drop = true;
            assert_eq!(probe.attention_evaluations, 0);
            // Replay the same draws: one for the decision, then cgMLP dropout.
            let mut r = rng(seed);
            let _ = r.random::<f64>();
            let mlp = cgmlp_forward(&tape, &xv, &b.cgmlp, true, &mut r).unwrap();
            assert!(y.value().bit_eq(tape.add(&xv, &mlp).unwrap().value()));
        }
        assert!(saw_drop);
    }

    #[test]
    fn config_validation() {
        let good = EncoderConfig::toy(AttentionKind::Mhsa, MergeKind::Concat);
        good.validate().unwrap();
        let mut c = good.clone();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.kernel_size = 4;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.d_hidden = 7;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.branch_dropout = 0.2;
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&good).unwrap();
        assert_eq!(EncoderConfig::from_json(&json).unwrap(), good);
        let extra = json.replace('}', ",\"surprise\":1}");
        assert!(EncoderConfig::from_json(&extra).is_err());
    }

    #[test]
    fn header_round_trip() {
        let mut c = EncoderConfig::toy(AttentionKind::Fastformer, MergeKind::WeightedAverage);
        c.dropout = 0.1;
        c.branch_dropout = 0.3;
        let mut h = BTreeMap::new();
        c.to_header("encoder", &mut h);
        assert_eq!(EncoderConfig::from_header("encoder", &h).unwrap(), c);
    }

    #[test]
    fn empty_stack_is_subsample_plus_pe() {
        let mut c = EncoderConfig::toy(AttentionKind::Mhsa, MergeKind::Concat);
        c.num_blocks = 0;
        let p = EncoderParams::init(&c, Architecture::Branchformer).unwrap();
        let x = Tensor::uniform(&[27, 7], 1.0, &mut rng(15));
        let y = p.infer(&x).unwrap();
        let tape = Tape::inference();
        let sub = conv_subsample(&tape, &tape.constant(x), &p.subsampler).unwrap();
        let pe = sinusoidal_pe(6, 8).unwrap();
        let expect = tape.add(&sub, &tape.constant(pe)).unwrap();
        assert!(y.bit_eq(expect.value()));
        assert_eq!(y.shape(), &[6, 8]);
    }

    #[test]
    fn pruning() {
        let c = EncoderConfig::toy(AttentionKind::Mhsa, MergeKind::WeightedAverage);
        let p = EncoderParams::init(&c, Architecture::Branchformer).unwrap();
        let pruned = prune_to_cgmlp(&p).unwrap();
        assert!(pruned.num_params() < p.num_params());
        let x = Tensor::uniform(&[31, 7], 1.0, &mut rng(16));
        let tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let forced = p
            .forward(&tape, &xv, &mut Forward::inference().with_forced_weights([0.0, 1.0]))
            .unwrap();
        assert!(pruned.infer(&x).unwrap().bit_eq(forced.value()));

        let c = EncoderConfig::toy(AttentionKind::Mhsa, MergeKind::Concat);
        let p = EncoderParams::init(&c, Architecture::Branchformer).unwrap();
        assert!(matches!(prune_to_cgmlp(&p), Err(Error::Unsupported(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let c = EncoderConfig::toy(AttentionKind::Fastformer, MergeKind::WeightedAverage);
        let p = EncoderParams::init(&c, Architecture::Branchformer).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, p.config);
        let mut a = Vec::new();
        p.visit("", &mut |n, t| a.push((n.to_string(), t.clone())));
        let mut i = 0;
        back.visit("", &mut |n, t| {
            assert_eq!(n, a[i].0);
            assert!(t.bit_eq(&a[i].1));
            i += 1;
        });
        assert_eq!(i, a.len());

        let mut other = c.clone();
        other.d_hidden = 32;
        match load_checkpoint_as(&path, &other) {
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { name, .. })) => {
                assert_eq!(name, "blocks.0.cgmlp.up.weight");
            }
            other => panic!("{other:?}"),
        }

        let pruned = prune_to_cgmlp(&p).unwrap();
        save_checkpoint(&pruned, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.is_pruned());
        assert_eq!(back.num_params(), pruned.num_params());
    }
}
