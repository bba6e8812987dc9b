//! Per-target forecasting network: channel weighting, a stack of blocks
//! (dilated depthwise causal conv, column norm, LayerScale, ReLU, sparse
//! causal self-attention, residual), and a linear read-out per time step.
//!
//! Tokens for attention are time positions; the embedding axis is the
//! channel axis, so with `heads = N` each head has dimension 1. Channel
//! weighting is applied once, before the first block, and its softmax
//! weights double as the candidate-cause signal for discovery.
//!
//! Input alignment: the target row enters as its own strict past while
//! every other row is advanced one step (see [`forecast_input`]), which
//! puts a lag-`d` cause at convolution lookback `d` and keeps the kernel
//! argmax readable as that lag.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax, Tape, Tensor2, Var};
use crate::training::RunConfig;

/// Epsilon added under the square root in both norm flavors.
pub const NORM_EPS: f64 = 1e-8;

/// Initial value of every LayerScale gain where the profile enables it.
pub const LAYERSCALE_INIT: f64 = 1e-4;

/// Checkpoint schema version written and accepted by this crate.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    LayerNorm,
    #[serde(rename = "RMSNorm")]
    RmsNorm,
}

/// Parameters of one block. `norm_bias` is kept in the schema for both norm
/// kinds; RMS-norm blocks leave it at zero and never read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub kernels: Tensor2,
    pub dilation: usize,
    pub norm_kind: NormKind,
    pub norm_gain: Tensor2,
    pub norm_bias: Tensor2,
    pub layerscale_gamma: Option<Tensor2>,
    pub attn_proj_q: Tensor2,
    pub attn_proj_k: Tensor2,
    pub attn_proj_v: Tensor2,
    pub attn_proj_o: Tensor2,
    pub sparsity_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub channel_alpha: Tensor2,
    pub blocks: Vec<BlockParams>,
    pub head_weights: Tensor2,
    pub head_bias: Tensor2,
    pub heads: usize,
    /// Index of the series this network forecasts. Recorded in the
    /// checkpoint because it fixes the input alignment (see
    /// [`forecast_input`]): delay readouts are meaningless without it.
    pub target: usize,
}

/// One pruned attention matrix: strictly-upper-triangular entries are exact
/// zeros, rows sum to 1 when the threshold is 0 and to at most 1 otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub block: usize,
    pub head: usize,
    pub weights: Tensor2,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub predictions: Vec<f64>,
    pub channel_weights: Vec<f64>,
    pub attention: Vec<AttentionRecord>,
}

/// Versioned on-disk form of a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint { version: CHECKPOINT_VERSION, params }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<ModelParams> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        ckpt.params.validate()?;
        Ok(ckpt.params)
    }
}

impl ModelParams {
    pub fn channel_count(&self) -> usize {
        self.channel_alpha.rows()
    }

    /// Maximum lookback of the stacked convolutions, `sum((k-1) * dilation)`.
    pub fn receptive_field(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| (b.kernels.cols() - 1) * b.dilation)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channel_count();
        if n < 2 {
            return Err(Error::Config(format!("model needs at least 2 channels, got {n}")));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("model needs at least one block".into()));
        }
        if self.heads == 0 || n % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide channel count {n}",
                self.heads
            )));
        }
        if self.target >= n {
            return Err(Error::Config(format!(
                "target {} out of range for {n} channels",
                self.target
            )));
        }
        if self.head_weights.shape() != (1, n) || self.head_bias.shape() != (1, 1) {
            return Err(Error::Shape("read-out head shape mismatch".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernels.rows() != n
                || b.norm_gain.shape() != (n, 1)
                || b.norm_bias.shape() != (n, 1)
                || b.attn_proj_q.shape() != (n, n)
                || b.attn_proj_k.shape() != (n, n)
                || b.attn_proj_v.shape() != (n, n)
                || b.attn_proj_o.shape() != (n, n)
            {
                return Err(Error::Shape(format!("block {i} parameter shapes mismatch")));
            }
            if let Some(g) = &b.layerscale_gamma {
                if g.shape() != (n, 1) {
                    return Err(Error::Shape(format!("block {i} LayerScale shape mismatch")));
                }
            }
            if b.dilation == 0 {
                return Err(Error::Config(format!("block {i} dilation must be >= 1")));
            }
            if !(0.0..1.0).contains(&b.sparsity_threshold) {
                return Err(Error::Config(format!(
                    "block {i} sparsity threshold {} outside [0, 1)",
                    b.sparsity_threshold
                )));
            }
        }
        Ok(())
    }

    /// All learnable tensors in the canonical order used by the optimizer
    /// and by [`register_params`]. The two traversals must stay in lockstep.
    pub(crate) fn param_tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out: Vec<&mut Tensor2> = vec![&mut self.channel_alpha];
        for b in &mut self.blocks {
            out.push(&mut b.kernels);
            out.push(&mut b.norm_gain);
            out.push(&mut b.norm_bias);
            if let Some(g) = &mut b.layerscale_gamma {
                out.push(g);
            }
            out.push(&mut b.attn_proj_q);
            out.push(&mut b.attn_proj_k);
            out.push(&mut b.attn_proj_v);
            out.push(&mut b.attn_proj_o);
        }
        out.push(&mut self.head_weights);
        out.push(&mut self.head_bias);
        out
    }
}

pub(crate) struct BlockVars {
    pub kernels: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub gamma: Option<Var>,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

pub(crate) struct ParamVars {
    pub alpha: Var,
    pub blocks: Vec<BlockVars>,
    pub head_w: Var,
    pub head_b: Var,
    /// Same order as [`ModelParams::param_tensors_mut`].
    pub flat: Vec<Var>,
}

/// Record every parameter tensor on the tape, preserving the canonical order.
pub(crate) fn register_params(tape: &mut Tape, params: &ModelParams) -> Result<ParamVars> {
    let mut flat = Vec::new();
    let reg = |tape: &mut Tape, t: &Tensor2, flat: &mut Vec<Var>| -> Result<Var> {
        let v = tape.leaf(t)?;
        flat.push(v);
        Ok(v)
    };
    let alpha = reg(tape, &params.channel_alpha, &mut flat)?;
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let kernels = reg(tape, &b.kernels, &mut flat)?;
        let norm_gain = reg(tape, &b.norm_gain, &mut flat)?;
        let norm_bias = reg(tape, &b.norm_bias, &mut flat)?;
        let gamma = match &b.layerscale_gamma {
            Some(g) => Some(reg(tape, g, &mut flat)?),
            None => None,
        };
        let wq = reg(tape, &b.attn_proj_q, &mut flat)?;
        let wk = reg(tape, &b.attn_proj_k, &mut flat)?;
        let wv = reg(tape, &b.attn_proj_v, &mut flat)?;
        let wo = reg(tape, &b.attn_proj_o, &mut flat)?;
        blocks.push(BlockVars { kernels, norm_gain, norm_bias, gamma, wq, wk, wv, wo });
    }
    let head_w = reg(tape, &params.head_weights, &mut flat)?;
    let head_b = reg(tape, &params.head_bias, &mut flat)?;
    Ok(ParamVars { alpha, blocks, head_w, head_b, flat })
}

pub(crate) struct TapeForward {
    pub predictions: Var,
    pub channel_weights: Var,
    pub records: Vec<AttentionRecord>,
}

fn attention_on_tape(
    tape: &mut Tape,
    features: Var,
    bv: &BlockVars,
    heads: usize,
    tau: f64,
    block_index: usize,
    record: bool,
) -> Result<(Var, Vec<AttentionRecord>)> {
    let (_, n) = tape.shape(features);
    if heads == 0 || n % heads != 0 {
        return Err(Error::Config(format!("head count {heads} must divide channel count {n}")));
    }
    if tau >= 1.0 {
        return Err(Error::Config(format!(
            "sparsity threshold {tau} >= 1 would prune every attention row"
        )));
    }
    let d_head = n / heads;
    let inv_scale = 1.0 / (d_head as f64).sqrt();
    let q = tape.matmul(features, bv.wq)?;
    let k = tape.matmul(features, bv.wk)?;
    let v = tape.matmul(features, bv.wv)?;
    let mut records = Vec::new();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.col_slice(q, h * d_head, d_head)?,
                tape.col_slice(k, h * d_head, d_head)?,
                tape.col_slice(v, h * d_head, d_head)?,
            )
        };
        if record {
            let scores = tape.causal_scores(qh, kh, inv_scale)?;
            let weights = tape.causal_softmax_rows(scores)?;
            let (t, _) = tape.shape(weights);
            let mut pruned = tape.value(weights).to_vec();
            for w in pruned.iter_mut() {
                if *w < tau {
                    *w = 0.0;
                }
            }
            records.push(AttentionRecord {
                block: block_index,
                head: h,
                weights: Tensor2::new(t, t, pruned)?,
            });
            head_outs.push(tape.causal_matmul_pruned(weights, vh, tau)?);
        } else {
            head_outs.push(tape.causal_attention(qh, kh, vh, inv_scale, tau)?);
        }
    }
    let cat = if heads == 1 { head_outs[0] } else { tape.col_concat(&head_outs)? };
    let out = tape.matmul(cat, bv.wo)?;
    Ok((out, records))
}

fn block_on_tape(
    tape: &mut Tape,
    x: Var,
    block: &BlockParams,
    bv: &BlockVars,
    heads: usize,
    block_index: usize,
    record: bool,
) -> Result<(Var, Vec<AttentionRecord>)> {
    let conv = tape.conv1d(x, bv.kernels, block.dilation)?;
    let normed = match block.norm_kind {
        NormKind::LayerNorm => tape.layernorm_cols(conv, bv.norm_gain, bv.norm_bias, NORM_EPS)?,
        NormKind::RmsNorm => tape.rmsnorm_cols(conv, bv.norm_gain, NORM_EPS)?,
    };
    let scaled = match bv.gamma {
        Some(g) => tape.scale_rows(normed, g)?,
        None => normed,
    };
    let act = tape.relu(scaled)?;
    let feats = tape.transpose(act)?;
    let (attn, records) = attention_on_tape(
        tape,
        feats,
        bv,
        heads,
        block.sparsity_threshold,
        block_index,
        record,
    )?;
    let back = tape.transpose(attn)?;
    let out = tape.add(x, back)?;
    Ok((out, records))
}

/// Full forward pass over an input window already holding the predictor
/// columns (the outputs align one-to-one with those columns).
pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    x: Var,
    record: bool,
) -> Result<TapeForward> {
    let weights = tape.softmax_vec(pv.alpha)?;
    let mut cur = tape.scale_rows(x, weights)?;
    let mut records = Vec::new();
    for (i, (block, bv)) in params.blocks.iter().zip(&pv.blocks).enumerate() {
        let (next, mut recs) = block_on_tape(tape, cur, block, bv, params.heads, i, record)?;
        cur = next;
        records.append(&mut recs);
    }
    let lin = tape.matmul(pv.head_w, cur)?;
    let predictions = tape.add_scalar(lin, pv.head_b)?;
    Ok(TapeForward { predictions, channel_weights: weights, records })
}

// ---------------------------------------------------------------------------
// Public pure operations (thin wrappers over a scratch tape)
// ---------------------------------------------------------------------------

/// Gate each input series by its softmax channel weight.
pub fn channel_attention_apply(x: &Tensor2, alpha: &[f64]) -> Result<(Tensor2, Vec<f64>)> {
    if alpha.len() != x.rows() {
        return Err(Error::Shape(format!(
            "{} channel weights for {} series",
            alpha.len(),
            x.rows()
        )));
    }
    let weights = softmax(alpha)?;
    let mut out = x.clone();
    for (c, &w) in weights.iter().enumerate() {
        for v in out.row_mut(c) {
            *v *= w;
        }
    }
    Ok((out, weights))
}

/// Multi-head causal self-attention with post-softmax threshold pruning.
/// `features` is tokens-by-embedding (time positions by channels); pruned
/// rows are not renormalized, so a fully pruned row contributes zero.
pub fn sparse_causal_attention(
    features: &Tensor2,
    wq: &Tensor2,
    wk: &Tensor2,
    wv: &Tensor2,
    wo: &Tensor2,
    heads: usize,
    tau: f64,
) -> Result<(Tensor2, Vec<AttentionRecord>)> {
    let n = features.cols();
    for (name, m) in [("q", wq), ("k", wk), ("v", wv), ("o", wo)] {
        if m.shape() != (n, n) {
            return Err(Error::Shape(format!(
                "projection {name} must be {n}x{n}, got {:?}",
                m.shape()
            )));
        }
    }
    let mut tape = Tape::new();
    let f = tape.constant(features.rows(), n, features.values())?;
    let bv = BlockVars {
        kernels: f, // unused by attention
        norm_gain: f,
        norm_bias: f,
        gamma: None,
        wq: tape.constant(n, n, wq.values())?,
        wk: tape.constant(n, n, wk.values())?,
        wv: tape.constant(n, n, wv.values())?,
        wo: tape.constant(n, n, wo.values())?,
    };
    let (out, records) = attention_on_tape(&mut tape, f, &bv, heads, tau, 0, true)?;
    Ok((tape.to_tensor(out), records))
}

/// One block applied outside of training: conv, norm, LayerScale, ReLU,
/// sparse attention, residual.
pub fn dycast_block_forward(
    x: &Tensor2,
    block: &BlockParams,
    heads: usize,
) -> Result<(Tensor2, Vec<AttentionRecord>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.rows(), x.cols(), x.values())?;
    let bv = BlockVars {
        kernels: tape.constant(block.kernels.rows(), block.kernels.cols(), block.kernels.values())?,
        norm_gain: tape.constant(block.norm_gain.rows(), 1, block.norm_gain.values())?,
        norm_bias: tape.constant(block.norm_bias.rows(), 1, block.norm_bias.values())?,
        gamma: match &block.layerscale_gamma {
            Some(g) => Some(tape.constant(g.rows(), 1, g.values())?),
            None => None,
        },
        wq: tape.constant(block.attn_proj_q.rows(), block.attn_proj_q.cols(), block.attn_proj_q.values())?,
        wk: tape.constant(block.attn_proj_k.rows(), block.attn_proj_k.cols(), block.attn_proj_k.values())?,
        wv: tape.constant(block.attn_proj_v.rows(), block.attn_proj_v.cols(), block.attn_proj_v.values())?,
        wo: tape.constant(block.attn_proj_o.rows(), block.attn_proj_o.cols(), block.attn_proj_o.values())?,
    };
    let (out, records) = block_on_tape(&mut tape, xv, block, &bv, heads, 0, true)?;
    Ok((tape.to_tensor(out), records))
}

/// Input matrix for forecasting row `target` of `x`. The target row keeps
/// its own strict past (columns `0..T-1`) while every other row is advanced
/// one step (columns `1..T`), so prediction index `t` aligns with the target
/// value at time `t+1` and a cause acting on the target with lag `d >= 1`
/// sits at convolution lookback exactly `d` in its input row. That lookback
/// is what the kernel-argmax delay readout measures; aligning all rows on
/// the strict past instead would shift every cross-channel delay by one and
/// let lag-1 structure bypass the convolutions entirely through the block
/// residuals, leaving nothing for the readout.
pub fn forecast_input(x: &Tensor2, target: usize) -> Result<Tensor2> {
    let (n, t_len) = x.shape();
    if t_len < 2 {
        return Err(Error::SeriesTooShort(format!(
            "forecasting needs at least 2 time steps, got {t_len}"
        )));
    }
    if target >= n {
        return Err(Error::Config(format!("target {target} out of range for {n} series")));
    }
    let w = t_len - 1;
    let mut out = Tensor2::zeros(n, w);
    for c in 0..n {
        let from = if c == target { 0 } else { 1 };
        for t in 0..w {
            out.set(c, t, x.get(c, t + from));
        }
    }
    Ok(out)
}

/// Forward pass over a series window: the input matrix is built by
/// [`forecast_input`] for `params.target`, and the `T-1` predictions align
/// with that row's values at times `1..T`.
pub fn model_forward(x: &Tensor2, params: &ModelParams) -> Result<ModelOutput> {
    params.validate()?;
    if x.rows() != params.channel_count() {
        return Err(Error::Shape(format!(
            "{} input series for a {}-channel model",
            x.rows(),
            params.channel_count()
        )));
    }
    let mut tape = Tape::new();
    let input = forecast_input(x, params.target)?;
    let xv = tape.constant(input.rows(), input.cols(), input.values())?;
    let pv = register_params(&mut tape, params)?;
    let fwd = forward_on_tape(&mut tape, params, &pv, xv, true)?;
    Ok(ModelOutput {
        predictions: tape.value(fwd.predictions).to_vec(),
        channel_weights: tape.value(fwd.channel_weights).to_vec(),
        attention: fwd.records,
    })
}

/// Norm kind and LayerScale placement for a block: the last block uses
/// RMS-norm with LayerScale, earlier blocks use LayerNorm without it.
pub fn block_layout(num_blocks: usize, index: usize) -> (NormKind, bool) {
    if index + 1 == num_blocks {
        (NormKind::RmsNorm, true)
    } else {
        (NormKind::LayerNorm, false)
    }
}

/// Fresh parameters for one target network. Kernels draw from
/// uniform(+-sqrt(1/k)), projections and the head from uniform(+-sqrt(1/N)),
/// in a fixed traversal order so a seed pins every byte of the checkpoint.
/// The `target` field starts at row 0; training stamps the real index.
pub fn build_model(config: &RunConfig, n: usize, rng_seed: u64) -> Result<ModelParams> {
    if n < 2 {
        return Err(Error::Config(format!("model needs at least 2 channels, got {n}")));
    }
    config.validate()?;
    let heads = config.heads.unwrap_or(n);
    if heads == 0 || n % heads != 0 {
        return Err(Error::Config(format!("head count {heads} must divide channel count {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let k = config.kernel_size;
    let kernel_bound = (1.0 / k as f64).sqrt();
    let proj_bound = (1.0 / n as f64).sqrt();
    let draw = |rng: &mut ChaCha8Rng, len: usize, bound: f64| -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
    };

    let mut blocks = Vec::with_capacity(config.num_blocks);
    for i in 0..config.num_blocks {
        let (norm_kind, layerscale) = block_layout(config.num_blocks, i);
        let dilation = config.dilation_base.pow(i as u32);
        blocks.push(BlockParams {
            kernels: Tensor2::param(n, k, draw(&mut rng, n * k, kernel_bound))?,
            dilation,
            norm_kind,
            norm_gain: Tensor2::filled(n, 1, 1.0).with_grad(),
            norm_bias: Tensor2::zeros(n, 1).with_grad(),
            layerscale_gamma: if layerscale {
                Some(Tensor2::filled(n, 1, LAYERSCALE_INIT).with_grad())
            } else {
                None
            },
            attn_proj_q: Tensor2::param(n, n, draw(&mut rng, n * n, proj_bound))?,
            attn_proj_k: Tensor2::param(n, n, draw(&mut rng, n * n, proj_bound))?,
            attn_proj_v: Tensor2::param(n, n, draw(&mut rng, n * n, proj_bound))?,
            attn_proj_o: Tensor2::param(n, n, draw(&mut rng, n * n, proj_bound))?,
            sparsity_threshold: config.tau_sparse,
        });
    }
    let params = ModelParams {
        channel_alpha: Tensor2::zeros(n, 1).with_grad(),
        blocks,
        head_weights: Tensor2::param(1, n, draw(&mut rng, n, proj_bound))?,
        head_bias: Tensor2::zeros(1, 1).with_grad(),
        heads,
        target: 0,
    };
    params.validate()?;
    Ok(params)
}
