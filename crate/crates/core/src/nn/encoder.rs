use super::{Ctx, Initializer, ParamId};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Layer-norm epsilon used by every normalization in the model.
pub const LN_EPS: f64 = 1e-5;

/// Valid (non-pad) positions of a padded batch, `batch x seq`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    batch: usize,
    seq: usize,
    valid: Vec<bool>,
}

impl AttentionMask {
    pub fn new(batch: usize, seq: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * seq {
            return Err(Error::Dimension(format!(
                "attention mask of length {} for batch {batch} x seq {seq}",
                valid.len()
            )));
        }
        if let Some(b) = (0..batch).find(|&b| !valid[b * seq..(b + 1) * seq].iter().any(|&v| v)) {
            return Err(Error::Contract(format!("sequence {b} has no valid position")));
        }
        Ok(Self { batch, seq, valid })
    }

    pub fn all_valid(batch: usize, seq: usize) -> Self {
        Self {
            batch,
            seq,
            valid: vec![true; batch * seq],
        }
    }

    /// Stacks per-sequence masks of equal length.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let seq = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Dimension("attention mask rows differ in length".into()));
        }
        Self::new(rows.len(), seq, rows.concat())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.valid[b * self.seq..(b + 1) * self.seq]
    }
}

/// One post-norm transformer encoder layer.
///
/// The query/key/value maps are `d x d` matrices whose output columns are
/// split evenly over `heads`.
#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub heads: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

impl EncoderLayerParams {
    pub fn init(init: &mut Initializer<'_>, prefix: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("hidden size {d} is not divisible by {heads} heads")));
        }
        if d_ff < d {
            return Err(Error::Config(format!("feed-forward width {d_ff} is below hidden size {d}")));
        }
        let name = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            heads,
            wq: init.xavier(&name("attn.wq"), d, d)?,
            bq: init.zeros(&name("attn.bq"), &[d])?,
            wk: init.xavier(&name("attn.wk"), d, d)?,
            bk: init.zeros(&name("attn.bk"), &[d])?,
            wv: init.xavier(&name("attn.wv"), d, d)?,
            bv: init.zeros(&name("attn.bv"), &[d])?,
            wo: init.xavier(&name("attn.wo"), d, d)?,
            bo: init.zeros(&name("attn.bo"), &[d])?,
            ln1_gamma: init.ones(&name("ln1.gamma"), &[d])?,
            ln1_beta: init.zeros(&name("ln1.beta"), &[d])?,
            ff1_w: init.xavier(&name("ffn.w1"), d, d_ff)?,
            ff1_b: init.zeros(&name("ffn.b1"), &[d_ff])?,
            ff2_w: init.xavier(&name("ffn.w2"), d_ff, d)?,
            ff2_b: init.zeros(&name("ffn.b2"), &[d])?,
            ln2_gamma: init.ones(&name("ln2.gamma"), &[d])?,
            ln2_beta: init.zeros(&name("ln2.beta"), &[d])?,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 16] {
        [
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln1_gamma,
            self.ln1_beta,
            self.ff1_w,
            self.ff1_b,
            self.ff2_w,
            self.ff2_b,
            self.ln2_gamma,
            self.ln2_beta,
        ]
    }
}

pub struct AttentionOutput {
    /// `[B, n, d]`
    pub output: Var,
    /// Attention weights `[B, h, n, n]`; rows are queries.
    pub weights: Var,
}

/// Scaled dot-product attention over `h` heads with `1/sqrt(d/h)` scaling.
/// Pad positions never receive weight but still attend outward.
pub fn multi_head_self_attention(
    ctx: &mut Ctx,
    x: Var,
    layer: &EncoderLayerParams,
    mask: &AttentionMask,
) -> Result<AttentionOutput> {
    let shape = ctx.tape.shape(x).to_vec();
    let [b, n, d] = shape[..] else {
        return Err(Error::Dimension(format!("attention input must be [B, n, d], got {shape:?}")));
    };
    if mask.batch() != b || mask.seq() != n {
        return Err(Error::Dimension(format!(
            "mask is {}x{} but input is {b}x{n}",
            mask.batch(),
            mask.seq()
        )));
    }
    let h = layer.heads;
    if d % h != 0 {
        return Err(Error::Config(format!("hidden size {d} is not divisible by {h} heads")));
    }
    let dh = d / h;

    let split_heads = |ctx: &mut Ctx, w: ParamId, bias: ParamId| -> Result<Var> {
        let y = ctx.linear(x, w, bias)?;
        let y = ctx.tape.reshape(y, &[b, n, h, dh])?;
        let y = ctx.tape.permute(y, &[0, 2, 1, 3])?;
        ctx.tape.reshape(y, &[b * h, n, dh])
    };
    let q = split_heads(ctx, layer.wq, layer.bq)?;
    let k = split_heads(ctx, layer.wk, layer.bk)?;
    let v = split_heads(ctx, layer.wv, layer.bv)?;

    let tape = &mut ctx.tape;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let scores = tape.reshape(scores, &[b, h, n, n])?;
    let weights = tape.masked_softmax(scores, mask.valid(), h * n)?;
    let attn = tape.reshape(weights, &[b * h, n, n])?;
    let ctx_heads = tape.batch_matmul(attn, v, false)?;
    let merged = tape.reshape(ctx_heads, &[b, h, n, dh])?;
    let merged = tape.permute(merged, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, &[b, n, d])?;
    let output = ctx.linear(merged, layer.wo, layer.bo)?;
    Ok(AttentionOutput { output, weights })
}

/// `y = LN(x + Attn(x)); out = LN(y + FFN(y))` with
/// `FFN = linear -> GELU -> dropout -> linear`.
pub fn encoder_layer(ctx: &mut Ctx, x: Var, layer: &EncoderLayerParams, mask: &AttentionMask) -> Result<Var> {
    let attn = multi_head_self_attention(ctx, x, layer, mask)?.output;
    let res = ctx.tape.add(x, attn)?;
    let (g1, b1) = (ctx.p(layer.ln1_gamma), ctx.p(layer.ln1_beta));
    let y = ctx.tape.layer_norm(res, g1, b1, LN_EPS)?;

    let hidden = ctx.linear(y, layer.ff1_w, layer.ff1_b)?;
    let hidden = ctx.tape.gelu(hidden)?;
    let hidden = ctx.dropout(hidden)?;
    let ff = ctx.linear(hidden, layer.ff2_w, layer.ff2_b)?;
    let res = ctx.tape.add(y, ff)?;
    let (g2, b2) = (ctx.p(layer.ln2_gamma), ctx.p(layer.ln2_beta));
    ctx.tape.layer_norm(res, g2, b2, LN_EPS)
}

/// Applies `layers` in order; an empty stack is the identity.
pub fn encoder_stack(ctx: &mut Ctx, x: Var, layers: &[EncoderLayerParams], mask: &AttentionMask) -> Result<Var> {
    layers.iter().try_fold(x, |h, layer| encoder_layer(ctx, h, layer, mask))
}
