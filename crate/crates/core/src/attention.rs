//! Transformer building blocks: linear maps, layer norm, multi-head
//! attention, feed-forward network, encoder and decoder layers.
//!
//! Layers are pre-norm. Self-attention keeps the value stream as an
//! in-equation residual, `softmax(QKᵀ·s)V + V`, per head; cross-attention
//! instead adds its output back onto the query stream.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.linear_weight(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), &[fan_out]));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// `x · W (+ b)` over the last axis of `x`.
    pub fn forward<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(f.param(self.weight))?;
        match self.bias {
            Some(b) => y.add(f.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.ones(format!("{name}.gamma"), &[width]),
            beta: store.zeros(format!("{name}.beta"), &[width]),
        }
    }

    pub fn forward<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(f.param(self.gamma), f.param(self.beta), LAYER_NORM_EPS)
    }
}

/// Output of [`scaled_dot_attention`].
pub struct AttentionOutput<'t> {
    pub output: Var<'t>,
    /// Row-stochastic weights `[.., L_q, L_k]`.
    pub weights: Var<'t>,
}

/// `softmax(Q Kᵀ · scale + mask) V`, plus `V` itself when `value_residual`
/// is set (requires `L_q == L_k`). `mask` is an additive constant shaped
/// like the logits; `-inf` entries exclude a key.
pub fn scaled_dot_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    scale: f64,
    value_residual: bool,
    mask: Option<&Tensor>,
) -> Result<AttentionOutput<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if ks != vs {
        return Err(Error::shape("scaled_dot_attention", &ks, &vs));
    }
    if qs.len() < 2 || qs[qs.len() - 1] != ks[ks.len() - 1] {
        return Err(Error::shape("scaled_dot_attention", &qs, &ks));
    }
    let mut logits = q.matmul(k.transpose()?)?.scale(scale);
    if let Some(m) = mask {
        logits = logits.add_const(m)?;
    }
    let weights = logits.softmax(logits.shape().len() - 1)?;
    let mut output = weights.matmul(v)?;
    if value_residual {
        if qs != vs {
            return Err(Error::shape("value_residual", &qs, &vs));
        }
        output = output.add(v)?;
    }
    Ok(AttentionOutput { output, weights })
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
    pub width: usize,
}

/// Projected, head-split attention inputs, exposed so that clustered
/// attention can reuse the query/key/value projections.
pub struct HeadProjections<'t> {
    /// `[B * heads, L_q, D_h]`
    pub q: Var<'t>,
    /// `[B * heads, L_k, D_h]`
    pub k: Var<'t>,
    /// `[B * heads, L_k, D_h]`
    pub v: Var<'t>,
    /// Unsplit query projection `[B, L_q, D]`.
    pub q_full: Var<'t>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "model width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            w_q: store.linear_weight(format!("{name}.w_q"), width, width, rng),
            w_k: store.linear_weight(format!("{name}.w_k"), width, width, rng),
            w_v: store.linear_weight(format!("{name}.w_v"), width, width, rng),
            w_o: store.linear_weight(format!("{name}.w_o"), width, width, rng),
            heads,
            width,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Per-head logit scale `1 / sqrt(D_h)`; with one head this is `1 / sqrt(D)`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn split_heads<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (b, l) = (s[0], s[1]);
        x.reshape(&[b, l, self.heads, self.head_dim()])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * self.heads, l, self.head_dim()])
    }

    pub fn merge_heads<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (bh, l) = (s[0], s[1]);
        let b = bh / self.heads;
        x.reshape(&[b, self.heads, l, self.head_dim()])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, l, self.width])
    }

    fn check_input(&self, x: &Var<'_>, what: &str) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.width {
            return Err(Error::Contract(format!(
                "{what} must be [batch, length, {}], got {s:?}",
                self.width
            )));
        }
        Ok(())
    }

    pub fn project<'t>(&self, f: &Forward<'t>, query: Var<'t>, key: Var<'t>, value: Var<'t>) -> Result<HeadProjections<'t>> {
        self.check_input(&query, "query")?;
        self.check_input(&key, "key")?;
        self.check_input(&value, "value")?;
        let q_full = query.matmul(f.param(self.w_q))?;
        Ok(HeadProjections {
            q: self.split_heads(q_full)?,
            k: self.split_heads(key.matmul(f.param(self.w_k))?)?,
            v: self.split_heads(value.matmul(f.param(self.w_v))?)?,
            q_full,
        })
    }

    /// Concatenate head outputs `[B * heads, L, D_h]` and apply `W_o`.
    pub fn output<'t>(&self, f: &Forward<'t>, heads_out: Var<'t>) -> Result<Var<'t>> {
        self.merge_heads(heads_out)?.matmul(f.param(self.w_o))
    }

    /// `[B, L_q, D]` attention of `query` over `key`/`value`.
    pub fn forward<'t>(
        &self,
        f: &Forward<'t>,
        query: Var<'t>,
        key: Var<'t>,
        value: Var<'t>,
        value_residual: bool,
    ) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(f, query, key, value, value_residual, None)?.0)
    }

    /// Like [`forward`](Self::forward), also returning the per-head weights
    /// `[B * heads, L_q, L_k]`. `mask` must have the same shape as the weights.
    pub fn forward_with_weights<'t>(
        &self,
        f: &Forward<'t>,
        query: Var<'t>,
        key: Var<'t>,
        value: Var<'t>,
        value_residual: bool,
        mask: Option<&Tensor>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let p = self.project(f, query, key, value)?;
        let att = scaled_dot_attention(p.q, p.k, p.v, self.scale(), value_residual, mask)?;
        Ok((self.output(f, att.output)?, att.weights))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            hidden: Linear::new(store, &format!("{name}.w1"), width, hidden, true, rng),
            out: Linear::new(store, &format!("{name}.w2"), hidden, width, true, rng),
        }
    }

    pub fn forward<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.hidden.forward(f, x)?.relu();
        let h = f.dropout(h)?;
        self.out.forward(f, h)
    }
}

/// Self-attention encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ff_mult: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(EncoderLayer {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), width),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, width * ff_mult, rng),
        })
    }

    /// `[B, L, D] -> [B, L, D]` with full self-attention.
    pub fn forward<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.forward_with(f, x, |h| self.attn.forward(f, h, h, h, true))
    }

    /// Run the layer with a caller-supplied attention sub-block, which
    /// receives the normalized input and returns its `[B, L, D]` output.
    pub fn forward_with<'t>(
        &self,
        f: &Forward<'t>,
        x: Var<'t>,
        attention: impl FnOnce(Var<'t>) -> Result<Var<'t>>,
    ) -> Result<Var<'t>> {
        let h = self.norm_attn.forward(f, x)?;
        let attended = f.dropout(attention(h)?)?;
        self.ffn_block(f, attended)
    }

    /// `x + FFN(norm(x))`.
    pub fn ffn_block<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.norm_ffn.forward(f, x)?;
        let y = f.dropout(self.ffn.forward(f, h)?)?;
        x.add(y)
    }
}

/// Cross-attention decoder layer, optionally preceded by self-attention.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: Option<(LayerNorm, MultiHeadAttention)>,
    pub norm_query: LayerNorm,
    pub norm_memory: LayerNorm,
    pub cross: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
    /// Add the projected values inside the cross-attention as well.
    pub value_residual: bool,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_mult: usize,
        self_attention: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let self_attn = if self_attention {
            Some((
                LayerNorm::new(store, &format!("{name}.norm_self"), width),
                MultiHeadAttention::new(store, &format!("{name}.self_attn"), width, heads, rng)?,
            ))
        } else {
            None
        };
        Ok(DecoderLayer {
            self_attn,
            norm_query: LayerNorm::new(store, &format!("{name}.norm_query"), width),
            norm_memory: LayerNorm::new(store, &format!("{name}.norm_memory"), width),
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), width, heads, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), width),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, width * ff_mult, rng),
            value_residual: false,
        })
    }

    /// `[B, L_q, D]` queries over `[B, L_m, D]` memory.
    pub fn forward<'t>(&self, f: &Forward<'t>, query: Var<'t>, memory: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(f, query, memory)?.0)
    }

    /// Also returns the cross-attention weights `[B * heads, L_q, L_m]`.
    pub fn forward_with_weights<'t>(
        &self,
        f: &Forward<'t>,
        query: Var<'t>,
        memory: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let ms = memory.shape();
        if ms.len() != 3 || ms[1] == 0 {
            return Err(Error::Contract(format!(
                "decoder memory must be a non-empty [batch, length, width] tensor, got {ms:?}"
            )));
        }
        let mut x = query;
        if let Some((norm, attn)) = &self.self_attn {
            let h = norm.forward(f, x)?;
            x = f.dropout(attn.forward(f, h, h, h, true)?)?;
        }
        let q = self.norm_query.forward(f, x)?;
        let m = self.norm_memory.forward(f, memory)?;
        let (attended, weights) = self.cross.forward_with_weights(f, q, m, m, self.value_residual, None)?;
        let x = x.add(f.dropout(attended)?)?;
        let h = self.norm_ffn.forward(f, x)?;
        let y = f.dropout(self.ffn.forward(f, h)?)?;
        Ok((x.add(y)?, weights))
    }
}
