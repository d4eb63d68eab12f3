//! Group representation generator: pools the scene grid into attention
//! tokens, distills an individual token with a learned query, and fuses the
//! two into the initial group token `[T, D]` per clip.

use rand::Rng;

use crate::attention::{DecoderLayer, Linear};
use crate::autodiff::Var;
use crate::cstt::Fusion;
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Grg {
    /// Per-pixel `C_g -> K` map producing the token attention logits.
    pub attend: Linear,
    /// Per-pixel `C_g -> D` embedding.
    pub embed: Linear,
    pub decoder: DecoderLayer,
    pub fuse: Linear,
    pub fusion: Fusion,
    pub tokens: usize,
}

#[allow(clippy::too_many_arguments)]
impl Grg {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        scene_channels: usize,
        tokens: usize,
        width: usize,
        heads: usize,
        ff_mult: usize,
        fusion: Fusion,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::Config("scene token count must be >= 1".into()));
        }
        let fan_in = match fusion {
            Fusion::Sum => width,
            Fusion::Concat => 2 * width,
        };
        Ok(Grg {
            attend: Linear::new(store, &format!("{name}.attend"), scene_channels, tokens, true, rng),
            embed: Linear::new(store, &format!("{name}.embed"), scene_channels, width, true, rng),
            decoder: DecoderLayer::new(store, &format!("{name}.decoder"), width, heads, ff_mult, false, rng)?,
            fuse: Linear::new(store, &format!("{name}.fuse"), fan_in, width, true, rng),
            fusion,
            tokens,
        })
    }

    /// Scene grid `[B, T, C_g, H, W]` to one pooled scene token per frame,
    /// `[B, T, D]`.
    pub fn scene_tokens<'t>(&self, f: &Forward<'t>, scene: Var<'t>) -> Result<Var<'t>> {
        let s = scene.shape();
        if s.len() != 5 {
            return Err(Error::Contract(format!("scene must be [B, T, C_g, H, W], got {s:?}")));
        }
        let (b, t, c, hw) = (s[0], s[1], s[2], s[3] * s[4]);
        // [B*T, HW, C_g]: pixels as rows.
        let pixels = scene.reshape(&[b * t, c, hw])?.permute(&[0, 2, 1])?;
        let logits = self.attend.forward(f, pixels)?.permute(&[0, 2, 1])?;
        let attention = logits.softmax(2)?;
        let embedded = self.embed.forward(f, pixels)?;
        let width = self.embed.fan_out;
        attention
            .matmul(embedded)?
            .mean(1)?
            .reshape(&[b, t, width])
    }

    /// Learned query `[T, D]` attends, per frame, over that frame's
    /// individuals `[B, T, N, D]`; output `[B, T, D]`.
    pub fn individual_token<'t>(&self, f: &Forward<'t>, x_i: Var<'t>, query: ParamId) -> Result<Var<'t>> {
        let s = x_i.shape();
        if s.len() != 4 || s[2] == 0 {
            return Err(Error::Contract(format!(
                "individual features must be a non-empty [B, T, N, D] tensor, got {s:?}"
            )));
        }
        let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
        let q = tile_query(f, query, b, t)?;
        self.decoder
            .forward(f, q, x_i.reshape(&[b * t, n, d])?)?
            .reshape(&[b, t, d])
    }

    pub fn fuse_tokens<'t>(&self, f: &Forward<'t>, scene_tok: Var<'t>, ind_tok: Var<'t>) -> Result<Var<'t>> {
        let (ss, is) = (scene_tok.shape(), ind_tok.shape());
        if ss != is {
            return Err(Error::shape("fuse_tokens", &ss, &is));
        }
        let joined = match self.fusion {
            Fusion::Sum => scene_tok.add(ind_tok)?,
            Fusion::Concat => Var::concat(&[scene_tok, ind_tok], ss.len() - 1)?,
        };
        self.fuse.forward(f, joined)
    }

    pub fn forward<'t>(&self, f: &Forward<'t>, scene: Var<'t>, x_i: Var<'t>, query: ParamId) -> Result<Var<'t>> {
        let s = self.scene_tokens(f, scene)?;
        let i = self.individual_token(f, x_i, query)?;
        self.fuse_tokens(f, s, i)
    }
}

/// The `[T, D]` query repeated for each clip as `[B * T, 1, D]`.
pub fn tile_query<'t>(f: &Forward<'t>, query: ParamId, batch: usize, frames: usize) -> Result<Var<'t>> {
    let q = f.param(query);
    let qs = q.shape();
    if qs.len() != 2 || qs[0] != frames {
        return Err(Error::shape("learned_query", &qs, &[frames]));
    }
    let index: Vec<usize> = (0..batch).flat_map(|_| 0..frames).collect();
    q.gather_rows(&index)?.reshape(&[batch * frames, 1, qs[1]])
}
