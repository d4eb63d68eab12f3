//! Group and individual classifiers and the joint cross-entropy objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Linear;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::params::ParamStore;

/// How the `T` frames are reduced before classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    /// Last frame for the group head.
    Last,
    /// Middle frame `T / 2` (the annotated frame of a clip).
    Center,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub group: Linear,
    pub individual: Linear,
    pub group_pooling: Pooling,
    pub individual_pooling: Pooling,
}

impl Heads {
    pub fn new(
        store: &mut ParamStore,
        width: usize,
        group_classes: usize,
        action_classes: usize,
        group_pooling: Pooling,
        individual_pooling: Pooling,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if group_classes < 2 || action_classes < 2 {
            return Err(Error::Config(format!(
                "need at least two classes per head, got {group_classes} group / {action_classes} action"
            )));
        }
        Ok(Heads {
            group: Linear::new(store, "heads.group", width, group_classes, true, rng),
            individual: Linear::new(store, "heads.individual", width, action_classes, true, rng),
            group_pooling,
            individual_pooling,
        })
    }

    /// `[B, T, D] -> [B, G_cls]`.
    pub fn group_logits<'t>(&self, f: &Forward<'t>, x_g: Var<'t>) -> Result<Var<'t>> {
        let pooled = pool_frames(x_g, self.group_pooling)?;
        self.group.forward(f, pooled)
    }

    /// `[B, T, N, D] -> [B * N, A_cls]`, clip-major.
    pub fn individual_logits<'t>(&self, f: &Forward<'t>, x_i: Var<'t>) -> Result<Var<'t>> {
        let s = x_i.shape();
        if s.len() != 4 {
            return Err(Error::Contract(format!("individuals must be [B, T, N, D], got {s:?}")));
        }
        let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
        let flat = x_i.reshape(&[b, t, n * d])?;
        let pooled = pool_frames(flat, self.individual_pooling)?.reshape(&[b * n, d])?;
        self.individual.forward(f, pooled)
    }
}

/// Reduce axis 1 of `[B, T, W]` to `[B, W]`.
fn pool_frames(x: Var<'_>, pooling: Pooling) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Contract(format!("expected [B, T, W], got {s:?}")));
    }
    let (b, t, w) = (s[0], s[1], s[2]);
    let frame = match pooling {
        Pooling::Mean => return x.mean(1),
        Pooling::Last => t - 1,
        Pooling::Center => t / 2,
    };
    x.permute(&[1, 0, 2])?
        .reshape(&[t, b * w])?
        .gather_rows(&[frame])?
        .reshape(&[b, w])
}

/// `L = CE(group) + λ · CE(actions)`, each a mean over its rows.
pub fn combined_loss<'t>(
    group_logits: Var<'t>,
    group_labels: &[usize],
    action_logits: Var<'t>,
    action_labels: &[usize],
    lambda: f64,
) -> Result<Var<'t>> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let l1 = group_logits.cross_entropy(group_labels)?;
    if lambda == 0.0 {
        return Ok(l1);
    }
    let l2 = action_logits.cross_entropy(action_labels)?;
    l1.add(l2.scale(lambda))
}
