//! Clustered spatial-temporal transformer block.
//!
//! A block runs a spatial encoder (individuals of a frame attend to each
//! other, frames are the batch) and a temporal encoder (frames of an
//! individual attend to each other, individuals are the batch) in
//! parallel, crosses them through two individual decoders, and refines the
//! group token with a cross-attention group decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{scaled_dot_attention, DecoderLayer, EncoderLayer, Linear, MultiHeadAttention};
use crate::autodiff::Var;
use crate::clustering::{self, assign, ClusterState, Points};
use crate::error::{Error, Result};
use crate::forward::{ClusterRecord, ClusterSource, Forward};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Additive logit mask for keys outside the query's cluster. Finite so that
/// the tape's non-finite scan stays meaningful; `exp` of it underflows to 0.
const MASKED_LOGIT: f64 = -1e30;

/// How spatial and temporal context are combined inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// A single linear map on the individuals, then the group decoder.
    Baseline,
    /// Spatial encoder, then the group decoder.
    Spatial,
    /// Spatial encoder feeding the temporal encoder, then the group decoder.
    Stacked,
    /// Spatial and temporal encoders summed, then the group decoder.
    Parallel,
    /// Parallel encoders crossed through the individual decoders.
    Ours,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Spatial,
        Variant::Stacked,
        Variant::Parallel,
        Variant::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Spatial => "spatial",
            Variant::Stacked => "stacked",
            Variant::Parallel => "parallel",
            Variant::Ours => "ours",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Which tokens are clustered together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterScope {
    /// The individuals of each frame separately.
    Frame,
    /// All tokens of a clip jointly.
    Clip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Elementwise sum, then a linear map.
    Sum,
    /// Concatenation, then a linear map back to the model width.
    Concat,
}

/// Clustered attention settings for one encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterConfig {
    pub clusters: usize,
    pub intra: bool,
    pub inter: bool,
    pub scope: ClusterScope,
}

impl ClusterConfig {
    /// One cluster, or both attention terms off, is plain full attention.
    pub fn active(&self) -> bool {
        self.clusters > 1 && (self.intra || self.inter)
    }
}

/// Width/heads shared by the sub-layers of a block.
#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub decoder_self_attention: bool,
}

/// Encoder whose self-attention may be clustered.
#[derive(Clone, Debug)]
pub struct ClusteredEncoder {
    pub site: String,
    pub layer: EncoderLayer,
    /// Attention among cluster centroids.
    pub inter: Option<MultiHeadAttention>,
    pub cluster: Option<ClusterConfig>,
}

/// Clustering applied to a `[G, L, D]` batch: which tokens form one
/// clustering unit and how many clusters each unit gets.
struct UnitLayout {
    units: usize,
    entries_per_unit: usize,
    tokens: usize,
}

impl ClusteredEncoder {
    pub fn new(
        store: &mut ParamStore,
        site: &str,
        shape: BlockShape,
        cluster: Option<ClusterConfig>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layer = EncoderLayer::new(store, site, shape.width, shape.heads, shape.ff_mult, rng)?;
        let cluster = cluster.filter(ClusterConfig::active);
        let inter = match cluster {
            Some(c) if c.inter => Some(MultiHeadAttention::new(
                store,
                &format!("{site}.inter"),
                shape.width,
                shape.heads,
                rng,
            )?),
            _ => None,
        };
        Ok(ClusteredEncoder {
            site: site.to_string(),
            layer,
            inter,
            cluster,
        })
    }

    /// `[G, L, D] -> [G, L, D]`. `entries_per_clip` is how many consecutive
    /// batch entries belong to one clip (used by clip-scope clustering).
    pub fn forward<'t>(&self, f: &Forward<'t>, x: Var<'t>, entries_per_clip: usize) -> Result<Var<'t>> {
        match self.cluster {
            None => self.layer.forward(f, x),
            Some(cfg) => self.layer.forward_with(f, x, |h| {
                clustered_self_attention(f, &self.site, &self.layer.attn, self.inter.as_ref(), h, cfg, entries_per_clip)
            }),
        }
    }
}

/// Clustered self-attention over `h: [G, L, D]` (already normalized).
///
/// Tokens are grouped by k-means on their query projections (no gradient
/// through the assignment). Intra-group attention restricts each query to
/// keys of its own cluster; inter-group attention runs over the member-mean
/// centroids of the queries, and each updated centroid is added to the
/// outputs of its members.
pub fn clustered_self_attention<'t>(
    f: &Forward<'t>,
    site: &str,
    attn: &MultiHeadAttention,
    inter: Option<&MultiHeadAttention>,
    h: Var<'t>,
    cfg: ClusterConfig,
    entries_per_clip: usize,
) -> Result<Var<'t>> {
    if cfg.clusters == 0 {
        return Err(Error::Config("cluster count must be >= 1".into()));
    }
    let shape = h.shape();
    let (g, l, d) = (shape[0], shape[1], shape[2]);
    let p = attn.project(f, h, h, h)?;
    if !p.q_full.value().all_finite() {
        let (node, op) = f.tape.first_non_finite().unwrap_or((p.q_full.id(), "matmul"));
        return Err(Error::NonFinite { op, node });
    }
    let layout = match cfg.scope {
        ClusterScope::Frame => UnitLayout {
            units: g,
            entries_per_unit: 1,
            tokens: l,
        },
        ClusterScope::Clip => {
            if entries_per_clip == 0 || g % entries_per_clip != 0 {
                return Err(Error::Contract(format!(
                    "batch of {g} entries does not split into clips of {entries_per_clip}"
                )));
            }
            UnitLayout {
                units: g / entries_per_clip,
                entries_per_unit: entries_per_clip,
                tokens: entries_per_clip * l,
            }
        }
    };
    let (labels, fallback) = cluster_labels(f, site, &p.q_full.value(), &layout, cfg.clusters)?;
    let c = cfg.clusters;

    let mask = if cfg.intra {
        Some(intra_mask(&labels, g, l, attn.heads))
    } else {
        None
    };
    let att = scaled_dot_attention(p.q, p.k, p.v, attn.scale(), true, mask.as_ref())?;
    let mut out = attn.output(f, att.output)?;

    if let (true, Some(inter)) = (cfg.inter, inter) {
        let global: Vec<usize> = labels
            .iter()
            .enumerate()
            .map(|(i, &lab)| (i / layout.tokens) * c + lab)
            .collect();
        let mut counts = vec![0usize; layout.units * c];
        for &gid in &global {
            counts[gid] += 1;
        }
        let inv = Tensor::from_fn(&[layout.units * c, d], |i| match counts[i / d] {
            0 => 0.0,
            n => 1.0 / n as f64,
        });
        let empty = Tensor::from_fn(&[layout.units * c, d], |i| {
            if counts[i / d] == 0 {
                fallback[i]
            } else {
                0.0
            }
        });
        let centroids = p
            .q_full
            .reshape(&[g * l, d])?
            .scatter_add_rows(&global, layout.units * c)?
            .mul_const(&inv)?
            .add_const(&empty)?
            .reshape(&[layout.units, c, d])?;
        let updated = inter.forward(f, centroids, centroids, centroids, false)?;
        let broadcast = updated
            .reshape(&[layout.units * c, d])?
            .gather_rows(&global)?
            .reshape(&[g, l, d])?;
        out = out.add(broadcast)?;
    }

    f.record(ClusterRecord {
        site: site.to_string(),
        groups: layout.units,
        members: layout.tokens,
        clusters: c,
        attention_entropy: mean_row_entropy(&att.weights.value()),
        points: f.keeps_points().then(|| p.q_full.value().clone()),
        labels,
    });
    Ok(out)
}

/// Labels for every token (unit-major) and, per `(unit, cluster)` row, the
/// centroid used when a cluster ends up with no members.
fn cluster_labels(
    f: &Forward<'_>,
    site: &str,
    queries: &Tensor,
    layout: &UnitLayout,
    clusters: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let d = *queries.shape().last().expect("rank-3 queries");
    let per_unit = layout.tokens * d;
    debug_assert_eq!(layout.entries_per_unit * queries.shape()[1], layout.tokens);
    if let Some(rec) = f.replayed(site)? {
        if rec.labels.len() != layout.units * layout.tokens || rec.clusters != clusters {
            return Err(Error::Contract(format!(
                "replayed assignment for {site} has {} labels / {} clusters, expected {} / {clusters}",
                rec.labels.len(),
                rec.clusters,
                layout.units * layout.tokens
            )));
        }
        if rec.labels.iter().any(|&x| x >= clusters) {
            return Err(Error::Contract(format!("replayed label out of range at {site}")));
        }
        let fallback = member_means(queries.data(), &rec.labels, layout, clusters, d);
        return Ok((rec.labels, fallback));
    }
    let mut labels = Vec::with_capacity(layout.units * layout.tokens);
    let mut fallback = Vec::with_capacity(layout.units * clusters * d);
    for u in 0..layout.units {
        let points = Points::new(&queries.data()[u * per_unit..(u + 1) * per_unit], d)?;
        let (state, a) = match f.cluster_source() {
            ClusterSource::Lloyd { iters, seed } => clustering::lloyd(&points, clusters, iters, seed)?,
            ClusterSource::MiniBatch { states, seed } => match states.get(site) {
                Some(s) if s.clusters() == clusters && s.dim == d => (s.clone(), assign(&points, s)?),
                _ => clustering::lloyd(&points, clusters, 1, seed)?,
            },
        };
        labels.extend_from_slice(&a.labels);
        fallback.extend_from_slice(&state.centroids);
    }
    Ok((labels, fallback))
}

fn member_means(q: &[f64], labels: &[usize], layout: &UnitLayout, clusters: usize, d: usize) -> Vec<f64> {
    let mut sums = vec![0.0; layout.units * clusters * d];
    let mut counts = vec![0usize; layout.units * clusters];
    for (i, &lab) in labels.iter().enumerate() {
        let row = (i / layout.tokens) * clusters + lab;
        counts[row] += 1;
        for j in 0..d {
            sums[row * d + j] += q[i * d + j];
        }
    }
    for (row, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums[row * d..(row + 1) * d].iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

/// `[G * heads, L, L]` additive mask: 0 within a cluster, very negative across.
fn intra_mask(labels: &[usize], g: usize, l: usize, heads: usize) -> Tensor {
    let mut m = Tensor::zeros(&[g * heads, l, l]);
    let data = m.data_mut();
    for gi in 0..g {
        let lab = &labels[gi * l..(gi + 1) * l];
        for hd in 0..heads {
            let base = (gi * heads + hd) * l * l;
            for i in 0..l {
                for j in 0..l {
                    if lab[i] != lab[j] {
                        data[base + i * l + j] = MASKED_LOGIT;
                    }
                }
            }
        }
    }
    m
}

fn mean_row_entropy(weights: &Tensor) -> f64 {
    let l = *weights.shape().last().expect("weights rank >= 2");
    let rows = weights.numel() / l;
    let total: f64 = weights
        .data()
        .chunks(l)
        .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .sum();
    total / rows as f64
}

/// One spatial-temporal block.
#[derive(Clone, Debug)]
pub struct SttBlock {
    pub name: String,
    pub variant: Variant,
    pub spatial: Option<ClusteredEncoder>,
    pub temporal: Option<ClusteredEncoder>,
    /// Spatial-side (actor query over time) and temporal-side (time query
    /// over the roster) individual decoders.
    pub decoders: Option<(DecoderLayer, DecoderLayer)>,
    pub fuse: Option<Linear>,
    pub fusion: Fusion,
    /// Baseline substitute for the encoders.
    pub fc: Option<Linear>,
    pub group: DecoderLayer,
}

/// Cluster settings for the spatial and temporal encoders of a block.
#[derive(Clone, Copy, Debug)]
pub struct BlockClustering {
    pub spatial: Option<ClusterConfig>,
    pub temporal: Option<ClusterConfig>,
}

impl SttBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        variant: Variant,
        shape: BlockShape,
        clustering: BlockClustering,
        fusion: Fusion,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = shape.width;
        let uses_spatial = variant != Variant::Baseline;
        let uses_temporal = matches!(variant, Variant::Stacked | Variant::Parallel | Variant::Ours);
        let spatial = uses_spatial
            .then(|| ClusteredEncoder::new(store, &format!("{name}.spatial"), shape, clustering.spatial, rng))
            .transpose()?;
        let temporal = uses_temporal
            .then(|| ClusteredEncoder::new(store, &format!("{name}.temporal"), shape, clustering.temporal, rng))
            .transpose()?;
        let (decoders, fuse) = if variant == Variant::Ours {
            let ds = DecoderLayer::new(
                store,
                &format!("{name}.dec_spatial"),
                w,
                shape.heads,
                shape.ff_mult,
                shape.decoder_self_attention,
                rng,
            )?;
            let dt = DecoderLayer::new(
                store,
                &format!("{name}.dec_temporal"),
                w,
                shape.heads,
                shape.ff_mult,
                shape.decoder_self_attention,
                rng,
            )?;
            let fan_in = match fusion {
                Fusion::Sum => w,
                Fusion::Concat => 2 * w,
            };
            let fuse = Linear::new(store, &format!("{name}.fuse"), fan_in, w, true, rng);
            (Some((ds, dt)), Some(fuse))
        } else {
            (None, None)
        };
        let fc = (variant == Variant::Baseline).then(|| Linear::new(store, &format!("{name}.fc"), w, w, true, rng));
        let group = DecoderLayer::new(store, &format!("{name}.group"), w, shape.heads, shape.ff_mult, false, rng)?;
        Ok(SttBlock {
            name: name.to_string(),
            variant,
            spatial,
            temporal,
            decoders,
            fuse,
            fusion,
            fc,
            group,
        })
    }

    fn require<'a, T>(part: &'a Option<T>, what: &str, name: &str) -> Result<&'a T> {
        part.as_ref()
            .ok_or_else(|| Error::Contract(format!("block {name} has no {what}")))
    }

    /// `[B, T, N, D] -> V_s: [B, T, N, D]`: frames are the batch.
    pub fn spatial_encode<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let enc = Self::require(&self.spatial, "spatial encoder", &self.name)?;
        let s = x.shape();
        let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
        enc.forward(f, x.reshape(&[b * t, n, d])?, t)?.reshape(&[b, t, n, d])
    }

    /// `[B, T, N, D] -> V_t: [B, N, T, D]`: individuals are the batch.
    pub fn temporal_encode<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let enc = Self::require(&self.temporal, "temporal encoder", &self.name)?;
        let s = x.shape();
        let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
        let by_individual = x.permute(&[0, 2, 1, 3])?.reshape(&[b * n, t, d])?;
        enc.forward(f, by_individual, n)?.reshape(&[b, n, t, d])
    }

    /// Cross the two encodings: each individual's per-frame spatial rows
    /// query its own timeline in `V_t`, and each frame's temporal rows query
    /// that frame's roster in `V_s`. Output `[B, T, N, D]`.
    pub fn cross_decode<'t>(&self, f: &Forward<'t>, v_s: Var<'t>, v_t: Var<'t>) -> Result<Var<'t>> {
        let (dec_s, dec_t) = Self::require(&self.decoders, "individual decoders", &self.name)?;
        let fuse = Self::require(&self.fuse, "decoder fusion", &self.name)?;
        let ss = v_s.shape();
        let ts = v_t.shape();
        if ss.len() != 4 || ts.len() != 4 || ss[0] != ts[0] || ss[1] != ts[2] || ss[2] != ts[1] || ss[3] != ts[3] {
            return Err(Error::Contract(format!(
                "V_s {ss:?} and V_t {ts:?} do not describe the same clips"
            )));
        }
        let (b, t, n, d) = (ss[0], ss[1], ss[2], ss[3]);
        let actor_query = v_s.permute(&[0, 2, 1, 3])?.reshape(&[b * n, t, d])?;
        let timeline = v_t.reshape(&[b * n, t, d])?;
        let spatial_side = dec_s
            .forward(f, actor_query, timeline)?
            .reshape(&[b, n, t, d])?
            .permute(&[0, 2, 1, 3])?;
        let time_query = v_t.permute(&[0, 2, 1, 3])?.reshape(&[b * t, n, d])?;
        let roster = v_s.reshape(&[b * t, n, d])?;
        let temporal_side = dec_t.forward(f, time_query, roster)?.reshape(&[b, t, n, d])?;
        let joined = match self.fusion {
            Fusion::Sum => spatial_side.add(temporal_side)?,
            Fusion::Concat => Var::concat(&[spatial_side, temporal_side], 3)?,
        };
        fuse.forward(f, joined)
    }

    /// Group token `[B, T, D]` attends to each frame's individuals `[B, T, N, D]`.
    pub fn group_decode<'t>(&self, f: &Forward<'t>, x_g: Var<'t>, x_i: Var<'t>) -> Result<Var<'t>> {
        group_decode_with(&self.group, f, x_g, x_i)
    }

    /// `(X_I, X_G) -> (X_I', X_G')`.
    pub fn forward<'t>(&self, f: &Forward<'t>, x_i: Var<'t>, x_g: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let enhanced = match self.variant {
            Variant::Baseline => Self::require(&self.fc, "fc layer", &self.name)?.forward(f, x_i)?,
            Variant::Spatial => self.spatial_encode(f, x_i)?,
            Variant::Stacked => {
                let v_s = self.spatial_encode(f, x_i)?;
                self.temporal_encode(f, v_s)?.permute(&[0, 2, 1, 3])?
            }
            Variant::Parallel => {
                let v_s = self.spatial_encode(f, x_i)?;
                let v_t = self.temporal_encode(f, x_i)?;
                v_s.add(v_t.permute(&[0, 2, 1, 3])?)?
            }
            Variant::Ours => {
                let v_s = self.spatial_encode(f, x_i)?;
                let v_t = self.temporal_encode(f, x_i)?;
                self.cross_decode(f, v_s, v_t)?
            }
        };
        let x_g = self.group_decode(f, x_g, enhanced)?;
        Ok((enhanced, x_g))
    }
}

pub fn group_decode_with<'t>(group: &DecoderLayer, f: &Forward<'t>, x_g: Var<'t>, x_i: Var<'t>) -> Result<Var<'t>> {
    let gs = x_g.shape();
    let is = x_i.shape();
    if gs.len() != 3 || is.len() != 4 || gs[0] != is[0] || gs[1] != is[1] || gs[2] != is[3] {
        return Err(Error::shape("group_decode", &gs, &is));
    }
    let (b, t, n, d) = (is[0], is[1], is[2], is[3]);
    let query = x_g.reshape(&[b * t, 1, d])?;
    let memory = x_i.reshape(&[b * t, n, d])?;
    group.forward(f, query, memory)?.reshape(&[b, t, d])
}

/// Apply blocks in order; zero blocks return the inputs unchanged.
pub fn stack_forward<'t>(
    blocks: &[SttBlock],
    f: &Forward<'t>,
    x_i: Var<'t>,
    x_g: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    blocks
        .iter()
        .try_fold((x_i, x_g), |(xi, xg), block| block.forward(f, xi, xg))
}

/// Persistent centroids for mini-batch mode, refreshed from one pass's trace.
pub fn update_minibatch_states(
    states: &mut std::collections::BTreeMap<String, ClusterState>,
    trace: &[ClusterRecord],
    seed: u64,
) -> Result<()> {
    for rec in trace {
        let Some(points) = &rec.points else { continue };
        let d = *points.shape().last().expect("rank-3 points");
        let pts = Points::new(points.data(), d)?;
        let next = match states.get(&rec.site) {
            Some(s) if s.clusters() == rec.clusters && s.dim == d => clustering::minibatch_step(&pts, s)?,
            _ => clustering::init_centroids(&pts, rec.clusters, seed)?,
        };
        states.insert(rec.site.clone(), next);
    }
    Ok(())
}
