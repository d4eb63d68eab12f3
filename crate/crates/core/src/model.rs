//! The assembled network: input embedding and temporal positions, the group
//! representation generator, the block stack, and the classifier heads.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::Linear;
use crate::autodiff::Var;
use crate::clustering::ClusterState;
use crate::config::{ClusterMode, ModelConfig};
use crate::cstt::{stack_forward, BlockClustering, BlockShape, ClusterConfig, SttBlock, Variant};
use crate::error::{Error, Result};
use crate::forward::{ClusterRecord, ClusterSource, Forward};
use crate::grg::{tile_query, Grg};
use crate::heads::{combined_loss, Heads};
use crate::params::{ParamId, ParamStore};
use crate::synth::Batch;
use crate::tensor::Tensor;

/// Parameter layout of the network. Holds ids only; values live in a
/// [`ParamStore`] so that perturbed copies can be evaluated.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub input: Linear,
    pub positions: ParamId,
    pub query: ParamId,
    pub grg: Option<Grg>,
    pub blocks: Vec<SttBlock>,
    pub heads: Heads,
}

pub struct ModelOutput<'t> {
    /// `[B, G_cls]`
    pub group_logits: Var<'t>,
    /// `[B * N, A_cls]`
    pub action_logits: Var<'t>,
    /// `[B, T, N, D]`
    pub individuals: Var<'t>,
    /// `[B, T, D]`
    pub group: Var<'t>,
}

impl Architecture {
    pub fn build(config: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let input = Linear::new(store, "input", config.input_dim, w, true, &mut rng);
        let positions = store.small_normal("positions", &[config.frames, w], &mut rng);
        let query = store.small_normal("group_query", &[config.frames, w], &mut rng);
        let grg = config
            .grg
            .then(|| {
                Grg::new(
                    store,
                    "grg",
                    config.scene_channels,
                    config.scene_tokens,
                    w,
                    config.heads,
                    config.ff_mult,
                    config.fusion,
                    &mut rng,
                )
            })
            .transpose()?;
        let shape = BlockShape {
            width: w,
            heads: config.heads,
            ff_mult: config.ff_mult,
            decoder_self_attention: config.decoder_self_attention,
        };
        let cluster = ClusterConfig {
            clusters: config.clusters,
            intra: config.intra,
            inter: config.inter,
            scope: config.cluster_scope,
        };
        let clustering = BlockClustering {
            spatial: Some(cluster),
            temporal: config.cluster_temporal.then_some(cluster),
        };
        let blocks = if config.variant == Variant::Baseline || config.blocks == 0 {
            vec![SttBlock::new(
                store,
                "baseline",
                Variant::Baseline,
                shape,
                clustering,
                config.fusion,
                &mut rng,
            )?]
        } else {
            (0..config.blocks)
                .map(|i| {
                    SttBlock::new(
                        store,
                        &format!("block{i}"),
                        config.variant,
                        shape,
                        clustering,
                        config.fusion,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?
        };
        let heads = Heads::new(
            store,
            w,
            config.group_classes,
            config.action_classes,
            config.group_pooling,
            config.individual_pooling,
            &mut rng,
        )?;
        Ok(Architecture {
            config: config.clone(),
            input,
            positions,
            query,
            grg,
            blocks,
            heads,
        })
    }

    /// Embedded individuals `[B, T, N, D]` with temporal positions added.
    pub fn embed_individuals<'t>(&self, f: &Forward<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let s = features.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.frames || s[3] != c.input_dim {
            return Err(Error::Contract(format!(
                "individual features must be [B, {}, N, {}], got {s:?}",
                c.frames, c.input_dim
            )));
        }
        let n = s[2];
        let x = self.input.forward(f, features)?;
        let index: Vec<usize> = (0..c.frames).flat_map(|t| std::iter::repeat_n(t, n)).collect();
        let pos = f
            .param(self.positions)
            .gather_rows(&index)?
            .reshape(&[c.frames, n, c.width])?;
        x.add(pos)
    }

    /// Initial group token `[B, T, D]`.
    pub fn initial_group<'t>(&self, f: &Forward<'t>, scene: Var<'t>, x_i: Var<'t>) -> Result<Var<'t>> {
        let s = x_i.shape();
        match &self.grg {
            Some(grg) => grg.forward(f, scene, x_i, self.query),
            None => tile_query(f, self.query, s[0], s[1])?.reshape(&[s[0], s[1], s[3]]),
        }
    }

    pub fn forward<'t>(&self, f: &Forward<'t>, batch: &Batch) -> Result<ModelOutput<'t>> {
        let features = f.constant(batch.individuals.clone());
        let scene = f.constant(batch.scene.clone());
        let x_i = self.embed_individuals(f, features)?;
        let x_g = self.initial_group(f, scene, x_i)?;
        let (individuals, group) = stack_forward(&self.blocks, f, x_i, x_g)?;
        Ok(ModelOutput {
            group_logits: self.heads.group_logits(f, group)?,
            action_logits: self.heads.individual_logits(f, individuals)?,
            individuals,
            group,
        })
    }

    pub fn loss<'t>(&self, f: &Forward<'t>, batch: &Batch, lambda: f64) -> Result<(Var<'t>, ModelOutput<'t>)> {
        let out = self.forward(f, batch)?;
        let loss = combined_loss(
            out.group_logits,
            &batch.group_labels,
            out.action_logits,
            &batch.action_labels,
            lambda,
        )?;
        Ok((loss, out))
    }
}

/// Architecture, parameter values and persistent cluster state.
#[derive(Clone, Debug)]
pub struct GroupFormer {
    pub arch: Architecture,
    pub params: ParamStore,
    /// Mini-batch centroids per clustered site.
    pub cluster_states: BTreeMap<String, ClusterState>,
    pub kmeans_seed: u64,
}

/// Predictions of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `[B, G_cls]`
    pub group_logits: Tensor,
    /// `[B * N, A_cls]`
    pub action_logits: Tensor,
}

/// Anything that scores batches; lets evaluation run on stub models.
pub trait Classifier {
    fn predict(&self, batch: &Batch) -> Result<Predictions>;
}

impl GroupFormer {
    pub fn new(config: &ModelConfig, init_seed: u64, kmeans_seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let arch = Architecture::build(config, &mut params, init_seed)?;
        Ok(GroupFormer {
            arch,
            params,
            cluster_states: BTreeMap::new(),
            kmeans_seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Cluster source for passes over this model.
    pub fn cluster_source(&self) -> ClusterSource<'_> {
        match self.arch.config.cluster_mode {
            ClusterMode::Lloyd => ClusterSource::Lloyd {
                iters: self.arch.config.kmeans_iters,
                seed: self.kmeans_seed,
            },
            ClusterMode::Minibatch => ClusterSource::MiniBatch {
                states: &self.cluster_states,
                seed: self.kmeans_seed,
            },
        }
    }

    /// Evaluation-mode forward; also returns the cluster assignments made.
    pub fn predict_traced(&self, batch: &Batch) -> Result<(Predictions, Vec<ClusterRecord>)> {
        let tape = crate::autodiff::Tape::new();
        let f = Forward::new(&tape, &self.params, 0.0, 0, self.cluster_source());
        let out = self.arch.forward(&f, batch)?;
        let preds = Predictions {
            group_logits: out.group_logits.value().clone(),
            action_logits: out.action_logits.value().clone(),
        };
        Ok((preds, f.take_cluster_trace()))
    }
}

impl Classifier for GroupFormer {
    fn predict(&self, batch: &Batch) -> Result<Predictions> {
        Ok(self.predict_traced(batch)?.0)
    }
}
