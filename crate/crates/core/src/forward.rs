//! Per-pass state threaded through every layer's forward: the tape, the
//! parameters, the dropout stream and the cluster-assignment trace.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::clustering::ClusterState;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How cluster assignments are obtained inside a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum ClusterSource<'a> {
    /// Fresh k-means++ seeding and `iters` Lloyd steps on every group.
    Lloyd { iters: usize, seed: u64 },
    /// Assign against persistent centroids owned by the model.
    MiniBatch {
        states: &'a BTreeMap<String, ClusterState>,
        seed: u64,
    },
}

/// Assignments made at one clustered attention site during a pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub site: String,
    /// Number of independently clustered groups (frames or clips).
    pub groups: usize,
    /// Points per group.
    pub members: usize,
    pub clusters: usize,
    /// `groups * members` labels in `[0, clusters)`.
    pub labels: Vec<usize>,
    /// Mean entropy (nats) of the intra-cluster attention rows.
    pub attention_entropy: f64,
    /// Clustered points, kept only when mini-batch centroids need updating.
    #[serde(skip)]
    pub points: Option<Tensor>,
}

pub struct Forward<'t> {
    pub tape: &'t Tape,
    pub params: &'t ParamStore,
    dropout: f64,
    dropout_seed: u64,
    dropout_calls: Cell<u64>,
    clusters: ClusterSource<'t>,
    replay: Option<Vec<ClusterRecord>>,
    replay_pos: Cell<usize>,
    keep_points: bool,
    trace: RefCell<Vec<ClusterRecord>>,
}

impl<'t> Forward<'t> {
    /// Evaluation pass: no dropout, stateless Lloyd clustering.
    pub fn eval(tape: &'t Tape, params: &'t ParamStore) -> Self {
        Self::new(tape, params, 0.0, 0, ClusterSource::Lloyd { iters: 5, seed: 0 })
    }

    pub fn new(
        tape: &'t Tape,
        params: &'t ParamStore,
        dropout: f64,
        dropout_seed: u64,
        clusters: ClusterSource<'t>,
    ) -> Self {
        Forward {
            tape,
            params,
            dropout,
            dropout_seed,
            dropout_calls: Cell::new(0),
            clusters,
            replay: None,
            replay_pos: Cell::new(0),
            keep_points: false,
            trace: RefCell::new(Vec::new()),
        }
    }

    /// Reuse the assignments of an earlier pass in the same call order.
    pub fn with_replay(mut self, records: Vec<ClusterRecord>) -> Self {
        self.replay = Some(records);
        self
    }

    /// Keep the clustered points in the trace (needed for mini-batch updates).
    pub fn keeping_points(mut self) -> Self {
        self.keep_points = true;
        self
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.params, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    pub fn training(&self) -> bool {
        self.dropout > 0.0
    }

    /// Dropout with the pass rate; each call draws a fresh mask seed from
    /// the pass seed so that a pass can be repeated exactly.
    pub fn dropout(&self, x: Var<'t>) -> Result<Var<'t>> {
        if self.dropout == 0.0 {
            return Ok(x);
        }
        let call = self.dropout_calls.get();
        self.dropout_calls.set(call + 1);
        x.dropout(self.dropout, mix_seed(self.dropout_seed, call))
    }

    pub fn cluster_source(&self) -> ClusterSource<'t> {
        self.clusters
    }

    pub(crate) fn keeps_points(&self) -> bool {
        self.keep_points || matches!(self.clusters, ClusterSource::MiniBatch { .. })
    }

    /// Next replayed record for `site`, if this pass is replaying.
    pub(crate) fn replayed(&self, site: &str) -> Result<Option<ClusterRecord>> {
        let Some(records) = &self.replay else {
            return Ok(None);
        };
        let pos = self.replay_pos.get();
        self.replay_pos.set(pos + 1);
        match records.get(pos) {
            Some(r) if r.site == site => Ok(Some(r.clone())),
            Some(r) => Err(Error::Contract(format!(
                "cluster replay out of order: expected site {site}, recorded {}",
                r.site
            ))),
            None => Err(Error::Contract(format!("cluster replay exhausted at site {site}"))),
        }
    }

    pub(crate) fn record(&self, record: ClusterRecord) {
        self.trace.borrow_mut().push(record);
    }

    /// Assignments made so far, in call order.
    pub fn cluster_trace(&self) -> Vec<ClusterRecord> {
        self.trace.borrow().clone()
    }

    pub fn take_cluster_trace(&self) -> Vec<ClusterRecord> {
        std::mem::take(&mut *self.trace.borrow_mut())
    }
}

/// SplitMix64 finalizer over `(seed, stream)`; used to derive independent
/// seeds for named random streams.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
