//! Versioned binary checkpoint: a JSON header (config snapshot, counters,
//! tensor directory, cluster state) followed by little-endian f64 blobs for
//! parameters and Adam moments.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterState;
use crate::config::{ModelConfig, RunConfig, SeedStream};
use crate::error::{Error, Result};
use crate::model::GroupFormer;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    /// First and second Adam moments per parameter, same order as `params`;
    /// empty when the checkpoint carries no optimizer state.
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
    pub cluster_states: BTreeMap<String, ClusterState>,
    /// Validation group accuracy at save time, if evaluated.
    pub group_acc: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    epoch: usize,
    step: u64,
    streams: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
    moments: bool,
    cluster_states: BTreeMap<String, ClusterState>,
    group_acc: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn streams(config: &RunConfig) -> BTreeMap<String, u64> {
    [
        ("init", SeedStream::Init),
        ("dropout", SeedStream::Dropout),
        ("data", SeedStream::Data),
        ("kmeans", SeedStream::Kmeans),
        ("shuffle", SeedStream::Shuffle),
    ]
    .into_iter()
    .map(|(k, s)| (k.to_string(), config.stream_seed(s)))
    .collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn from_model(model: &GroupFormer, config: &RunConfig, epoch: usize, step: u64) -> Self {
        Checkpoint {
            config: config.clone(),
            epoch,
            step,
            params: model.params.iter().map(|(_, n, t)| (n.to_string(), strip(t))).collect(),
            moments: Vec::new(),
            cluster_states: model.cluster_states.clone(),
            group_acc: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            streams: streams(&self.config),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            moments: !self.moments.is_empty(),
            cluster_states: self.cluster_states.clone(),
            group_acc: self.group_acc,
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for (_, t) in &self.params {
            put(t.data());
        }
        for (m, v) in &self.moments {
            put(m);
            put(v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(c.take(len)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut params = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.shape.iter().product();
            params.push((e.name.clone(), Tensor::new(&e.shape, c.f64s(n)?)?));
        }
        let mut moments = Vec::new();
        if header.moments {
            for (_, t) in &params {
                let m = c.f64s(t.numel())?;
                let v = c.f64s(t.numel())?;
                moments.push((m, v));
            }
        }
        if c.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - c.pos)));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            params,
            moments,
            cluster_states: header.cluster_states,
            group_acc: header.group_acc,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless `model` would build the same parameter layout.
    pub fn ensure_compatible(&self, model: &ModelConfig) -> Result<()> {
        let (have, want) = (self.config.model.architecture_key(), model.architecture_key());
        if have == want {
            return Ok(());
        }
        let diff: Vec<String> = have
            .split(' ')
            .zip(want.split(' '))
            .filter(|(a, b)| a != b)
            .map(|(a, b)| format!("checkpoint {a} vs config {b}"))
            .collect();
        Err(Error::Incompatible(diff.join(", ")))
    }

    /// Rebuild the model and load the stored values into it.
    pub fn to_model(&self) -> Result<GroupFormer> {
        let cfg = &self.config;
        let mut model = GroupFormer::new(
            &cfg.model,
            cfg.stream_seed(SeedStream::Init),
            cfg.stream_seed(SeedStream::Kmeans),
        )?;
        if model.params.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in &self.params {
            model.params.assign(name, t.clone())?;
        }
        model.cluster_states = self.cluster_states.clone();
        Ok(model)
    }
}

fn strip(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.data().to_vec()).expect("same shape")
}
