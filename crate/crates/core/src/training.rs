//! Optimization loop: Adam with step decay, seeded shuffling and dropout,
//! gradient clipping, per-epoch validation and best-checkpoint tracking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::checkpoint::Checkpoint;
use crate::config::{ClusterMode, RunConfig, SeedStream, TrainConfig};
use crate::cstt::update_minibatch_states;
use crate::error::{Error, Result};
use crate::forward::{mix_seed, ClusterRecord, Forward};
use crate::model::{Classifier, GroupFormer};
use crate::synth::{Batch, Dataset, Split, SyntheticSample};

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = cfg.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.lr / cfg.decay_factor.powi(decays as i32)
}

/// One bias-corrected Adam update of `param` in place; `t` is the 1-based
/// step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract("adam step count starts at 1".into()));
    }
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::shape("adam_step", &[n], &[grad.len(), m.len(), v.len()]));
    }
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..n {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Accuracy and loss over a set of clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub group_acc: f64,
    pub ind_acc: f64,
    /// Mean group cross-entropy.
    pub group_loss: f64,
    pub clips: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn cross_entropy_row(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[label]
}

pub fn evaluate(model: &impl Classifier, clips: &[&SyntheticSample], batch_size: usize) -> Result<Metrics> {
    if clips.is_empty() {
        return Err(Error::Contract("evaluate needs at least one clip".into()));
    }
    let (mut g_hit, mut a_hit, mut a_total, mut loss) = (0usize, 0usize, 0usize, 0.0);
    for chunk in clips.chunks(batch_size.max(1)) {
        let batch = Batch::stack(chunk)?;
        let p = model.predict(&batch)?;
        let gw = p.group_logits.shape()[1];
        for (row, &y) in p.group_logits.data().chunks(gw).zip(&batch.group_labels) {
            g_hit += usize::from(argmax(row) == y);
            loss += cross_entropy_row(row, y);
        }
        let aw = p.action_logits.shape()[1];
        for (row, &y) in p.action_logits.data().chunks(aw).zip(&batch.action_labels) {
            a_hit += usize::from(argmax(row) == y);
            a_total += 1;
        }
    }
    Ok(Metrics {
        group_acc: g_hit as f64 / clips.len() as f64,
        ind_acc: a_hit as f64 / a_total.max(1) as f64,
        group_loss: loss / clips.len() as f64,
        clips: clips.len(),
    })
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<Metrics>,
}

/// Mutable training state: model, Adam moments and counters.
pub struct Trainer {
    pub config: RunConfig,
    pub model: GroupFormer,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    pub epoch: usize,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = GroupFormer::new(
            &config.model,
            config.stream_seed(SeedStream::Init),
            config.stream_seed(SeedStream::Kmeans),
        )?;
        let moments = model
            .params
            .iter()
            .map(|(_, _, t)| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
            .collect();
        Ok(Trainer {
            config: config.clone(),
            model,
            moments,
            epoch: 0,
            step: 0,
        })
    }

    /// Resume from a checkpoint that carries optimizer state.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(&ckpt.config)?;
        t.model = ckpt.to_model()?;
        if ckpt.moments.len() == t.moments.len() {
            t.moments = ckpt.moments.clone();
        }
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_model(&self.model, &self.config, self.epoch, self.step);
        c.moments = self.moments.clone();
        c
    }

    /// Forward/backward of one chunk; the loss is pre-scaled by `weight`.
    fn chunk_gradients(
        &self,
        clips: &[&SyntheticSample],
        weight: f64,
        dropout_seed: u64,
    ) -> Result<(f64, Gradients, Vec<ClusterRecord>)> {
        let batch = Batch::stack(clips)?;
        let tape = Tape::new();
        let mut f = Forward::new(
            &tape,
            &self.model.params,
            self.model.config().dropout,
            dropout_seed,
            self.model.cluster_source(),
        );
        if self.model.config().cluster_mode == ClusterMode::Minibatch {
            f = f.keeping_points();
        }
        let (loss, _) = self.model.arch.loss(&f, &batch, self.config.train.lambda)?;
        let value = loss.value().item();
        if !value.is_finite() {
            let (node, op) = tape.first_non_finite().unwrap_or((loss.id(), "loss"));
            return Err(Error::NonFinite { op, node });
        }
        let grads = tape.backward(loss.scale(weight))?;
        Ok((value, grads, f.take_cluster_trace()))
    }

    /// One optimizer step on `clips`; returns the batch loss.
    pub fn step(&mut self, clips: &[&SyntheticSample], lr: f64) -> Result<f64> {
        let tc = &self.config.train;
        let b = clips.len();
        if b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let workers = tc.workers.min(b);
        let per = b.div_ceil(workers);
        let chunks: Vec<&[&SyntheticSample]> = clips.chunks(per).collect();
        let step_seed = mix_seed(self.config.stream_seed(SeedStream::Dropout), self.step);
        let results: Vec<Result<(f64, Gradients, Vec<ClusterRecord>)>> = if chunks.len() == 1 {
            vec![self.chunk_gradients(chunks[0], 1.0, step_seed)]
        } else {
            let this = &*self;
            std::thread::scope(|s| {
                let handles: Vec<_> = chunks
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let weight = c.len() as f64 / b as f64;
                        s.spawn(move || this.chunk_gradients(c, weight, mix_seed(step_seed, i as u64)))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        self.model.params.zero_grad();
        let mut loss = 0.0;
        let mut traces = Vec::with_capacity(results.len());
        for (r, c) in results.into_iter().zip(&chunks) {
            let (l, g, trace) = r?;
            loss += l * c.len() as f64 / b as f64;
            self.model.params.accumulate(&g);
            traces.push(trace);
        }
        self.apply_gradients(lr)?;
        if self.model.config().cluster_mode == ClusterMode::Minibatch {
            let seed = self.model.kmeans_seed;
            for trace in &traces {
                update_minibatch_states(&mut self.model.cluster_states, trace, seed)?;
            }
        }
        Ok(loss)
    }

    fn apply_gradients(&mut self, lr: f64) -> Result<()> {
        let tc = self.config.train.clone();
        let store = &mut self.model.params;
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        let norm = ids
            .iter()
            .filter_map(|&id| store.get(id).grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let clip = if tc.clip_norm > 0.0 && norm > tc.clip_norm {
            tc.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        for id in ids {
            let t = store.get_mut(id);
            let grad: Vec<f64> = match t.grad.take() {
                Some(g) => g.into_iter().map(|x| x * clip).collect(),
                None => vec![0.0; t.numel()],
            };
            let (m, v) = &mut self.moments[id.index()];
            adam_step(t.data_mut(), &grad, m, v, lr, tc.beta1, tc.beta2, tc.eps, self.step)?;
        }
        Ok(())
    }

    /// One pass over `train` in a seeded order; returns the mean batch loss.
    pub fn train_epoch(&mut self, train: &[&SyntheticSample]) -> Result<f64> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            self.config.stream_seed(SeedStream::Shuffle),
            self.epoch as u64,
        ));
        order.shuffle(&mut rng);
        let lr = lr_at(self.epoch, &self.config.train);
        let bs = self.config.train.batch_size;
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(bs) {
            let clips: Vec<&SyntheticSample> = idx.iter().map(|&i| train[i]).collect();
            total += self.step(&clips, lr)?;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches.max(1) as f64)
    }
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Highest validation group accuracy (earliest on ties).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub model: GroupFormer,
}

/// Train on the even-index split and validate on the odd one (on the
/// training clips when there are no validation clips).
pub fn train_with(
    config: &RunConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Contract("dataset has no training clips".into()));
    }
    let val = match data.split(Split::Val) {
        v if v.is_empty() => train.clone(),
        v => v,
    };
    let mut trainer = Trainer::new(config)?;
    let tc = config.train.clone();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 0..tc.epochs {
        let lr = lr_at(epoch, &tc);
        let train_loss = trainer.train_epoch(&train)?;
        let due = (epoch + 1) % tc.eval_every == 0 || epoch + 1 == tc.epochs;
        let val_metrics = if due {
            Some(evaluate(&trainer.model, &val, tc.batch_size)?)
        } else {
            None
        };
        if let Some(m) = &val_metrics {
            if best.as_ref().and_then(|b| b.group_acc).is_none_or(|acc| m.group_acc > acc) {
                let mut c = trainer.checkpoint();
                c.group_acc = Some(m.group_acc);
                best = Some(c);
            }
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val: val_metrics,
        };
        on_epoch(&record)?;
        history.push(record);
    }
    let mut last = trainer.checkpoint();
    last.group_acc = history.last().and_then(|r| r.val.as_ref()).map(|m| m.group_acc);
    Ok(TrainOutcome {
        history,
        best: best.unwrap_or_else(|| last.clone()),
        last,
        model: trainer.model,
    })
}

pub fn train(config: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(config, data, |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert!((lr_at(60, &cfg) - 1e-5).abs() <= 1e-18);
        assert!((lr_at(120, &cfg) - 1e-6).abs() <= 1e-18);
        assert_eq!(lr_at(49, &cfg), 1e-4);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![0.5, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1e-3, 0.9, 0.999, 1e-8, 1).unwrap();
        assert_eq!(p, vec![0.5, -2.0]);
    }

    #[test]
    fn first_step_matches_scalar_oracle() {
        let (lr, b1, b2, eps, g) = (1e-3, 0.9, 0.999, 1e-8, 0.3);
        let mut p = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_step(&mut p, &[g], &mut m, &mut v, lr, b1, b2, eps, 1).unwrap();
        // Bias-corrected moments at t = 1 are g and g^2 exactly.
        let m_hat = (1.0 - b1) * g / (1.0 - b1);
        let v_hat = (1.0 - b2) * g * g / (1.0 - b2);
        let expected = 1.0 - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((p[0] - expected).abs() <= 1e-12);
        assert!((p[0] - (1.0 - lr * g / (g.abs() + eps))).abs() <= 1e-12);
    }

    #[test]
    fn step_zero_rejected() {
        let mut p = vec![0.0];
        assert!(adam_step(&mut p, &[1.0], &mut [0.0], &mut [0.0], 1e-3, 0.9, 0.999, 1e-8, 0).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
