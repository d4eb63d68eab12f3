//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::config::{RunConfig, SeedStream};
use crate::error::{Error, Result};
use crate::forward::{ClusterSource, Forward};
use crate::model::GroupFormer;
use crate::params::{ParamId, ParamStore};
use crate::synth::{Batch, Dataset};

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so that entries whose true gradient is ~0 are judged on absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// A scalar function of the parameters together with a claimed gradient.
pub trait Objective {
    fn value(&self, params: &ParamStore) -> Result<f64>;
    /// Value plus the on/off pattern of every piecewise-linear unit; a
    /// difference whose ends disagree with the base pattern straddles a kink.
    fn value_and_pattern(&self, params: &ParamStore) -> Result<(f64, Vec<bool>)> {
        Ok((self.value(params)?, Vec::new()))
    }
    fn gradient(&self, params: &ParamStore) -> Result<Vec<(ParamId, Vec<f64>)>>;
}

/// Objective whose gradient comes from the tape.
pub struct TapeObjective<F>(pub F);

impl<F> TapeObjective<F>
where
    F: for<'t> Fn(&'t Tape, &'t ParamStore) -> Result<Var<'t>>,
{
    /// Pins the closure signature so its tape lifetime stays generic.
    pub fn new(f: F) -> Self {
        TapeObjective(f)
    }
}

impl<F> Objective for TapeObjective<F>
where
    F: for<'t> Fn(&'t Tape, &'t ParamStore) -> Result<Var<'t>>,
{
    fn value(&self, params: &ParamStore) -> Result<f64> {
        let tape = Tape::new();
        let loss = (self.0)(&tape, params)?;
        let v = loss.value().item();
        Ok(v)
    }

    fn value_and_pattern(&self, params: &ParamStore) -> Result<(f64, Vec<bool>)> {
        let tape = Tape::new();
        let loss = (self.0)(&tape, params)?;
        let v = loss.value().item();
        Ok((v, tape.relu_pattern()))
    }

    fn gradient(&self, params: &ParamStore) -> Result<Vec<(ParamId, Vec<f64>)>> {
        let tape = Tape::new();
        let loss = (self.0)(&tape, params)?;
        let grads = tape.backward(loss)?;
        let mut out: Vec<(ParamId, Vec<f64>)> = params
            .ids()
            .map(|id| (id, vec![0.0; params.get(id).numel()]))
            .collect();
        for (id, g) in grads.params() {
            out[id.index()].1.copy_from_slice(g);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    /// Elements left out because their difference crossed a relu kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// All compared elements within tolerance, and at most 1% skipped.
    pub fn passed(&self) -> bool {
        let elements: usize = self.params.iter().map(|p| p.elements).sum();
        self.params.iter().all(|p| p.max_rel_error <= self.tol) && self.skipped() * 100 <= elements
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error > self.tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compare the objective's gradient to central differences with `step` for
/// every element of every trainable parameter. When a perturbation flips a
/// relu the central difference straddles a kink; the element is then
/// measured with a second-order one-sided difference on the side that keeps
/// the unperturbed pattern, and skipped (and counted) if both sides flip.
pub fn grad_check(
    objective: &impl Objective,
    params: &ParamStore,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (first, pattern) = objective.value_and_pattern(params)?;
    let second = objective.value(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(format!(
            "objective is not deterministic: {first} vs {second}"
        )));
    }
    let mut analytic: std::collections::HashMap<ParamId, Vec<f64>> = objective.gradient(params)?.into_iter().collect();
    let mut probe = params.clone();
    let mut report = Vec::new();
    for id in params.ids().filter(|&id| params.is_trainable(id)) {
        // A parameter the objective never touches must have zero slope.
        let grad = analytic
            .remove(&id)
            .unwrap_or_else(|| vec![0.0; params.get(id).numel()]);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut skipped = 0;
        for (i, &a) in grad.iter().enumerate() {
            let orig = params.get(id).data()[i];
            let mut at = |offset: f64| {
                probe.get_mut(id).data_mut()[i] = orig + offset;
                let out = objective.value_and_pattern(&probe);
                probe.get_mut(id).data_mut()[i] = orig;
                out.map(|(v, p)| (v, p == pattern))
            };
            let (up, up_smooth) = at(step)?;
            let (down, down_smooth) = at(-step)?;
            let numeric = if up_smooth && down_smooth {
                Some((up - down) / (2.0 * step))
            } else {
                let one_sided = |near: f64, h: f64, at: &mut dyn FnMut(f64) -> Result<(f64, bool)>| -> Result<Option<f64>> {
                    let (far, smooth) = at(2.0 * h)?;
                    Ok(smooth.then(|| (4.0 * near - 3.0 * first - far) / (2.0 * h)))
                };
                match (up_smooth, down_smooth) {
                    (true, _) => one_sided(up, step, &mut at)?,
                    (_, true) => one_sided(down, -step, &mut at)?,
                    _ => None,
                }
            };
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        report.push(ParamCheck {
            name: params.name(id).to_string(),
            elements: grad.len(),
            skipped,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport { params: report, tol })
}

/// Check the full model's loss on the first `clips` generated clips, with
/// dropout off and the cluster assignments of one recording pass replayed
/// in every perturbed evaluation.
pub fn check_model(config: &RunConfig, clips: usize, step: f64, tol: f64) -> Result<GradCheckReport> {
    let mut cfg = config.clone();
    cfg.model.dropout = 0.0;
    cfg.validate()?;
    let data = Dataset::generate(&cfg.generator(), clips.max(2))?;
    let refs: Vec<_> = data.samples.iter().take(clips.max(1)).collect();
    let batch = Batch::stack(&refs)?;
    let model = GroupFormer::new(
        &cfg.model,
        cfg.stream_seed(SeedStream::Init),
        cfg.stream_seed(SeedStream::Kmeans),
    )?;
    let (_, trace) = model.predict_traced(&batch)?;
    let lambda = cfg.train.lambda;
    // Every clustered site is replayed, so the source is never consulted.
    let source = ClusterSource::Lloyd {
        iters: cfg.model.kmeans_iters,
        seed: model.kmeans_seed,
    };
    let objective = TapeObjective::new(|tape, params| {
        let f = Forward::new(tape, params, 0.0, 0, source).with_replay(trace.clone());
        Ok(model.arch.loss(&f, &batch, lambda)?.0)
    });
    grad_check(&objective, &model.params, step, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::cell::Cell;

    fn scalar_store(x: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::new(&[1], vec![x]).unwrap());
        (store, id)
    }

    struct Square {
        id: ParamId,
        skew: f64,
    }

    impl Objective for Square {
        fn value(&self, p: &ParamStore) -> Result<f64> {
            let x = p.get(self.id).data()[0];
            Ok(x * x)
        }
        fn gradient(&self, p: &ParamStore) -> Result<Vec<(ParamId, Vec<f64>)>> {
            let x = p.get(self.id).data()[0];
            Ok(vec![(self.id, vec![2.0 * x * self.skew])])
        }
    }

    #[test]
    fn square_passes() {
        let (store, id) = scalar_store(3.0);
        let r = grad_check(&Square { id, skew: 1.0 }, &store, 1e-5, 1e-5).unwrap();
        assert!(r.passed());
        assert!(r.params[0].max_abs_error < 1e-6);
    }

    #[test]
    fn injected_gradient_fault_is_caught() {
        let (store, id) = scalar_store(3.0);
        let r = grad_check(&Square { id, skew: 1.1 }, &store, 1e-5, 1e-5).unwrap();
        assert!(!r.passed());
        // |6.6 - 6| / 6.6
        assert!((r.max_rel_error() - 0.6 / 6.6).abs() < 1e-6);
    }

    #[test]
    fn differences_near_a_relu_kink_go_one_sided() {
        let mut store = ParamStore::new();
        // 1e-7 and 0 both sit inside the step of the kink, on opposite sides.
        let id = store.insert("x", Tensor::new(&[4], vec![1e-7, 0.0, 0.5, -0.5]).unwrap());
        let obj = TapeObjective::new(move |tape, p| {
            let x = tape.param(p, id);
            Ok(x.relu().mul(x)?.sum_all())
        });
        let r = grad_check(&obj, &store, 1e-5, 1e-5).unwrap();
        assert_eq!(r.params[0].skipped, 0);
        assert!(r.passed(), "{r:?}");
        assert!(r.params[0].max_abs_error < 1e-9);
    }

    #[test]
    fn a_kink_on_both_sides_is_skipped() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::new(&[1], vec![1e-7]).unwrap());
        // relu(x) flips below x, relu(x - 2e-7) above it.
        let obj = TapeObjective::new(move |tape, p| {
            let x = tape.param(p, id);
            let shifted = x.add_const(&Tensor::new(&[1], vec![-2e-7])?)?;
            Ok(x.relu().add(shifted.relu())?.sum_all())
        });
        let r = grad_check(&obj, &store, 1e-5, 1e-5).unwrap();
        assert_eq!(r.params[0].skipped, 1);
        assert!(!r.passed());
    }

    #[test]
    fn tape_objective_on_square() {
        let (store, id) = scalar_store(3.0);
        let obj = TapeObjective::new(move |tape, p| {
            let x = tape.param(p, id);
            Ok(x.mul(x)?.sum_all())
        });
        assert!(grad_check(&obj, &store, 1e-5, 1e-5).unwrap().passed());
    }

    struct Flaky(Cell<u32>);

    impl Objective for Flaky {
        fn value(&self, _: &ParamStore) -> Result<f64> {
            self.0.set(self.0.get() + 1);
            Ok(self.0.get() as f64)
        }
        fn gradient(&self, _: &ParamStore) -> Result<Vec<(ParamId, Vec<f64>)>> {
            Ok(Vec::new())
        }
    }

    #[test]
    fn nondeterminism_is_a_contract_error() {
        let (store, _) = scalar_store(1.0);
        let err = grad_check(&Flaky(Cell::new(0)), &store, 1e-5, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
