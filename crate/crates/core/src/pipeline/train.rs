use super::model::{BitAlignModel, ForwardOptions, TrainItem};
use crate::data::{BatchIter, Sample};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::params::{sub_seed, ParamId};
use crate::{Tape, Tensor};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<(ParamId, Vec<f64>)>,
}

impl Momentum {
    pub fn new(model: &BitAlignModel) -> Self {
        let c = &model.config;
        Momentum {
            lr: c.lr,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            velocity: model
                .store
                .trainable_ids()
                .map(|id| (id, vec![0.0; model.store.spec(id).numel()]))
                .collect(),
        }
    }

    /// `v ← μv + g + λθ`, `θ ← θ − η·v` for every trainable parameter.
    pub fn apply(&mut self, model: &mut BitAlignModel, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Batch(format!("{} gradients for {} parameters", grads.len(), self.velocity.len())));
        }
        for ((id, vel), g) in self.velocity.iter_mut().zip(grads) {
            let theta = model.store.value(*id);
            let mut next = theta.data().to_vec();
            for ((t, v), &gi) in next.iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                *v = self.momentum * *v + gi + self.weight_decay * *t;
                *t -= self.lr * *v;
            }
            let shape = theta.shape().to_vec();
            model.store.set(*id, Tensor::new(shape, next)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub breakdown: LossBreakdown,
    pub gate_means: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<StepRecord>,
}

impl LossTrace {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.breakdown.total).collect()
    }

    /// Trailing moving average of the total loss over `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let t = self.totals();
        let w = window.max(1);
        (0..t.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                t[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    /// Header `step,total,cls,tcls,cos,conc`, one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = format!("step,{}\n", LossBreakdown::COLUMNS.join(","));
        for r in &self.records {
            let vals: Vec<String> = r.breakdown.values().iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&format!("{},{}\n", r.step, vals.join(",")));
        }
        out
    }
}

/// One optimisation step on `batch`.
pub fn train_step(model: &mut BitAlignModel, opt: &mut Momentum, batch: &[TrainItem], step: usize) -> Result<StepRecord> {
    let (record, grads) = {
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let opts = ForwardOptions {
            prototypes: None,
            seed: sub_seed(model.config.seed, &format!("step.{step}")),
        };
        let out = model.forward_train(&p, batch, &opts).map_err(|e| diverged(e, step, None))?;
        if let Some(term) = out.breakdown.first_non_finite() {
            return Err(Error::Diverged {
                step,
                term: term.into(),
                breakdown: out.breakdown.to_string(),
            });
        }
        let g = tape.backward(out.total).map_err(|e| diverged(e, step, Some(&out.breakdown)))?;
        let grads: Vec<Tensor> = model.store.trainable_ids().map(|id| g.wrt(p[id])).collect();
        if let Some(k) = grads.iter().position(|t| !t.is_finite()) {
            let name = model.store.trainable_ids().nth(k).map(|id| model.store.spec(id).name.clone());
            return Err(Error::Diverged {
                step,
                term: format!("gradient of {}", name.unwrap_or_default()),
                breakdown: out.breakdown.to_string(),
            });
        }
        let record = StepRecord {
            step,
            breakdown: out.breakdown,
            gate_means: out.diagnostics.gate_means,
        };
        (record, grads)
    };
    opt.apply(model, &grads)?;
    Ok(record)
}

fn diverged(e: Error, step: usize, breakdown: Option<&LossBreakdown>) -> Error {
    match e {
        Error::NonFinite(term) => Error::Diverged {
            step,
            term,
            breakdown: breakdown.map(|b| b.to_string()).unwrap_or_else(|| "forward pass".into()),
        },
        other => other,
    }
}

/// Trains for `steps` batches drawn by a seeded per-epoch shuffle.
pub fn fit(model: &mut BitAlignModel, samples: &[Sample], steps: usize) -> Result<LossTrace> {
    fit_with(model, samples, steps, |_| {})
}

/// [`fit`] with a callback after every step.
pub fn fit_with(
    model: &mut BitAlignModel,
    samples: &[Sample],
    steps: usize,
    mut observe: impl FnMut(&StepRecord),
) -> Result<LossTrace> {
    let mut trace = LossTrace::default();
    if steps == 0 {
        return Ok(trace);
    }
    let mut opt = Momentum::new(model);
    let mut order = BatchIter::new(samples.len(), model.config.batch, sub_seed(model.config.seed, "data"))?;
    for step in 0..steps {
        let idx = order.next_batch();
        let batch: Vec<TrainItem> = idx.iter().map(|&i| samples[i].train_item()).collect();
        let record = train_step(model, &mut opt, &batch, step)?;
        observe(&record);
        trace.records.push(record);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bd(total: f64) -> StepRecord {
        StepRecord {
            step: 0,
            breakdown: LossBreakdown {
                total,
                cls: total,
                tcls: 0.0,
                cos: 0.0,
                conc: 0.0,
            },
            gate_means: vec![],
        }
    }

    #[test]
    fn smoothing_window() {
        let trace = LossTrace {
            records: [4.0, 2.0, 0.0, 6.0].into_iter().map(bd).collect(),
        };
        assert_eq!(trace.smoothed(2), vec![4.0, 3.0, 1.0, 3.0]);
        assert_eq!(trace.smoothed(1), trace.totals());
    }

    #[test]
    fn csv_schema() {
        let trace = LossTrace {
            records: vec![bd(1.5), bd(0.5)],
        };
        let csv = trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,total,cls,tcls,cos,conc");
        assert_eq!(lines.len(), 3);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 6));
    }
}
