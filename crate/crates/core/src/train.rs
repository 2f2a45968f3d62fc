//! Training loop: per-sample exact gradients reduced in a fixed order, then
//! one AdamW step on the adapter and head.

use serde::{Deserialize, Serialize};

use crate::adapter::{sample_objective, AdapterStack, ModelGrads, PreparedInput};
use crate::backbone::FrozenBackbone;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::optim::AdamW;
use crate::rng::{child_seed, indexed_seed, rng_from, NoiseSource};
use crate::synthbench::{evaluate, prepare, Dataset, SegMetrics, SynthSample, IGNORE_LABEL};
use crate::tensor::Tensor;

/// Backbone features and token labels for a split, computed once.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub inputs: Vec<PreparedInput>,
    pub labels: Vec<Vec<usize>>,
}

pub fn prepare_split(stack: &AdapterStack, backbone: &FrozenBackbone, samples: &[SynthSample]) -> Result<PreparedSplit> {
    let inputs = crate::par::map_indexed(samples.len(), |i| prepare(stack, backbone, &samples[i]))?;
    let labels = samples
        .iter()
        .map(|s| s.token_labels(stack.config.patch, stack.config.classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedSplit { inputs, labels })
}

/// One optimizer step on a batch. The objective is the batch mean of
/// `task + λ · load`; `noise`, when given, feeds sample `i` of the batch
/// from its own indexed stream.
pub fn train_step(
    stack: &mut AdapterStack,
    backbone: &FrozenBackbone,
    batch: &[(&PreparedInput, &[usize])],
    opt: &mut AdamW,
    lambda: f64,
    noise: Option<&NoiseSource>,
    step: usize,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty training batch".into()));
    }
    let frozen = &*stack;
    let results = crate::par::map_indexed(batch.len(), |i| {
        let (input, labels) = batch[i];
        let sample_noise = noise.map(|n| n.indexed(i as u64));
        sample_objective(frozen, backbone, input, labels, IGNORE_LABEL, lambda, sample_noise.as_ref())
    })?;
    let n = batch.len() as f64;
    let n_experts = stack.config.n_experts;
    let (mut task, mut load) = (0.0, 0.0);
    let mut imp_v = vec![0.0; n_experts];
    let mut imp_d = vec![0.0; n_experts];
    let mut sum: Option<Vec<Tensor>> = None;
    for (obj, grads) in &results {
        task += obj.task;
        load += obj.load;
        for (a, v) in imp_v.iter_mut().zip(&obj.importance_visual) {
            *a += v;
        }
        for (a, v) in imp_d.iter_mut().zip(&obj.importance_depth) {
            *a += v;
        }
        let flat = grads.flatten();
        match &mut sum {
            None => sum = Some(flat),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&flat) {
                    a.axpy(1.0, g)?;
                }
            }
        }
    }
    let report = LossReport {
        task_loss: task / n,
        load_loss: load / n,
        total: (task + lambda * load) / n,
        lambda,
        importance_visual: imp_v.iter().map(|v| v / n).collect(),
        importance_depth: imp_d.iter().map(|v| v / n).collect(),
    };
    if !report.total.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("task loss {} load loss {}", report.task_loss, report.load_loss),
        });
    }
    let grads: Vec<Tensor> = sum.unwrap_or_default().iter().map(|g| g.scale(1.0 / n)).collect();
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::Divergence { step, detail: "non-finite gradient".into() });
    }
    stack.zero_grad();
    stack.accumulate(&grads)?;
    opt.step(&mut stack.params_mut())?;
    Ok(report)
}

/// Gradient of the batch objective without an update, for inspection.
pub fn batch_gradient(
    stack: &AdapterStack,
    backbone: &FrozenBackbone,
    batch: &[(&PreparedInput, &[usize])],
    lambda: f64,
) -> Result<Vec<Tensor>> {
    let mut acc: Option<Vec<Tensor>> = None;
    for (input, labels) in batch {
        let (_, grads): (_, ModelGrads) = sample_objective(stack, backbone, input, labels, IGNORE_LABEL, lambda, None)?;
        let flat = grads.flatten();
        match &mut acc {
            None => acc = Some(flat),
            Some(a) => {
                for (x, g) in a.iter_mut().zip(&flat) {
                    x.axpy(1.0, g)?;
                }
            }
        }
    }
    let n = batch.len() as f64;
    Ok(acc.unwrap_or_default().iter().map(|g| g.scale(1.0 / n)).collect())
}

/// Batch-mean objective value in evaluation mode.
pub fn batch_objective(
    stack: &AdapterStack,
    backbone: &FrozenBackbone,
    batch: &[(&PreparedInput, &[usize])],
    lambda: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (input, labels) in batch {
        let (obj, _) = sample_objective(stack, backbone, input, labels, IGNORE_LABEL, lambda, None)?;
        total += obj.task + lambda * obj.load;
    }
    Ok(total / batch.len() as f64)
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step {
        step: usize,
        epoch: usize,
        #[serde(flatten)]
        report: LossReport,
    },
    Eval {
        split: String,
        miou: f64,
        macc: f64,
        per_class_iou: Vec<Option<f64>>,
    },
}

impl MetricRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

pub struct TrainOutcome {
    pub stack: AdapterStack,
    pub backbone: FrozenBackbone,
    pub backbone_seed: u64,
    pub history: Vec<LossReport>,
    pub source: SegMetrics,
    pub target: SegMetrics,
}

/// Seed of the frozen backbone. It plays the part of a pretrained checkpoint,
/// so every run and variant shares it regardless of the run seed.
pub const BACKBONE_SEED: u64 = 0xbac4_b0e5;

pub fn backbone_for(cfg: &RunConfig) -> (FrozenBackbone, u64) {
    let seed = BACKBONE_SEED;
    let m = &cfg.model;
    (FrozenBackbone::generate(seed, m.channels, m.patch, m.d, m.layers), seed)
}

/// Trains the configured variant on the source split, then evaluates both
/// splits. Every record is handed to `sink` as it is produced.
pub fn train(cfg: &RunConfig, data: &Dataset, sink: &mut dyn FnMut(&MetricRecord) -> Result<()>) -> Result<TrainOutcome> {
    if data.source.is_empty() {
        return Err(Error::Degenerate("source split is empty".into()));
    }
    let (backbone, backbone_seed) = backbone_for(cfg);
    let mut stack = AdapterStack::init(&cfg.model, cfg.seed)?;
    let split = prepare_split(&stack, &backbone, &data.source)?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let noise_root = NoiseSource::new(child_seed(cfg.seed, "noise"));
    let shuffle_root = child_seed(cfg.seed, "shuffle");
    let mut history = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..split.inputs.len()).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.sort_unstable();
        order.shuffle(&mut rng_from(indexed_seed(shuffle_root, epoch as u64)));
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<(&PreparedInput, &[usize])> =
                chunk.iter().map(|&i| (&split.inputs[i], split.labels[i].as_slice())).collect();
            let noise = noise_root.indexed(step as u64);
            let report = train_step(&mut stack, &backbone, &batch, &mut opt, cfg.lambda, Some(&noise), step)?;
            sink(&MetricRecord::Step { step, epoch, report: report.clone() })?;
            history.push(report);
            step += 1;
        }
    }
    let source = evaluate(&stack, &backbone, &data.source)?;
    let target = if data.target.is_empty() {
        source.clone()
    } else {
        evaluate(&stack, &backbone, &data.target)?
    };
    for (name, m) in [("source", &source), ("target", &target)] {
        sink(&MetricRecord::Eval {
            split: name.into(),
            miou: m.miou,
            macc: m.macc,
            per_class_iou: m.per_class_iou.clone(),
        })?;
    }
    Ok(TrainOutcome {
        stack,
        backbone,
        backbone_seed,
        history,
        source,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Variant};
    use crate::synthbench::generate_scene;
    use crate::tensor::Norm;

    fn tiny() -> (AdapterStack, FrozenBackbone, PreparedSplit) {
        let cfg = ModelConfig {
            d: 8,
            layers: 1,
            n_experts: 3,
            k: 2,
            m: 4,
            r: 4,
            norm: Norm::L1,
            patch: 4,
            channels: 3,
            classes: 3,
            variant: Variant::Full,
        };
        let stack = AdapterStack::init(&cfg, 3).unwrap();
        let bb = FrozenBackbone::generate(1, 3, 4, 8, 1);
        let samples: Vec<_> = (0..4).map(|i| generate_scene(i, 16, 16, 3, 3).unwrap()).collect();
        let split = prepare_split(&stack, &bb, &samples).unwrap();
        (stack, bb, split)
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let (mut stack, bb, split) = tiny();
        let before = stack.clone();
        let batch: Vec<_> = split.inputs.iter().zip(&split.labels).map(|(i, l)| (i, l.as_slice())).collect();
        let mut opt = AdamW::new(0.0, 0.01);
        train_step(&mut stack, &bb, &batch, &mut opt, 0.01, Some(&NoiseSource::new(1)), 0).unwrap();
        for ((_, a), (_, b)) in stack.params().iter().zip(before.params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn identical_seeds_give_identical_reports() {
        let run = || {
            let (mut stack, bb, split) = tiny();
            let batch: Vec<_> = split.inputs.iter().zip(&split.labels).map(|(i, l)| (i, l.as_slice())).collect();
            let mut opt = AdamW::new(1e-2, 0.01);
            (0..3)
                .map(|s| train_step(&mut stack, &bb, &batch, &mut opt, 0.01, Some(&NoiseSource::new(s)), s as usize).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn metric_records_are_json_lines() {
        let rec = MetricRecord::Step { step: 2, epoch: 0, report: crate::losses::total_loss(1.0, 0.5, 0.1) };
        let line = rec.to_json();
        assert!(line.starts_with("{\"kind\":\"step\""));
        assert!(!line.contains('\n'));
        let back: MetricRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
    }
}
