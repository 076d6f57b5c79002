//! Training harness: plain stochastic gradient descent over a synthetic
//! task, with the backbone frozen and delta (plus head) parameters updated.
//! After training the harness asserts that no frozen parameter changed a
//! single bit.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::Serialize;

use deltatune_core::backbones::forward_unpadded;
use deltatune_core::lifecycle::{attach, build, freeze, save_finetuned, DeltaObject};
use deltatune_core::modtree::{named_parameters, param_count, snapshot, NodeRef};
use deltatune_core::tensor::{cross_entropy, Tensor};
use deltatune_core::{Error, Result};

use crate::spec::{DeltaChoice, ModelSpec};
use crate::tasks::{Sample, TaskSpec};

pub const DEFAULT_BATCH: usize = 32;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub model: ModelSpec,
    pub delta: DeltaChoice,
    pub task: TaskSpec,
    pub steps: usize,
    pub lr: f64,
    pub out: Option<PathBuf>,
    pub train_pooler: bool,
    pub batch_size: usize,
}

/// Machine-checkable training report. Wall time is reported separately so
/// identical flags and seeds serialize byte-identically.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub task: String,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub losses: Vec<f64>,
    pub train_acc: f64,
    pub test_acc: f64,
    pub total_params: usize,
    pub delta_params: usize,
    pub ratio: f64,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn summary(&self) -> String {
        format!(
            "task {} | steps {} | lr {} | seed {} | final loss {:.4} | train acc {:.3} | test acc {:.3} | params {} | delta params {} | ratio {:.4} | wall {:?}",
            self.task,
            self.steps,
            self.lr,
            self.seed,
            self.losses.last().copied().unwrap_or(f64::NAN),
            self.train_acc,
            self.test_acc,
            self.total_params,
            self.delta_params,
            self.ratio,
            self.wall_time,
        )
    }
}

pub fn predict(model: &NodeRef, tokens: &[usize]) -> Result<usize> {
    let logits = forward_unpadded(model, &[tokens.to_vec()])?;
    let data = logits.data();
    let mut best = 0;
    for (i, v) in data.iter().enumerate() {
        if *v > data[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn accuracy(model: &NodeRef, samples: &[Sample]) -> Result<f64> {
    let mut correct = 0;
    for sample in samples {
        if predict(model, &sample.tokens)? == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

fn sgd_step(trainable: &[(String, Tensor)], lr: f64) {
    for (_, tensor) in trainable {
        if let Some(grad) = tensor.grad() {
            let mut data = tensor.data_mut();
            for (v, g) in data.iter_mut().zip(&grad) {
                *v -= lr * g;
            }
        }
        tensor.zero_grad();
    }
}

/// Builds the model and delta per the options, freezes, trains, evaluates,
/// verifies frozen bits, and writes the checkpoint and report when `out`
/// is set.
pub fn run_train(opts: &TrainOptions) -> Result<TrainReport> {
    let started = Instant::now();
    let model = opts.model.build()?;
    let total_params = param_count(&model);

    let mut delta_obj: Option<DeltaObject> = match opts.delta.config()? {
        Some(config) => {
            let mut obj = build(&config, &model)?;
            attach(&mut obj, &model)?;
            Some(obj)
        }
        None => None,
    };
    let delta_params = delta_obj.as_ref().map_or(0, DeltaObject::param_count);

    let mut exclude: Vec<String> = match opts.delta {
        DeltaChoice::Full => Vec::new(),
        DeltaChoice::None => vec!["classifier".into()],
        _ => vec!["deltas".into(), "classifier".into()],
    };
    if opts.train_pooler {
        exclude.push("pooler".into());
    }
    if !matches!(opts.delta, DeltaChoice::Full) {
        freeze(&model, &exclude, true)?;
    }

    let params = named_parameters(&model);
    let trainable: Vec<(String, Tensor)> = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .cloned()
        .collect();
    let frozen_before = snapshot(&model, false);
    let frozen_keys: Vec<String> = params
        .iter()
        .filter(|(_, t)| !t.requires_grad())
        .map(|(k, _)| k.clone())
        .collect();

    let data = opts.task.generate();
    let n = data.train.len();
    if n == 0 {
        return Err(Error::Config("empty training split".into()));
    }
    let batch = opts.batch_size.min(n).max(1);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut ids = Vec::with_capacity(batch);
        let mut labels = Vec::with_capacity(batch);
        for i in 0..batch {
            let sample = &data.train[(step * batch + i) % n];
            ids.push(sample.tokens.clone());
            labels.push(sample.label);
        }
        let logits = forward_unpadded(&model, &ids)?;
        let loss = cross_entropy(&logits, &labels)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Contract(format!(
                "training diverged at step {step}: loss {value}"
            )));
        }
        losses.push(value);
        loss.backward()?;
        sgd_step(&trainable, opts.lr);
    }

    let train_acc = accuracy(&model, &data.train)?;
    let test_acc = accuracy(&model, &data.test)?;

    // frozen parameters must be bit-identical to their pre-training state
    let after = snapshot(&model, false);
    for key in &frozen_keys {
        let before = &frozen_before.get(key).unwrap().data;
        let now = &after.get(key).unwrap().data;
        let same = before.len() == now.len()
            && before
                .iter()
                .zip(now)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::Contract(format!(
                "frozen parameter {key:?} changed during training"
            )));
        }
    }

    let report = TrainReport {
        task: opts.task.task.as_str().to_string(),
        steps: opts.steps,
        lr: opts.lr,
        seed: opts.task.seed,
        losses,
        train_acc,
        test_acc,
        total_params,
        delta_params,
        ratio: delta_params as f64 / total_params as f64,
        wall_time: started.elapsed(),
    };

    if let Some(out) = &opts.out {
        std::fs::create_dir_all(out).map_err(|source| Error::Io {
            path: out.display().to_string(),
            source,
        })?;
        if let Some(obj) = &mut delta_obj {
            save_finetuned(obj, &model, out)?;
        }
        let report_path = out.join("report.json");
        std::fs::write(&report_path, report.to_json()).map_err(|source| Error::Io {
            path: report_path.display().to_string(),
            source,
        })?;
    }
    Ok(report)
}
