//! Multi-task serving with one backbone: per input, attach the task's delta
//! checkpoint, classify, detach. The command verifies that the hot-swapped
//! predictions equal those of isolated single-attach models and that the
//! backbone ends bit-identical to its starting state.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use deltatune_core::lifecycle::{detach, from_finetuned};
use deltatune_core::modtree::snapshot;
use deltatune_core::{Error, Result};

use crate::spec::ModelSpec;
use crate::train::predict;

#[derive(Debug, Clone, Deserialize)]
pub struct MultitaskInput {
    pub tokens: Vec<usize>,
    /// Index into the delta directory list.
    pub delta: usize,
}

#[derive(Debug, Clone)]
pub struct MultitaskOptions {
    pub model: ModelSpec,
    pub delta_dirs: Vec<PathBuf>,
    pub inputs: Vec<MultitaskInput>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub delta_dir: String,
    pub tokens: Vec<usize>,
    pub prediction: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MultitaskReport {
    pub predictions: Vec<Prediction>,
}

impl MultitaskReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("multitask serialization")
    }
}

pub fn load_inputs(path: &PathBuf) -> Result<Vec<MultitaskInput>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("cannot parse inputs file {path:?}: {e}")))
}

pub fn run_multitask(opts: &MultitaskOptions) -> Result<MultitaskReport> {
    if opts.delta_dirs.len() < 2 {
        return Err(Error::Config("multitask needs at least two delta dirs".into()));
    }
    for input in &opts.inputs {
        if input.delta >= opts.delta_dirs.len() {
            return Err(Error::Config(format!(
                "input references delta {} but only {} dirs given",
                input.delta,
                opts.delta_dirs.len()
            )));
        }
    }

    // isolated reference: one fresh model per task, attached once
    let mut isolated: Vec<Option<usize>> = vec![None; opts.inputs.len()];
    for (dir_idx, dir) in opts.delta_dirs.iter().enumerate() {
        let fresh = opts.model.build()?;
        let _obj = from_finetuned(dir, &fresh)?;
        for (i, input) in opts.inputs.iter().enumerate() {
            if input.delta == dir_idx {
                isolated[i] = Some(predict(&fresh, &input.tokens)?);
            }
        }
    }

    // hot-swap loop on one shared backbone
    let model = opts.model.build()?;
    let pristine = snapshot(&model, false);
    let mut predictions = Vec::with_capacity(opts.inputs.len());
    for (i, input) in opts.inputs.iter().enumerate() {
        let dir = &opts.delta_dirs[input.delta];
        let mut obj = from_finetuned(dir, &model)?;
        let got = predict(&model, &input.tokens)?;
        detach(&mut obj, &model)?;
        let expected = isolated[i].expect("isolated prediction computed above");
        if got != expected {
            return Err(Error::Contract(format!(
                "hot-swapped prediction {got} differs from isolated prediction {expected} \
                 for delta {dir:?}"
            )));
        }
        predictions.push(Prediction {
            delta_dir: dir.display().to_string(),
            tokens: input.tokens.clone(),
            prediction: got,
        });
    }

    let after = snapshot(&model, false);
    if after != pristine {
        return Err(Error::Contract(
            "backbone parameters changed across the multitask loop".into(),
        ));
    }
    Ok(MultitaskReport { predictions })
}
