//! `vis` command: render the module tree, optionally after attaching a delta.

use deltatune_core::lifecycle::{attach, build};
use deltatune_core::vis::structure_graph;
use deltatune_core::Result;

use crate::spec::{DeltaChoice, ModelSpec};

pub fn run_vis(model_spec: &ModelSpec, delta: &DeltaChoice) -> Result<String> {
    let model = model_spec.build()?;
    if let Some(config) = delta.config()? {
        let mut obj = build(&config, &model)?;
        attach(&mut obj, &model)?;
    }
    let (text, _) = structure_graph(&model);
    Ok(text)
}
