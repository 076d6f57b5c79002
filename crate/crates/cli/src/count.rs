//! Parameter counting: backbone size, delta size, ratio, per-binding
//! breakdown.

use serde::Serialize;

use deltatune_core::lifecycle::build;
use deltatune_core::modtree::param_count;
use deltatune_core::Result;

use crate::spec::{DeltaChoice, ModelSpec};

#[derive(Debug, Clone, Serialize)]
pub struct BindingCount {
    pub path: String,
    pub kind: String,
    pub params: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CountReport {
    pub total_params: usize,
    pub delta_params: usize,
    pub ratio: f64,
    pub bindings: Vec<BindingCount>,
}

impl CountReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("count serialization")
    }
}

pub fn run_count(model_spec: &ModelSpec, delta: &DeltaChoice) -> Result<CountReport> {
    let model = model_spec.build()?;
    let total_params = param_count(&model);
    let bindings = match delta.config()? {
        None => Vec::new(),
        Some(config) => {
            let obj = build(&config, &model)?;
            obj.bindings()
                .iter()
                .map(|b| BindingCount {
                    path: b.path.clone(),
                    kind: b.module.kind().as_str().to_string(),
                    params: b.module.param_count(),
                })
                .collect()
        }
    };
    let delta_params = bindings.iter().map(|b| b.params).sum();
    Ok(CountReport {
        total_params,
        delta_params,
        ratio: delta_params as f64 / total_params as f64,
        bindings,
    })
}
