//! Delta object lifecycle: construction from a config, attach/detach,
//! freezing, delta-only persistence and default positions driven by a
//! common name convention.
//!
//! Construction resolves patterns to target paths, picks the route and merge
//! for the delta type, sizes modules (from target parameter shapes, or from
//! a pseudo-input pass for adapters and prefixes) and creates one delta
//! module per matched path. Nothing is installed until `attach`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::addressing::{resolve, AddressPattern};
use crate::deltas::{
    capture_shapes, create_delta, dims_from_params, DeltaKind, DeltaNodeBehavior, DeltaRef,
    Hyperparams,
};
use crate::error::{Error, Result};
use crate::modtree::{
    self, add_child, get_by_path, load_snapshot, named_parameters, set_trainable, ModuleNode,
    Namespace, NodeRef, NodeRole, ParameterSnapshot, ANNOTATION_CONVENTION, ANNOTATION_SEED,
    DELTAS_CHILD,
};
use crate::rng::hash_str;
use crate::routing::{self, MergeOp, Route};

pub const CONFIG_FILE: &str = "config.json";
pub const DELTA_FILE: &str = "delta.bin";
pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// The seven common sub-module names shared across naming conventions.
pub const COMMON_NAMES: [&str; 7] = [
    "attn.q", "attn.k", "attn.v", "attn.proj", "ff.w1", "ff.w2", "layer_norm",
];

/// Maps a common sub-module name to a convention-specific address pattern.
pub fn common_to_pattern(convention: &str, common: &str) -> Result<String> {
    let mapped = match convention {
        "A" => match common {
            "attn.q" => "query",
            "attn.k" => "key",
            "attn.v" => "value",
            "attn.proj" => "attention.output.dense",
            "ff.w1" => "intermediate.dense",
            "ff.w2" => r"re:encoder\.layer\.\d+\.output\.dense",
            "layer_norm" => "LayerNorm",
            _ => return Err(Error::Config(format!("unknown common name {common:?}"))),
        },
        "B" => match common {
            "attn.q" => "q",
            "attn.k" => "k",
            "attn.v" => "v",
            "attn.proj" => "o",
            "ff.w1" => "wi",
            "ff.w2" => "wo",
            "layer_norm" => "re:.*layer_norm",
            _ => return Err(Error::Config(format!("unknown common name {common:?}"))),
        },
        other => {
            return Err(Error::Config(format!(
                "no name mapping registered for convention {other:?}"
            )))
        }
    };
    Ok(mapped.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaConfig {
    pub format_version: u32,
    pub delta_type: DeltaKind,
    pub modified_modules: Option<Vec<String>>,
    #[serde(default)]
    pub common_naming: bool,
    #[serde(default)]
    pub hyperparams: BTreeMap<String, serde_json::Value>,
}

impl DeltaConfig {
    pub fn new(delta_type: DeltaKind) -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            delta_type,
            modified_modules: None,
            common_naming: false,
            hyperparams: BTreeMap::new(),
        }
    }

    pub fn hyperparams(&self) -> Result<Hyperparams> {
        Hyperparams::from_map(&self.hyperparams)
    }

    /// Canonical UTF-8 JSON with recursively sorted keys.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialization");
        let mut out = String::new();
        write_canonical(&value, &mut out);
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: DeltaConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("cannot parse delta config: {e}")))?;
        if config.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported config format version {}",
                config.format_version
            )));
        }
        Ok(config)
    }
}

fn write_canonical(value: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut pairs: Vec<(&String, &Value)> = map.iter().collect();
            pairs.sort_by_key(|(k, _)| k.as_str());
            out.push('{');
            for (i, (k, v)) in pairs.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).unwrap());
                out.push(':');
                write_canonical(v, out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&serde_json::to_string(other).unwrap()),
    }
}

/// Default positions per delta type, expressed in the common convention.
pub fn default_positions(kind: DeltaKind) -> Vec<String> {
    let names: &[&str] = match kind {
        DeltaKind::Lora => &["attn.q", "attn.v"],
        DeltaKind::Adapter => &["attn.proj", "ff.w2"],
        DeltaKind::Bitfit => &[
            "attn.q", "attn.k", "attn.v", "attn.proj", "ff.w1", "ff.w2", "layer_norm",
        ],
        DeltaKind::Prefix => &["attn.k", "attn.v"],
    };
    names.iter().map(|s| s.to_string()).collect()
}

/// Default config for a delta type: common-named default positions and the
/// standard hyperparameters.
pub fn auto_default(kind: DeltaKind) -> DeltaConfig {
    DeltaConfig {
        format_version: CONFIG_FORMAT_VERSION,
        delta_type: kind,
        modified_modules: Some(default_positions(kind)),
        common_naming: true,
        hyperparams: Hyperparams::default().to_map(kind),
    }
}

/// Route and merge operator a delta type uses.
pub fn route_for(kind: DeltaKind) -> (Route, MergeOp) {
    match kind {
        DeltaKind::Lora => (Route::Parallel, MergeOp::Add),
        DeltaKind::Adapter => (Route::OutputModify, MergeOp::Add),
        DeltaKind::Bitfit => (Route::OutputModify, MergeOp::Add),
        DeltaKind::Prefix => (Route::OutputModify, MergeOp::Replace),
    }
}

#[derive(Debug)]
pub struct Binding {
    pub path: String,
    /// `<common name>.<occurrence>` when the object was built through the
    /// common convention; used as the stable checkpoint key prefix.
    pub common_key: Option<String>,
    pub module: DeltaRef,
    pub route: Route,
    pub merge: MergeOp,
    registered_name: RefCell<Option<String>>,
}

/// A set of delta modules bound to target paths, attachable and detachable
/// as a whole. A detached object keeps its parameters; reattaching restores
/// behavior exactly.
#[derive(Debug)]
pub struct DeltaObject {
    config: DeltaConfig,
    bindings: Vec<Binding>,
    attached: bool,
    /// Pre-load values of non-delta parameters a checkpoint overwrote (e.g.
    /// a task head); written back on detach so the backbone ends pristine.
    restore_on_detach: RefCell<Vec<(String, Vec<f64>)>>,
}

impl DeltaObject {
    pub fn config(&self) -> &DeltaConfig {
        &self.config
    }

    pub fn kind(&self) -> DeltaKind {
        self.config.delta_type
    }

    pub fn bindings(&self) -> &[Binding] {
        &self.bindings
    }

    pub fn is_attached(&self) -> bool {
        self.attached
    }

    pub fn param_count(&self) -> usize {
        self.bindings.iter().map(|b| b.module.param_count()).sum()
    }
}

fn model_build_seed(model: &NodeRef) -> u64 {
    model
        .borrow()
        .annotation(ANNOTATION_SEED)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

/// Builds a detached delta object: resolves positions (mapping common names
/// through the model's convention when applicable), validates placement,
/// sizes and initializes one delta module per matched path.
pub fn build(config: &DeltaConfig, model: &NodeRef) -> Result<DeltaObject> {
    let kind = config.delta_type;
    let hp = config.hyperparams()?;
    let raw_positions = config
        .modified_modules
        .clone()
        .unwrap_or_else(|| default_positions(kind));
    let use_common = config.common_naming || config.modified_modules.is_none();

    let convention = model.borrow().annotation(ANNOTATION_CONVENTION);
    let mut specs: Vec<(String, Option<String>)> = Vec::with_capacity(raw_positions.len());
    for raw in &raw_positions {
        if use_common {
            let conv = convention.as_deref().ok_or_else(|| {
                Error::Config(
                    "model declares no naming convention; cannot map common names".into(),
                )
            })?;
            specs.push((common_to_pattern(conv, raw)?, Some(raw.clone())));
        } else {
            specs.push((raw.clone(), None));
        }
    }

    let patterns: Vec<AddressPattern> = specs
        .iter()
        .map(|(p, _)| AddressPattern::parse(p))
        .collect::<Result<_>>()?;
    let resolution = resolve(model, &patterns);
    for ((mapped, common), (_, matches)) in specs.iter().zip(&resolution.per_pattern) {
        if matches.is_empty() {
            let label = match common {
                Some(c) => format!("{c} (mapped to {mapped})"),
                None => mapped.clone(),
            };
            return Err(Error::EmptyMatch(label));
        }
    }

    // first matching pattern and the occurrence index within it, per path
    let origin_of = |path: &String| -> Option<String> {
        for ((_, common), (_, matches)) in specs.iter().zip(&resolution.per_pattern) {
            if let Some(idx) = matches.iter().position(|m| m == path) {
                return common.as_ref().map(|c| format!("{c}.{idx}"));
            }
        }
        None
    };

    let (route, merge) = route_for(kind);
    if kind == DeltaKind::Prefix {
        for path in &resolution.union {
            let node = get_by_path(model, path)?;
            let role = node.borrow().role();
            if !matches!(role, NodeRole::AttentionKey | NodeRole::AttentionValue) {
                return Err(Error::Placement(format!(
                    "prefix tuning only applies to attention key/value projections, got {path:?}"
                )));
            }
        }
    }

    let captured = match kind {
        DeltaKind::Adapter | DeltaKind::Prefix => {
            Some(capture_shapes(model, &resolution.union)?)
        }
        _ => None,
    };

    let build_seed = model_build_seed(model);
    let mut bindings = Vec::with_capacity(resolution.union.len());
    for path in &resolution.union {
        let (d_in, d_out) = match &captured {
            Some(record) => record.get(path).ok_or_else(|| Error::Capture(path.clone()))?,
            None => {
                let node = get_by_path(model, path)?;
                dims_from_params(&node).ok_or_else(|| {
                    Error::Config(format!(
                        "module {path:?} has no parameter shapes to size {} from; \
                         runtime initialization is not used for this delta type",
                        kind.as_str()
                    ))
                })?
            }
        };
        let seed = build_seed ^ hash_str(path) ^ hash_str(kind.as_str());
        let module = create_delta(kind, d_in, d_out, &hp, seed)?;
        bindings.push(Binding {
            path: path.clone(),
            common_key: origin_of(path),
            module: Rc::new(module),
            route,
            merge,
            registered_name: RefCell::new(None),
        });
    }
    Ok(DeltaObject {
        config: config.clone(),
        bindings,
        attached: false,
        restore_on_detach: RefCell::new(Vec::new()),
    })
}

fn unused_delta_child_name(deltas_node: &NodeRef, kind: DeltaKind) -> String {
    let mut i = 0;
    loop {
        let name = format!("{}_{i}", kind.as_str());
        if deltas_node.borrow().child(&name).is_none() {
            return name;
        }
        i += 1;
    }
}

/// Installs every binding and registers each delta module under the target
/// node's reserved `"deltas"` child so freezing, snapshots and visualization
/// see its parameters.
pub fn attach(obj: &mut DeltaObject, model: &NodeRef) -> Result<()> {
    if obj.attached {
        return Err(Error::State("delta object is already attached".into()));
    }
    // resolve every target before installing anything
    let mut nodes = Vec::with_capacity(obj.bindings.len());
    for binding in &obj.bindings {
        nodes.push(get_by_path(model, &binding.path)?);
    }
    let mut installed: Vec<usize> = Vec::with_capacity(obj.bindings.len());
    for (i, (binding, node)) in obj.bindings.iter().zip(&nodes).enumerate() {
        if let Err(e) = routing::install(node, &binding.module, binding.route, binding.merge) {
            for &j in installed.iter().rev() {
                let _ = routing::uninstall(&nodes[j], &obj.bindings[j].module);
            }
            return Err(e);
        }
        installed.push(i);
    }
    for (binding, node) in obj.bindings.iter().zip(&nodes) {
        let existing = node.borrow().child(DELTAS_CHILD);
        let deltas_node = match existing {
            Some(existing) => existing,
            None => {
                let fresh = ModuleNode::new(DELTAS_CHILD, Rc::new(Namespace))?;
                modtree::add_child_reserved(node, fresh.clone())?;
                fresh
            }
        };
        let name = unused_delta_child_name(&deltas_node, obj.config.delta_type);
        let delta_node = ModuleNode::new(
            &name,
            Rc::new(DeltaNodeBehavior {
                module: binding.module.clone(),
            }),
        )?;
        for (pname, tensor) in binding.module.named_params() {
            modtree::add_param(&delta_node, pname, tensor)?;
        }
        add_child(&deltas_node, delta_node)?;
        *binding.registered_name.borrow_mut() = Some(name);
    }
    obj.attached = true;
    Ok(())
}

/// Uninstalls every binding and removes the registrations; model outputs
/// after detach are bit-identical to the pre-attach state.
pub fn detach(obj: &mut DeltaObject, model: &NodeRef) -> Result<()> {
    if !obj.attached {
        return Err(Error::State("delta object is not attached".into()));
    }
    for binding in &obj.bindings {
        let node = get_by_path(model, &binding.path)?;
        routing::uninstall(&node, &binding.module)?;
        let name = binding
            .registered_name
            .borrow_mut()
            .take()
            .ok_or_else(|| Error::State(format!("binding {:?} lost its registration", binding.path)))?;
        let deltas_node = node.borrow().child(DELTAS_CHILD).ok_or_else(|| {
            Error::State(format!("module {:?} lost its deltas child", binding.path))
        })?;
        modtree::remove_child(&deltas_node, &name)?;
        if deltas_node.borrow().children().is_empty() {
            modtree::remove_child(&node, DELTAS_CHILD)?;
        }
    }
    let overwrites = std::mem::take(&mut *obj.restore_on_detach.borrow_mut());
    if !overwrites.is_empty() {
        let params: BTreeMap<String, crate::tensor::Tensor> =
            named_parameters(model).into_iter().collect();
        for (key, data) in overwrites {
            if let Some(tensor) = params.get(&key) {
                tensor.data_mut().copy_from_slice(&data);
            }
        }
    }
    obj.attached = false;
    Ok(())
}

/// Freezes all parameters except those under modules matched by `exclude`.
/// With `set_state_dict` the model's default snapshot switches to
/// trainable-only, mirroring checkpoint-trimming semantics.
pub fn freeze(model: &NodeRef, exclude: &[String], set_state_dict: bool) -> Result<usize> {
    let patterns = AddressPattern::parse_all(exclude)?;
    let count = set_trainable(model, false, &patterns);
    if set_state_dict {
        model.borrow_mut().set_snapshot_trainable_only(true);
    }
    Ok(count)
}

// Checkpoint keys use the delta type as a canonical segment instead of the
// registered instance name (`lora_0`, `lora_1`, ...), which depends on what
// else happened to be attached at save time.
fn file_key(binding: &Binding, kind: DeltaKind, pname: &str) -> String {
    match &binding.common_key {
        Some(ck) => format!("{ck}.{DELTAS_CHILD}.{}.{pname}", kind.as_str()),
        None => format!("{}.{DELTAS_CHILD}.{}.{pname}", binding.path, kind.as_str()),
    }
}

fn model_key(binding: &Binding, registered: &str, pname: &str) -> String {
    format!("{}.{DELTAS_CHILD}.{registered}.{pname}", binding.path)
}

fn has_deltas_segment(key: &str) -> bool {
    key.split('.').any(|s| s == DELTAS_CHILD)
}

/// Writes `config.json` and `delta.bin` into `directory`. The snapshot holds
/// exactly the object's delta parameters; when the model was frozen with
/// `set_state_dict`, the remaining trainable parameters (e.g. a task head)
/// ride along so a task checkpoint is self-contained.
pub fn save_finetuned(obj: &DeltaObject, model: &NodeRef, directory: &Path) -> Result<()> {
    if !obj.attached {
        return Err(Error::State(
            "delta object must be attached to save (keys come from the model tree)".into(),
        ));
    }
    fs::create_dir_all(directory).map_err(|source| Error::Io {
        path: directory.display().to_string(),
        source,
    })?;
    let config_path = directory.join(CONFIG_FILE);
    fs::write(&config_path, obj.config.to_canonical_json()).map_err(|source| Error::Io {
        path: config_path.display().to_string(),
        source,
    })?;

    let mut snap = ParameterSnapshot::new();
    for binding in &obj.bindings {
        for (pname, tensor) in binding.module.named_params() {
            snap.insert(
                file_key(binding, obj.config.delta_type, pname),
                tensor.shape().to_vec(),
                tensor.to_vec(),
            );
        }
    }
    if model.borrow().snapshot_trainable_only() {
        for (key, tensor) in named_parameters(model) {
            if tensor.requires_grad() && !has_deltas_segment(&key) {
                snap.insert(key, tensor.shape().to_vec(), tensor.to_vec());
            }
        }
    }
    snap.write_file(&directory.join(DELTA_FILE))
}

/// Rebuilds a delta object from `config.json` alone, attaches it, and loads
/// `delta.bin` strictly: every delta entry must land, and no file key may
/// miss the model.
pub fn from_finetuned(directory: &Path, model: &NodeRef) -> Result<DeltaObject> {
    let config_path = directory.join(CONFIG_FILE);
    let text = match fs::read_to_string(&config_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Config(format!(
                "missing {CONFIG_FILE} in {:?}",
                directory.display()
            )))
        }
        Err(source) => {
            return Err(Error::Io {
                path: config_path.display().to_string(),
                source,
            })
        }
    };
    let config = DeltaConfig::from_json(&text)?;
    let snap = ParameterSnapshot::read_file(&directory.join(DELTA_FILE))?;

    let mut obj = build(&config, model)?;
    attach(&mut obj, model)?;
    let outcome = load_delta_snapshot(&obj, model, &snap);
    if let Err(e) = outcome {
        let _ = detach(&mut obj, model);
        return Err(e);
    }
    Ok(obj)
}

fn load_delta_snapshot(obj: &DeltaObject, model: &NodeRef, snap: &ParameterSnapshot) -> Result<()> {
    // translate checkpoint keys (possibly common-named) to model keys
    let mut translation: BTreeMap<String, String> = BTreeMap::new();
    for binding in &obj.bindings {
        let registered = binding.registered_name.borrow().clone().unwrap();
        for (pname, _) in binding.module.named_params() {
            translation.insert(
                file_key(binding, obj.config.delta_type, pname),
                model_key(binding, &registered, pname),
            );
        }
    }
    for expected in translation.keys() {
        if !snap.contains(expected) {
            return Err(Error::Key(format!(
                "checkpoint misses delta parameter {expected:?}"
            )));
        }
    }
    // remember pre-load values of non-delta parameters the file will touch
    let model_params: BTreeMap<String, crate::tensor::Tensor> =
        named_parameters(model).into_iter().collect();
    let mut overwrites = Vec::new();
    let mut translated = ParameterSnapshot::new();
    for (key, entry) in snap.iter() {
        let target = translation.get(key).cloned().unwrap_or_else(|| key.clone());
        if !translation.contains_key(key) {
            if let Some(tensor) = model_params.get(&target) {
                overwrites.push((target.clone(), tensor.to_vec()));
            }
        }
        translated.insert(target, entry.shape.clone(), entry.data.clone());
    }
    *obj.restore_on_detach.borrow_mut() = overwrites;
    let report = load_snapshot(model, &translated, false)?;
    if let Some(first) = report.unexpected.first() {
        return Err(Error::Key(format!(
            "checkpoint key {first:?} does not exist in the model ({} unexpected total)",
            report.unexpected.len()
        )));
    }
    Ok(())
}
