//! Named module trees.
//!
//! Every backbone and every delta module is a [`ModuleNode`]: a named node
//! holding parameters, ordered children and a forward behavior. Dot-joined
//! local names form the full path of a node; full paths are the addressing
//! substrate and the checkpoint key space.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::addressing::AddressPattern;
use crate::error::{Error, Result};
use crate::tensor::{numel_of, Tensor};

/// Per-call context threaded through a forward pass alongside the hidden
/// state. Carries the padding mask for the original input sequence; key rows
/// prepended by interceptors are treated as always attendable.
#[derive(Clone, Default)]
pub struct ForwardCtx {
    pub pad_mask: Option<Vec<Vec<bool>>>,
}

impl ForwardCtx {
    pub fn plain() -> Self {
        Self { pad_mask: None }
    }

    pub fn with_mask(pad_mask: Vec<Vec<bool>>) -> Self {
        Self {
            pad_mask: Some(pad_mask),
        }
    }
}

/// Coarse role tag a behavior can expose so that placement rules (e.g.
/// "attention key/value projections only") can be checked generically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Generic,
    AttentionKey,
    AttentionValue,
}

/// Forward behavior of a module: single hidden-state tensor in, single
/// hidden-state tensor out.
pub trait Behavior {
    fn forward(&self, node: &NodeRef, ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor>;

    fn role(&self) -> NodeRole {
        NodeRole::Generic
    }
}

/// Hook installed around a node's forward behavior. The tree only knows the
/// abstract wrapper concept; concrete re-routing logic lives elsewhere and
/// depends on this module, never the reverse.
pub trait ForwardWrapper {
    fn wrapped(
        &self,
        node: &NodeRef,
        ctx: &ForwardCtx,
        input: &Tensor,
        original: &dyn Behavior,
    ) -> Result<Tensor>;

    fn as_any(&self) -> &dyn std::any::Any;
}

/// Observation slot for runtime shape capture: records the last-axis extents
/// of the tensors flowing through a node.
#[derive(Default)]
pub struct CaptureSlot {
    input_dim: Cell<Option<usize>>,
    output_dim: Cell<Option<usize>>,
}

impl CaptureSlot {
    pub fn dims(&self) -> Option<(usize, usize)> {
        Some((self.input_dim.get()?, self.output_dim.get()?))
    }
}

/// Grouping behavior for nodes that only provide a namespace; they never
/// appear in the hidden-state flow themselves.
pub struct Namespace;

impl Behavior for Namespace {
    fn forward(&self, node: &NodeRef, _ctx: &ForwardCtx, _input: &Tensor) -> Result<Tensor> {
        Err(Error::Contract(format!(
            "module {:?} is a namespace without forward behavior",
            node.borrow().path()
        )))
    }
}

pub type NodeRef = Rc<RefCell<ModuleNode>>;

impl std::fmt::Debug for ModuleNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModuleNode")
            .field("path", &self.path)
            .field("children", &self.children.len())
            .field("params", &self.params.len())
            .finish()
    }
}

pub struct ModuleNode {
    local_name: String,
    path: String,
    behavior: Rc<dyn Behavior>,
    children: Vec<(String, NodeRef)>,
    params: Vec<(String, Tensor)>,
    wrapper: Option<Rc<dyn ForwardWrapper>>,
    capture: Option<Rc<CaptureSlot>>,
    annotations: BTreeMap<String, String>,
    snapshot_trainable_only: bool,
}

/// Reserved child name managed by the delta lifecycle.
pub const DELTAS_CHILD: &str = "deltas";

/// Root annotation key naming the model's sub-module naming convention.
pub const ANNOTATION_CONVENTION: &str = "naming_convention";
/// Root annotation key holding the seed the model was built from.
pub const ANNOTATION_SEED: &str = "build_seed";

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains('.') {
        return Err(Error::Config(format!(
            "invalid module name {name:?}: must be non-empty and contain no '.'"
        )));
    }
    Ok(())
}

impl ModuleNode {
    pub fn new(local_name: &str, behavior: Rc<dyn Behavior>) -> Result<NodeRef> {
        check_name(local_name)?;
        Ok(Rc::new(RefCell::new(ModuleNode {
            local_name: local_name.to_string(),
            path: local_name.to_string(),
            behavior,
            children: Vec::new(),
            params: Vec::new(),
            wrapper: None,
            capture: None,
            annotations: BTreeMap::new(),
            snapshot_trainable_only: false,
        })))
    }

    /// Root node; its path is the empty string.
    pub fn new_root(behavior: Rc<dyn Behavior>) -> NodeRef {
        Rc::new(RefCell::new(ModuleNode {
            local_name: String::new(),
            path: String::new(),
            behavior,
            children: Vec::new(),
            params: Vec::new(),
            wrapper: None,
            capture: None,
            annotations: BTreeMap::new(),
            snapshot_trainable_only: false,
        }))
    }

    pub fn local_name(&self) -> &str {
        &self.local_name
    }

    /// Full dot-joined path from the root this node is registered under.
    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn behavior(&self) -> Rc<dyn Behavior> {
        self.behavior.clone()
    }

    pub fn role(&self) -> NodeRole {
        self.behavior.role()
    }

    pub fn children(&self) -> &[(String, NodeRef)] {
        &self.children
    }

    pub fn child(&self, name: &str) -> Option<NodeRef> {
        self.children
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.clone())
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
    }

    pub fn wrapper(&self) -> Option<Rc<dyn ForwardWrapper>> {
        self.wrapper.clone()
    }

    pub fn set_wrapper(&mut self, wrapper: Option<Rc<dyn ForwardWrapper>>) {
        self.wrapper = wrapper;
    }

    pub fn capture_slot(&self) -> Option<Rc<CaptureSlot>> {
        self.capture.clone()
    }

    pub fn arm_capture(&mut self) -> Rc<CaptureSlot> {
        let slot = Rc::new(CaptureSlot::default());
        self.capture = Some(slot.clone());
        slot
    }

    pub fn disarm_capture(&mut self) {
        self.capture = None;
    }

    pub fn set_annotation(&mut self, key: &str, value: &str) {
        self.annotations.insert(key.to_string(), value.to_string());
    }

    pub fn annotation(&self, key: &str) -> Option<String> {
        self.annotations.get(key).cloned()
    }

    pub fn snapshot_trainable_only(&self) -> bool {
        self.snapshot_trainable_only
    }

    pub fn set_snapshot_trainable_only(&mut self, flag: bool) {
        self.snapshot_trainable_only = flag;
    }
}

fn fix_paths(node: &NodeRef, path: String) {
    node.borrow_mut().path = path.clone();
    let children: Vec<(String, NodeRef)> = node.borrow().children.clone();
    for (name, child) in children {
        let child_path = if path.is_empty() {
            name
        } else {
            format!("{path}.{name}")
        };
        fix_paths(&child, child_path);
    }
}

fn add_child_inner(parent: &NodeRef, child: NodeRef) -> Result<()> {
    let name = child.borrow().local_name.clone();
    let parent_path = {
        let p = parent.borrow();
        if p.children.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!(
                "module {:?} already has a child named {name:?}",
                p.path
            )));
        }
        p.path.clone()
    };
    let child_path = if parent_path.is_empty() {
        name.clone()
    } else {
        format!("{parent_path}.{name}")
    };
    fix_paths(&child, child_path);
    parent.borrow_mut().children.push((name, child));
    Ok(())
}

/// Registers `child` under `parent`. The name `"deltas"` is reserved for the
/// delta lifecycle and rejected here.
pub fn add_child(parent: &NodeRef, child: NodeRef) -> Result<()> {
    if child.borrow().local_name == DELTAS_CHILD {
        return Err(Error::Config(format!(
            "child name {DELTAS_CHILD:?} is reserved"
        )));
    }
    add_child_inner(parent, child)
}

/// Registration path for the reserved `"deltas"` subtree.
pub(crate) fn add_child_reserved(parent: &NodeRef, child: NodeRef) -> Result<()> {
    add_child_inner(parent, child)
}

pub(crate) fn remove_child(parent: &NodeRef, name: &str) -> Result<NodeRef> {
    let mut p = parent.borrow_mut();
    let idx = p
        .children
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| {
            Error::Config(format!("module {:?} has no child named {name:?}", p.path))
        })?;
    Ok(p.children.remove(idx).1)
}

pub fn add_param(node: &NodeRef, name: &str, tensor: Tensor) -> Result<()> {
    check_name(name)?;
    let mut n = node.borrow_mut();
    if n.params.iter().any(|(p, _)| p == name) {
        return Err(Error::Config(format!(
            "module {:?} already has a parameter named {name:?}",
            n.path
        )));
    }
    n.params.push((name.to_string(), tensor));
    Ok(())
}

/// Runs a node's forward behavior, honoring any installed wrapper and
/// recording shapes into an armed capture slot.
pub fn run_forward(node: &NodeRef, ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
    let (behavior, wrapper, capture) = {
        let n = node.borrow();
        (n.behavior.clone(), n.wrapper.clone(), n.capture.clone())
    };
    if let Some(cap) = &capture {
        if let Some(d) = input.shape().last() {
            cap.input_dim.set(Some(*d));
        }
    }
    let out = match wrapper {
        Some(w) => w.wrapped(node, ctx, input, behavior.as_ref())?,
        None => behavior.forward(node, ctx, input)?,
    };
    if let Some(cap) = &capture {
        if let Some(d) = out.shape().last() {
            cap.output_dim.set(Some(*d));
        }
    }
    Ok(out)
}

/// Depth-first preorder over the tree: parent before children, children in
/// registration order. The root is included with the empty path.
pub fn named_submodules(root: &NodeRef) -> Vec<(String, NodeRef)> {
    let mut out = Vec::new();
    fn walk(path: &str, node: &NodeRef, out: &mut Vec<(String, NodeRef)>) {
        out.push((path.to_string(), node.clone()));
        let children: Vec<(String, NodeRef)> = node.borrow().children.clone();
        for (name, child) in children {
            let child_path = if path.is_empty() {
                name
            } else {
                format!("{path}.{name}")
            };
            walk(&child_path, &child, out);
        }
    }
    walk("", root, &mut out);
    out
}

/// Full parameter keys (`module.path.param_name`) with their tensors, in
/// DFS preorder with a node's own parameters before its children's.
pub fn named_parameters(root: &NodeRef) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (path, node) in named_submodules(root) {
        for (name, tensor) in node.borrow().params() {
            let key = if path.is_empty() {
                name.clone()
            } else {
                format!("{path}.{name}")
            };
            out.push((key, tensor.clone()));
        }
    }
    out
}

pub fn param_count(root: &NodeRef) -> usize {
    named_parameters(root).iter().map(|(_, t)| t.numel()).sum()
}

/// Resolves a full dot path to its node. Fails naming the longest prefix
/// that does resolve.
pub fn get_by_path(root: &NodeRef, path: &str) -> Result<NodeRef> {
    if path.is_empty() {
        return Ok(root.clone());
    }
    let mut current = root.clone();
    let mut resolved = String::new();
    for segment in path.split('.') {
        let next = current.borrow().child(segment);
        match next {
            Some(child) => {
                if !resolved.is_empty() {
                    resolved.push('.');
                }
                resolved.push_str(segment);
                current = child;
            }
            None => {
                return Err(Error::PathNotFound {
                    path: path.to_string(),
                    prefix: resolved,
                })
            }
        }
    }
    Ok(current)
}

/// Sets `requires_grad` on every parameter except those under modules
/// matched by an exclude pattern (matched subtrees are skipped whole).
/// Returns the number of parameter tensors whose flag actually changed.
pub fn set_trainable(root: &NodeRef, flag: bool, exclude: &[AddressPattern]) -> usize {
    let mut changed = 0;
    fn walk(path: &str, node: &NodeRef, flag: bool, exclude: &[AddressPattern], changed: &mut usize) {
        if !path.is_empty() && exclude.iter().any(|p| p.matches(path)) {
            return;
        }
        for (_, tensor) in node.borrow().params() {
            if tensor.requires_grad() != flag {
                tensor.set_requires_grad(flag);
                *changed += 1;
            }
        }
        let children: Vec<(String, NodeRef)> = node.borrow().children.clone();
        for (name, child) in children {
            let child_path = if path.is_empty() {
                name
            } else {
                format!("{path}.{name}")
            };
            walk(&child_path, &child, flag, exclude, changed);
        }
    }
    walk("", root, flag, exclude, &mut changed);
    changed
}

// ── parameter snapshots ──────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"ODLT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered map from full parameter path to tensor payload. Keys iterate in
/// lexicographic order; the file encoding round-trips bit-exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSnapshot {
    entries: BTreeMap<String, SnapshotEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    key: String,
    shape: Vec<usize>,
}

impl ParameterSnapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: String, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(numel_of(&shape), data.len());
        self.entries.insert(key, SnapshotEntry { shape, data });
    }

    pub fn get(&self, key: &str) -> Option<&SnapshotEntry> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &SnapshotEntry)> {
        self.entries.iter()
    }

    pub fn value_count(&self) -> usize {
        self.entries.values().map(|e| e.data.len()).sum()
    }

    /// Byte length of the float payload section (8 bytes per value).
    pub fn payload_len(&self) -> usize {
        8 * self.value_count()
    }

    pub fn encode(&self) -> Vec<u8> {
        let manifest: Vec<ManifestEntry> = self
            .entries
            .iter()
            .map(|(key, e)| ManifestEntry {
                key: key.clone(),
                shape: e.shape.clone(),
            })
            .collect();
        let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serialization");
        let mut out = Vec::with_capacity(16 + manifest_bytes.len() + self.payload_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        for entry in self.entries.values() {
            for v in &entry.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic bytes, expected \"ODLT\"".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + manifest_len {
            return Err(Error::Format("truncated manifest".into()));
        }
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[16..16 + manifest_len])
            .map_err(|e| Error::Format(format!("manifest parse failed: {e}")))?;
        let payload = &bytes[16 + manifest_len..];
        let expected: usize = manifest.iter().map(|m| numel_of(&m.shape) * 8).sum();
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload length {} does not match manifest total {expected}",
                payload.len()
            )));
        }
        let mut entries = BTreeMap::new();
        let mut offset = 0;
        for m in manifest {
            let n = numel_of(&m.shape);
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let b: [u8; 8] = payload[offset + i * 8..offset + (i + 1) * 8]
                    .try_into()
                    .unwrap();
                data.push(f64::from_le_bytes(b));
            }
            offset += n * 8;
            if entries
                .insert(m.key.clone(), SnapshotEntry { shape: m.shape, data })
                .is_some()
            {
                return Err(Error::Format(format!("duplicate manifest key {:?}", m.key)));
            }
        }
        Ok(Self { entries })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(&self.encode()).map_err(io_err)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

/// Copies parameter values out of the tree. With `trainable_only` the
/// snapshot holds exactly the parameters with `requires_grad == true`.
pub fn snapshot(root: &NodeRef, trainable_only: bool) -> ParameterSnapshot {
    let mut snap = ParameterSnapshot::new();
    for (key, tensor) in named_parameters(root) {
        if trainable_only && !tensor.requires_grad() {
            continue;
        }
        snap.insert(key, tensor.shape().to_vec(), tensor.to_vec());
    }
    snap
}

/// Snapshot honoring the root's default filter (set by freeze with
/// `set_state_dict = true`).
pub fn snapshot_default(root: &NodeRef) -> ParameterSnapshot {
    let trainable_only = root.borrow().snapshot_trainable_only();
    snapshot(root, trainable_only)
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub loaded: usize,
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
}

/// Writes matching snapshot entries into the tree. Shapes are validated
/// before anything is written, so a failed load leaves the model unchanged.
pub fn load_snapshot(root: &NodeRef, snap: &ParameterSnapshot, strict: bool) -> Result<LoadReport> {
    let params = named_parameters(root);
    let mut report = LoadReport::default();
    let mut matched: Vec<(&SnapshotEntry, Tensor)> = Vec::new();
    for (key, tensor) in &params {
        match snap.get(key) {
            Some(entry) => {
                if entry.shape != tensor.shape() {
                    return Err(Error::Shape {
                        op: "load_snapshot",
                        detail: format!(
                            "key {key:?}: snapshot shape {:?} vs model shape {:?}",
                            entry.shape,
                            tensor.shape()
                        ),
                    });
                }
                matched.push((entry, tensor.clone()));
            }
            None => report.missing.push(key.clone()),
        }
    }
    let model_keys: std::collections::HashSet<&str> =
        params.iter().map(|(k, _)| k.as_str()).collect();
    for key in snap.keys() {
        if !model_keys.contains(key.as_str()) {
            report.unexpected.push(key.clone());
        }
    }
    if strict && (!report.missing.is_empty() || !report.unexpected.is_empty()) {
        let offender = report
            .missing
            .first()
            .or_else(|| report.unexpected.first())
            .unwrap();
        return Err(Error::Key(format!(
            "strict load failed: {} missing, {} unexpected (first offender {offender:?})",
            report.missing.len(),
            report.unexpected.len()
        )));
    }
    for (entry, tensor) in matched {
        tensor.data_mut().copy_from_slice(&entry.data);
        report.loaded += 1;
    }
    Ok(report)
}
