//! Module-tree visualization.
//!
//! Renders the tree with parameter shapes, collapsing runs of structurally
//! identical numbered siblings (transformer layers) into one `name.[i-j]`
//! entry. Delta sub-modules carry a `[d]` marker, trainable parameters a
//! `[t]` marker, so an attach is visible at a glance and layers with
//! different attachment states never collapse.

use serde::{Deserialize, Serialize};

use crate::modtree::{NodeRef, DELTAS_CHILD};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLine {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Machine-readable mirror of the rendering. A node with `range = Some((i, j))`
/// stands for a list whose `j - i + 1` children were structurally identical;
/// its `params`/`children` are those of one representative child.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeView {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<(usize, usize)>,
    pub delta: bool,
    pub params: Vec<ParamLine>,
    pub children: Vec<TreeView>,
}

impl TreeView {
    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(TreeView::node_count).sum::<usize>()
    }
}

fn equal_ignoring_name(a: &TreeView, b: &TreeView) -> bool {
    a.range == b.range && a.delta == b.delta && a.params == b.params && a.children == b.children
}

fn build_view(name: &str, node: &NodeRef, inside_delta: bool) -> TreeView {
    let is_delta = inside_delta || name == DELTAS_CHILD;
    let n = node.borrow();
    let params = n
        .params()
        .iter()
        .map(|(pname, t)| ParamLine {
            name: pname.clone(),
            shape: t.shape().to_vec(),
            trainable: t.requires_grad(),
        })
        .collect();
    let mut children: Vec<TreeView> = n
        .children()
        .iter()
        .map(|(cname, child)| build_view(cname, child, is_delta))
        .collect();
    drop(n);

    // collapse a pure list node: no own params, children named 0..n-1,
    // all structurally identical
    let collapsible = params == Vec::<ParamLine>::new()
        && children.len() > 1
        && children
            .iter()
            .enumerate()
            .all(|(i, c)| c.name == i.to_string())
        && children
            .windows(2)
            .all(|w| equal_ignoring_name(&w[0], &w[1]));
    if collapsible {
        let last = children.len() - 1;
        let representative = children.swap_remove(0);
        return TreeView {
            name: name.to_string(),
            range: Some((0, last)),
            delta: is_delta,
            params: representative.params,
            children: representative.children,
        };
    }
    TreeView {
        name: name.to_string(),
        range: None,
        delta: is_delta,
        params,
        children,
    }
}

/// Builds the structured view of the tree.
pub fn export_view(root: &NodeRef) -> TreeView {
    build_view("", root, false)
}

fn shape_str(shape: &[usize]) -> String {
    let inner = shape
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    if shape.len() == 1 {
        format!("({inner},)")
    } else {
        format!("({inner})")
    }
}

fn render_view(view: &TreeView, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    let label = if view.name.is_empty() {
        "(root)".to_string()
    } else {
        match view.range {
            Some((i, j)) => format!("{}.[{i}-{j}]", view.name),
            None => view.name.clone(),
        }
    };
    out.push_str(&pad);
    out.push_str(&label);
    if view.delta {
        out.push_str(" [d]");
    }
    out.push('\n');
    for p in &view.params {
        out.push_str(&pad);
        out.push_str("  ");
        out.push_str(&p.name);
        out.push_str(": ");
        out.push_str(&shape_str(&p.shape));
        if p.trainable {
            out.push_str(" [t]");
        }
        out.push('\n');
    }
    for child in &view.children {
        render_view(child, indent + 1, out);
    }
}

/// Deterministic text rendering plus its structured mirror.
pub fn structure_graph(root: &NodeRef) -> (String, TreeView) {
    let view = export_view(root);
    let mut text = String::new();
    render_view(&view, 0, &mut text);
    (text, view)
}

fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else if name.is_empty() {
        prefix.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Expands all collapsed ranges back into the full DFS path list.
pub fn expand_paths(view: &TreeView) -> Vec<String> {
    fn walk(view: &TreeView, prefix: &str, out: &mut Vec<String>) {
        let own = join_path(prefix, &view.name);
        out.push(own.clone());
        match view.range {
            None => {
                for child in &view.children {
                    walk(child, &own, out);
                }
            }
            Some((lo, hi)) => {
                for idx in lo..=hi {
                    let entry = join_path(&own, &idx.to_string());
                    out.push(entry.clone());
                    for child in &view.children {
                        walk(child, &entry, out);
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(view, "", &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::enumerate_paths;
    use crate::backbones::{build_toyformer, NamingConvention, ToyformerConfig};
    use crate::deltas::DeltaKind;
    use crate::lifecycle::{attach, auto_default, build, detach, DeltaConfig};
    use crate::modtree::{add_param, ModuleNode, Namespace};
    use crate::tensor::Tensor;
    use std::rc::Rc;

    fn toy_a() -> NodeRef {
        build_toyformer(&ToyformerConfig::default(), NamingConvention::A).unwrap()
    }

    #[test]
    fn identical_layers_collapse_into_one_entry() {
        let model = toy_a();
        let (text, view) = structure_graph(&model);
        assert!(text.contains("layer.[0-1]"), "{text}");
        let layer = &view.children[1].children[0];
        assert_eq!(layer.name, "layer");
        assert_eq!(layer.range, Some((0, 1)));
    }

    #[test]
    fn rendering_is_deterministic() {
        let model = toy_a();
        let (a, _) = structure_graph(&model);
        let (b, _) = structure_graph(&model);
        assert_eq!(a, b);
    }

    #[test]
    fn single_layer_attach_breaks_collapse_and_detach_restores_it() {
        let model = toy_a();
        let mut config = DeltaConfig::new(DeltaKind::Lora);
        config.modified_modules = Some(vec!["encoder.layer.0.attention.self.query".into()]);
        let mut obj = build(&config, &model).unwrap();
        attach(&mut obj, &model).unwrap();

        let (text, view) = structure_graph(&model);
        assert!(!text.contains("layer.[0-1]"), "{text}");
        assert!(text.contains("deltas [d]"), "{text}");
        assert!(text.contains("lora_0 [d]"), "{text}");
        let expanded = expand_paths(&view);
        assert!(expanded.contains(&"encoder.layer.0.attention.self.query.deltas.lora_0".to_string()));

        detach(&mut obj, &model).unwrap();
        let (text, _) = structure_graph(&model);
        assert!(text.contains("layer.[0-1]"));
        assert!(!text.contains("[d]"));
    }

    #[test]
    fn expansion_reproduces_dfs_paths_exactly() {
        for convention in [NamingConvention::A, NamingConvention::B] {
            let model = build_toyformer(&ToyformerConfig::default(), convention).unwrap();
            let view = export_view(&model);
            assert_eq!(expand_paths(&view), enumerate_paths(&model));

            // still exact with deltas attached somewhere
            let mut obj = build(&auto_default(DeltaKind::Bitfit), &model).unwrap();
            attach(&mut obj, &model).unwrap();
            let view = export_view(&model);
            assert_eq!(expand_paths(&view), enumerate_paths(&model));
        }
    }

    #[test]
    fn collapse_never_adds_nodes() {
        let model = toy_a();
        let view = export_view(&model);
        assert!(view.node_count() <= enumerate_paths(&model).len());
    }

    #[test]
    fn trainable_marker_tracks_requires_grad() {
        let model = toy_a();
        let (text, _) = structure_graph(&model);
        assert!(text.contains("[t]"));
        crate::modtree::set_trainable(&model, false, &[]);
        let (frozen, _) = structure_graph(&model);
        assert!(!frozen.contains("[t]"));
    }

    #[test]
    fn leaf_model_is_a_single_node_document() {
        let root = ModuleNode::new_root(Rc::new(Namespace));
        add_param(&root, "w", Tensor::zeros(&[2])).unwrap();
        let view = export_view(&root);
        assert_eq!(view.node_count(), 1);
        assert_eq!(expand_paths(&view), vec![String::new()]);
        let json = serde_json::to_string(&view).unwrap();
        let back: TreeView = serde_json::from_str(&json).unwrap();
        assert_eq!(back, view);
    }
}
