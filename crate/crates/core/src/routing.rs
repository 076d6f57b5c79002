//! Dynamic tensor re-routing.
//!
//! A target node's forward behavior is wrapped by an [`Interceptor`] that
//! splices delta modules into the hidden-state flow along one of three
//! routes, without the backbone code knowing. Installing then removing all
//! bindings restores the original behavior exactly.

use std::cell::RefCell;
use std::rc::Rc;

use crate::deltas::DeltaRef;
use crate::error::{Error, Result};
use crate::modtree::{Behavior, ForwardCtx, ForwardWrapper, NodeRef};
use crate::tensor::Tensor;

/// Where the delta module taps and writes the hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// `h_in <- merge(h_in, delta(h_in))`, then the original forward runs.
    InputModify,
    /// Original forward first, then `h_out <- merge(h_out, delta(h_out))`.
    OutputModify,
    /// Original forward on the untouched input; `h_out <- merge(h_out, delta(h_in))`.
    Parallel,
}

impl Route {
    pub fn label(&self) -> &'static str {
        match self {
            Self::InputModify => "input-modify",
            Self::OutputModify => "output-modify",
            Self::Parallel => "parallel",
        }
    }
}

/// How the delta output is merged into the hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOp {
    Add,
    Replace,
}

struct Entry {
    delta: DeltaRef,
    route: Route,
    merge: MergeOp,
}

/// Ordered list of delta bindings wrapped around one node's forward.
/// Input-side entries run before the original forward, output-side entries
/// after; within each side, entries apply in attachment order. Parallel
/// entries read the input as the wrapped module actually received it.
pub struct Interceptor {
    path: String,
    entries: RefCell<Vec<Entry>>,
}

impl Interceptor {
    fn merge(&self, entry: &Entry, h: &Tensor, delta_out: &Tensor) -> Result<Tensor> {
        match entry.merge {
            MergeOp::Add => h.add(delta_out).map_err(|e| Error::Routing {
                path: self.path.clone(),
                route: entry.route.label(),
                detail: e.to_string(),
            }),
            MergeOp::Replace => Ok(delta_out.clone()),
        }
    }
}

impl ForwardWrapper for Interceptor {
    fn wrapped(
        &self,
        node: &NodeRef,
        ctx: &ForwardCtx,
        input: &Tensor,
        original: &dyn Behavior,
    ) -> Result<Tensor> {
        let entries = self.entries.borrow();
        let mut h_in = input.clone();
        for entry in entries.iter().filter(|e| e.route == Route::InputModify) {
            let delta_out = entry.delta.forward(&h_in)?;
            h_in = self.merge(entry, &h_in, &delta_out)?;
        }
        let mut h_out = original.forward(node, ctx, &h_in)?;
        for entry in entries
            .iter()
            .filter(|e| e.route != Route::InputModify)
        {
            let source = match entry.route {
                Route::OutputModify => &h_out,
                Route::Parallel => &h_in,
                Route::InputModify => unreachable!(),
            };
            let delta_out = entry.delta.forward(source)?;
            h_out = self.merge(entry, &h_out, &delta_out)?;
        }
        Ok(h_out)
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

fn interceptor_of(node: &NodeRef) -> Result<Option<Rc<dyn ForwardWrapper>>> {
    let wrapper = node.borrow().wrapper();
    match wrapper {
        None => Ok(None),
        Some(w) => {
            if w.as_any().downcast_ref::<Interceptor>().is_none() {
                return Err(Error::State(format!(
                    "module {:?} carries a foreign forward wrapper",
                    node.borrow().path()
                )));
            }
            Ok(Some(w))
        }
    }
}

/// Splices a delta module into `node`'s forward. Stacking multiple deltas on
/// one node is allowed; they apply in attachment order.
pub fn install(node: &NodeRef, delta: &DeltaRef, route: Route, merge: MergeOp) -> Result<()> {
    let entry = Entry {
        delta: delta.clone(),
        route,
        merge,
    };
    match interceptor_of(node)? {
        Some(w) => {
            let interceptor = w.as_any().downcast_ref::<Interceptor>().unwrap();
            interceptor.entries.borrow_mut().push(entry);
        }
        None => {
            let path = node.borrow().path().to_string();
            let interceptor = Interceptor {
                path,
                entries: RefCell::new(vec![entry]),
            };
            node.borrow_mut().set_wrapper(Some(Rc::new(interceptor)));
        }
    }
    Ok(())
}

/// Removes one binding; when none remain the original forward is restored
/// and subsequent outputs are bit-identical to the never-wrapped node.
pub fn uninstall(node: &NodeRef, delta: &DeltaRef) -> Result<()> {
    let path = node.borrow().path().to_string();
    let Some(w) = interceptor_of(node)? else {
        return Err(Error::NotAttached(path));
    };
    let interceptor = w.as_any().downcast_ref::<Interceptor>().unwrap();
    let emptied = {
        let mut entries = interceptor.entries.borrow_mut();
        let idx = entries
            .iter()
            .position(|e| Rc::ptr_eq(&e.delta, delta))
            .ok_or(Error::NotAttached(path))?;
        entries.remove(idx);
        entries.is_empty()
    };
    if emptied {
        node.borrow_mut().set_wrapper(None);
    }
    Ok(())
}

/// Number of delta bindings currently wrapped around `node`.
pub fn installed_count(node: &NodeRef) -> usize {
    match node.borrow().wrapper() {
        Some(w) => w
            .as_any()
            .downcast_ref::<Interceptor>()
            .map_or(0, |i| i.entries.borrow().len()),
        None => 0,
    }
}
