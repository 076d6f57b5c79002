//! Name-based addressing.
//!
//! Patterns resolve to sub-module paths over the tree's depth-first
//! enumeration. A plain pattern uses tail semantics: its dot-segments must
//! equal the final segments of a full path (matching whole segments, never
//! substrings). A pattern prefixed with `re:` is a regular expression that
//! must match the entire path.

use regex::Regex;

use crate::error::{Error, Result};
use crate::modtree::{named_submodules, NodeRef};

#[derive(Debug, Clone)]
enum PatternKind {
    Path(Vec<String>),
    Regex(Box<Regex>),
}

#[derive(Debug, Clone)]
pub struct AddressPattern {
    raw: String,
    kind: PatternKind,
}

impl AddressPattern {
    pub fn parse(raw: &str) -> Result<AddressPattern> {
        if raw.is_empty() {
            return Err(Error::Pattern {
                pattern: raw.to_string(),
                detail: "pattern must be non-empty".into(),
            });
        }
        if let Some(expr) = raw.strip_prefix("re:") {
            let anchored = format!("^(?:{expr})$");
            let re = Regex::new(&anchored).map_err(|e| Error::Pattern {
                pattern: raw.to_string(),
                detail: e.to_string(),
            })?;
            return Ok(AddressPattern {
                raw: raw.to_string(),
                kind: PatternKind::Regex(Box::new(re)),
            });
        }
        let segments: Vec<String> = raw.split('.').map(str::to_string).collect();
        if segments.iter().any(String::is_empty) {
            return Err(Error::Pattern {
                pattern: raw.to_string(),
                detail: "path pattern contains an empty segment".into(),
            });
        }
        Ok(AddressPattern {
            raw: raw.to_string(),
            kind: PatternKind::Path(segments),
        })
    }

    pub fn parse_all(raw: &[String]) -> Result<Vec<AddressPattern>> {
        raw.iter().map(|r| Self::parse(r)).collect()
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn is_regex(&self) -> bool {
        matches!(self.kind, PatternKind::Regex(_))
    }

    pub fn matches(&self, path: &str) -> bool {
        match &self.kind {
            PatternKind::Regex(re) => re.is_match(path),
            PatternKind::Path(segments) => {
                if path.is_empty() {
                    return false;
                }
                let path_segments: Vec<&str> = path.split('.').collect();
                if segments.len() > path_segments.len() {
                    return false;
                }
                path_segments[path_segments.len() - segments.len()..]
                    .iter()
                    .zip(segments)
                    .all(|(have, want)| *have == want)
            }
        }
    }
}

/// Per-pattern matches plus their deduplicated union, all in DFS preorder.
#[derive(Debug, Clone)]
pub struct Resolution {
    pub per_pattern: Vec<(String, Vec<String>)>,
    pub union: Vec<String>,
}

/// DFS preorder list of all full module paths, root first. This is also the
/// brute-force oracle surface for matching tests.
pub fn enumerate_paths(root: &NodeRef) -> Vec<String> {
    named_submodules(root).into_iter().map(|(p, _)| p).collect()
}

/// Pure resolution over a path list.
pub fn resolve_paths(paths: &[String], patterns: &[AddressPattern]) -> Resolution {
    let per_pattern = patterns
        .iter()
        .map(|pat| {
            let matched: Vec<String> = paths
                .iter()
                .filter(|p| pat.matches(p))
                .cloned()
                .collect();
            (pat.raw().to_string(), matched)
        })
        .collect();
    let union = paths
        .iter()
        .filter(|p| patterns.iter().any(|pat| pat.matches(p)))
        .cloned()
        .collect();
    Resolution { per_pattern, union }
}

/// Resolves patterns against a module tree. Zero matches is not an error at
/// this layer; callers that require matches decide what to do.
pub fn resolve(root: &NodeRef, patterns: &[AddressPattern]) -> Resolution {
    resolve_paths(&enumerate_paths(root), patterns)
}
