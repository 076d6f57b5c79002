//! Shared command options: backbone spec and delta choice.

use std::path::PathBuf;
use std::str::FromStr;

use deltatune_core::backbones::{build_toyformer, NamingConvention, ToyformerConfig};
use deltatune_core::deltas::DeltaKind;
use deltatune_core::lifecycle::{auto_default, DeltaConfig};
use deltatune_core::modtree::NodeRef;
use deltatune_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub convention: NamingConvention,
    pub config: ToyformerConfig,
}

impl ModelSpec {
    pub fn build(&self) -> Result<NodeRef> {
        build_toyformer(&self.config, self.convention)
    }
}

/// What to attach before training or counting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeltaChoice {
    /// No delta; only the classifier head stays trainable.
    None,
    /// No delta; nothing is frozen (full fine-tuning baseline).
    Full,
    /// A delta type with its default positions and hyperparameters.
    Kind(DeltaKind),
    /// A delta config file.
    ConfigFile(PathBuf),
}

impl DeltaChoice {
    /// Delta config to build, when the choice carries one.
    pub fn config(&self) -> Result<Option<DeltaConfig>> {
        match self {
            Self::None | Self::Full => Ok(None),
            Self::Kind(kind) => Ok(Some(auto_default(*kind))),
            Self::ConfigFile(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                Ok(Some(DeltaConfig::from_json(&text)?))
            }
        }
    }
}

impl FromStr for DeltaChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "full" => Ok(Self::Full),
            _ => {
                if let Ok(kind) = s.parse::<DeltaKind>() {
                    Ok(Self::Kind(kind))
                } else if s.ends_with(".json") || s.contains('/') {
                    Ok(Self::ConfigFile(PathBuf::from(s)))
                } else {
                    Err(Error::Config(format!(
                        "unknown delta choice {s:?} (expected none, full, a delta type, or a config path)"
                    )))
                }
            }
        }
    }
}
