//! Versioned JSON checkpoints for a [`NetworkStack`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, NetworkStack};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "probalign-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub network: NetworkStack,
}

impl Checkpoint {
    pub fn new(architecture: Architecture, network: NetworkStack) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            architecture,
            network,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::validation(format!("checkpoint encode: {e}")))
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::parse(origin, format!("unknown checkpoint format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                origin,
                format!("checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})", ck.version),
            ));
        }
        ck.architecture.validate()?;
        // Re-run structural checks on deserialized layers.
        let n = ck.network;
        let network = NetworkStack::new(
            n.backbone,
            super::BayesAffineLayer::new(n.extractor.weight, n.extractor.bias)?,
            super::BayesAffineLayer::new(n.classifier.weight, n.classifier.bias)?,
            super::MetricNet::new(n.metric.layers, n.metric.relu)?,
        )?;
        if network.input_dim() != ck.architecture.input_dim || network.n_classes() != ck.architecture.n_classes {
            return Err(Error::parse(origin, "network does not match declared architecture"));
        }
        Ok(Self { network, ..ck })
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, ck.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text, path)
}
