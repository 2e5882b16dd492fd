//! Run configuration: network, search and training sections, each fully
//! defaulted. Unknown keys are rejected and every error carries a JSON
//! pointer to the offending value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::search::SearchConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub network: NetworkConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
}

/// `a.b[2].c` to `/a/b/2/c`.
fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

fn prefixed(e: Error, prefix: &str) -> Error {
    match e {
        Error::Schema { path, message } => Error::Schema {
            path: format!("{prefix}{path}"),
            message,
        },
        other => other,
    }
}

/// Deserializes `text` with defaults and JSON-pointer error paths.
pub fn from_json_str<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = pointer(e.path());
        let inner = e.into_inner();
        // serde_json appends " at line L column C"; the pointer is more useful
        let msg = inner.to_string();
        let msg = match msg.rfind(" at line ") {
            Some(i) if inner.line() > 0 => msg[..i].to_string(),
            _ => msg,
        };
        Error::schema(path, msg)
    })?;
    Ok(value)
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = from_json_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate().map_err(|e| prefixed(e, "/network"))?;
        self.search.validate().map_err(|e| prefixed(e, "/search"))?;
        self.train.validate().map_err(|e| prefixed(e, "/train"))?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configs are always serializable")
    }
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Config::parse(&text)
}
