//! Optional TOML configuration file. Values in the file replace the built-in
//! defaults and command-line flags replace values from the file.
//!
//! ```toml
//! [corpus]
//! n = 250
//! target_dice = 0.7
//!
//! [train]
//! epochs = 20
//! tau_a = 0.2
//! seg = { base_width = 8, depth = 3 }
//! ```

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;
use umanet::corpus::CorpusConfig;
use umanet::harness::TrainConfig;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
    }
}

/// Replaces `target` with `value` when the flag was given.
pub fn set<T>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

/// Parses `32` as a square extent or `HxW` as height by width.
pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|e| format!("invalid extent {t:?}: {e}"))
    };
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|n| (n, n)),
    }
}
