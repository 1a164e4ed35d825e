//! Flat `key = value` config files with `[section]` headers.
//!
//! ```text
//! [synth]
//! users = 2000
//! alpha = 0.5
//!
//! [hyper]
//! lambda = 0.1
//! ```
//!
//! Keys are namespaced as `section.key`. `#` starts a comment. Unknown keys
//! are rejected; command-line flags override config values.

use std::collections::BTreeMap;
use std::path::Path;

use crate::CliError;

/// Every key the config grammar accepts.
pub const KNOWN_KEYS: &[&str] = &[
    "synth.seed",
    "synth.users",
    "synth.items",
    "synth.categories",
    "synth.sellers",
    "synth.latent_dim",
    "synth.pages_per_user",
    "synth.exposures_min",
    "synth.exposures_max",
    "synth.alpha",
    "synth.label_noise",
    "hyper.tau",
    "hyper.xi",
    "hyper.lambda",
    "hyper.dim",
    "hyper.heads",
    "hyper.learning_rate",
    "hyper.batch_size",
    "hyper.l_short",
    "hyper.l_long",
    "schema.item_buckets",
    "schema.category_buckets",
    "schema.seller_buckets",
    "schema.user_buckets",
    "schema.profile_buckets",
    "schema.cm_hidden",
    "schema.pred_hidden",
    "train.epochs",
    "train.seed",
    "train.variant",
    "train.lr_decay",
    "train.workers",
    "ablate.variants",
    "ablate.seeds",
];

#[derive(Default, Debug, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        ConfigFile::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ConfigFile, CliError> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Data(format!("config line {}: `{raw}` is not key = value", i + 1))
            })?;
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            if !KNOWN_KEYS.contains(&full.as_str()) {
                return Err(CliError::Data(format!(
                    "config line {}: unknown key `{full}`",
                    i + 1
                )));
            }
            values.insert(full, value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| CliError::Data(format!("config key `{key}`: cannot parse `{raw}`"))),
        }
    }
}
