//! Minimal `--key value` flag parsing with an explicit allow-list per
//! subcommand. Unknown flags are usage errors (exit 1), not data errors.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug)]
pub struct Args {
    flags: BTreeMap<String, String>,
}

impl Args {
    pub fn parse(argv: &[String], allowed: &[&str]) -> Result<Args, CliError> {
        let mut flags = BTreeMap::new();
        let mut it = argv.iter();
        while let Some(arg) = it.next() {
            let name = arg
                .strip_prefix("--")
                .ok_or_else(|| CliError::Usage(format!("unexpected argument `{arg}`")))?;
            if !allowed.contains(&name) {
                return Err(CliError::Usage(format!("unknown flag `--{name}`")));
            }
            let value = it
                .next()
                .ok_or_else(|| CliError::Usage(format!("flag `--{name}` needs a value")))?;
            flags.insert(name.to_string(), value.clone());
        }
        Ok(Args { flags })
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.flags.get(name).map(|s| s.as_str())
    }

    pub fn require(&self, name: &str) -> Result<&str, CliError> {
        self.get(name)
            .ok_or_else(|| CliError::Usage(format!("missing required flag `--{name}`")))
    }

    /// Parse a flag if present; parse failure is a usage error.
    pub fn get_parsed<T: FromStr>(&self, name: &str) -> Result<Option<T>, CliError> {
        match self.get(name) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                CliError::Usage(format!("flag `--{name}`: cannot parse `{raw}`"))
            }),
        }
    }
}
