//! TOML run files: flat `[corpus]`, `[model]` and `[train]` sections laid
//! over the library defaults. Unknown sections or keys are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub corpus: Option<toml::Table>,
    pub model: Option<toml::Table>,
    pub train: Option<toml::Table>,
}

impl RunFile {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = crate::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| {
            let msg = e.message().to_string();
            Failure::Config {
                key: backticked(&msg).unwrap_or_else(|| path.display().to_string()),
                msg,
            }
        })
    }
}

fn backticked(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

/// Overlay the keys of `user` on `base`. Each key is tried on its own
/// first so that an error names the key that caused it.
pub fn merge<T>(section: &str, base: &T, user: Option<&toml::Table>, reserved: &[(&str, &str)]) -> Result<T, Failure>
where
    T: Serialize + DeserializeOwned,
{
    let Some(user) = user else {
        return roundtrip(section, toml::Table::try_from(base).map_err(|e| internal(section, e))?);
    };
    let base = toml::Table::try_from(base).map_err(|e| internal(section, e))?;
    for (k, v) in user {
        let key = format!("{section}.{k}");
        if let Some((_, why)) = reserved.iter().find(|(r, _)| r == k) {
            return Err(Failure::Config {
                key,
                msg: why.to_string(),
            });
        }
        let mut probe = base.clone();
        probe.insert(k.clone(), v.clone());
        if let Err(e) = T::deserialize(toml::Value::Table(probe)) {
            return Err(Failure::Config {
                key,
                msg: e.message().to_string(),
            });
        }
    }
    let mut merged = base;
    merged.extend(user.clone());
    roundtrip(section, merged)
}

fn roundtrip<T: DeserializeOwned>(section: &str, t: toml::Table) -> Result<T, Failure> {
    T::deserialize(toml::Value::Table(t)).map_err(|e| Failure::Config {
        key: section.to_string(),
        msg: e.message().to_string(),
    })
}

fn internal(section: &str, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(anyhow::anyhow!("cannot represent [{section}] defaults: {e}"))
}
