//! Flat `key = value` configuration merged from defaults, the environment, a
//! config file and command-line flags, in increasing precedence.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

pub const SEED_ENV: &str = "VILOC_SEED";

/// A setting accepted by a subcommand, both as `--name` and as a file key.
pub struct Key {
    pub name: &'static str,
    /// `None` marks a required setting.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
        help,
    }
}

pub const fn required(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: None,
        help,
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug)]
pub struct Settings {
    command: &'static str,
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(
        command: &'static str,
        keys: &[Key],
        file: Option<&Path>,
        flags: BTreeMap<String, String>,
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> = keys
            .iter()
            .filter_map(|k| k.default.map(|d| (k.name.to_string(), d.to_string())))
            .collect();
        if let Ok(seed) = std::env::var(SEED_ENV) {
            if keys.iter().any(|k| k.name == "seed") {
                values.insert("seed".into(), seed);
            }
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_flat(&text)? {
                if !keys.iter().any(|key| key.name == k) {
                    return Err(CliError::Usage(format!("unknown key `{k}` for {command}")));
                }
                values.insert(k, v);
            }
        }
        values.extend(flags);
        for k in keys {
            if !values.contains_key(k.name) {
                return Err(CliError::Usage(format!("missing required setting `{}`", k.name)));
            }
        }
        Ok(Self { command, values })
    }

    pub fn str(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {name}"))
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self.str(name);
        raw.parse()
            .map_err(|e| CliError::Usage(format!("invalid value `{raw}` for {name}: {e}")))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        PathBuf::from(self.str(name))
    }

    /// The resolved configuration in the same flat format it is read from.
    pub fn snapshot(&self) -> String {
        let mut out = format!("# phoneloc {}\n", self.command);
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[Key] = &[key("epochs", "200", ""), key("lr", "0.001", ""), required("out", "")];

    #[test]
    fn precedence_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.conf");
        std::fs::write(&file, "# comment\nepochs = 10\nout = a  # trailing\n").unwrap();
        let flags = BTreeMap::from([("out".to_string(), "b".to_string())]);
        let s = Settings::resolve("train", KEYS, Some(&file), flags).unwrap();
        assert_eq!(s.get::<usize>("epochs").unwrap(), 10);
        assert_eq!(s.str("out"), "b");
        assert_eq!(s.get::<f64>("lr").unwrap(), 0.001);

        std::fs::write(&file, s.snapshot()).unwrap();
        let again = Settings::resolve("train", KEYS, Some(&file), BTreeMap::new()).unwrap();
        assert_eq!(again.snapshot(), s.snapshot());
    }

    #[test]
    fn rejects_unknown_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.conf");
        std::fs::write(&file, "bogus = 1\n").unwrap();
        assert!(matches!(
            Settings::resolve("train", KEYS, Some(&file), BTreeMap::new()),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(Settings::resolve("train", KEYS, None, BTreeMap::new()), Err(CliError::Usage(_))));
        assert!(parse_flat("no equals sign").is_err());
    }
}
