//! Flat `key = value` settings grouped under `[section]` headers.
//!
//! Every key lives in exactly one section and can be overridden by the
//! command-line flag of the same name. Blank lines and lines starting with
//! `#` or `;` are ignored.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use llpfc::train::content_hash;

use crate::CliError;

pub struct Key {
    pub section: &'static str,
    pub name: &'static str,
    pub default: Option<&'static str>,
    /// Output locations do not change what is computed, so they stay out of the hash.
    pub hashed: bool,
}

const fn key(section: &'static str, name: &'static str, default: Option<&'static str>) -> Key {
    Key {
        section,
        name,
        default,
        hashed: true,
    }
}

pub const KEYS: &[Key] = &[
    key("run", "seed", Some("0")),
    Key {
        section: "run",
        name: "out",
        default: None,
        hashed: false,
    },
    key("data", "dataset", None),
    key("data", "test", None),
    key("data", "bags", None),
    key("data", "model", None),
    key("bags", "bag-size", Some("64")),
    key("bags", "n-bags", Some("60")),
    key("train", "mode", Some("uniform")),
    key("train", "weights", Some("uniform")),
    key("train", "epochs", Some("100")),
    key("train", "batch-size", Some("64")),
    key("train", "lr", Some("0.01")),
    key("train", "momentum", Some("0.9")),
    key("train", "weight-decay", Some("0")),
    key("train", "decay-epochs", None),
    key("train", "decay-factor", Some("0.1")),
    key("train", "regroup-every", Some("20")),
    key("train", "hidden", None),
    key("train", "sigma", None),
    key("train", "ideal-retries", Some("50")),
    key("train", "bags-per-minibatch", Some("2")),
    key("train", "track-train-accuracy", Some("false")),
    Key {
        section: "train",
        name: "dump-groups",
        default: None,
        hashed: false,
    },
    key("verify", "trials", Some("10000")),
];

fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Effective settings: defaults, then the config file, then flags.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    pub fn defaults() -> Self {
        let values = KEYS
            .iter()
            .filter_map(|k| k.default.map(|d| (k.name, d.to_string())))
            .collect();
        Settings { values }
    }

    /// Parses a config file. Unknown keys, keys under the wrong section and
    /// repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let at = |msg: String| CliError::Config(format!("line {}: {msg}", n + 1));
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|k| k.section == name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, found {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let spec = lookup(k).ok_or_else(|| at(format!("unknown key {k:?}")))?;
            match &section {
                Some(s) if s == spec.section => {}
                Some(s) => return Err(at(format!("key {k:?} belongs in [{}], not [{s}]", spec.section))),
                None => return Err(at(format!("key {k:?} appears before any section"))),
            }
            if values.insert(spec.name, v.to_string()).is_some() {
                return Err(at(format!("key {k:?} set twice")));
            }
        }
        Ok(Settings { values })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Later values win.
    pub fn merge(&mut self, other: Settings) {
        self.values.extend(other.values);
    }

    pub fn set(&mut self, name: &str, value: String) -> Result<(), CliError> {
        let spec = lookup(name).ok_or_else(|| CliError::Config(format!("unknown key {name:?}")))?;
        self.values.insert(spec.name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }

    pub fn require(&self, name: &str) -> Result<&str, CliError> {
        self.get(name)
            .ok_or_else(|| CliError::Config(format!("missing required setting {name:?}")))
    }

    pub fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        self.require(name).map(PathBuf::from)
    }

    pub fn value<T: FromStr>(&self, name: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.require(name)?;
        raw.parse()
            .map_err(|e| CliError::Config(format!("bad value {raw:?} for {name}: {e}")))
    }

    /// Comma-separated list; absent or empty means an empty list.
    pub fn list<T: FromStr>(&self, name: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let Some(raw) = self.get(name) else {
            return Ok(None);
        };
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::Config(format!("bad entry {s:?} in {name}: {e}")))
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    /// The settings that determine results, as `section.key -> value`.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.values
            .iter()
            .filter_map(|(name, v)| {
                let spec = lookup(name)?;
                spec.hashed.then(|| (format!("{}.{name}", spec.section), v.clone()))
            })
            .collect()
    }

    pub fn hash(&self) -> String {
        content_hash(&self.echo()).expect("string maps always serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let s = Settings::parse("# run\n[run]\nseed = 7\n\n[train]\nmode=approx\n; x\nlr = 0.5\n").unwrap();
        assert_eq!(s.get("seed"), Some("7"));
        assert_eq!(s.get("mode"), Some("approx"));
        assert_eq!(s.value::<f64>("lr").unwrap(), 0.5);
    }

    #[test]
    fn rejects_misplaced_and_unknown_keys() {
        for bad in [
            "seed = 1\n",
            "[train]\nseed = 1\n",
            "[run]\ncolour = red\n",
            "[nowhere]\n",
            "[run]\nseed 1\n",
            "[run]\nseed = 1\nseed = 2\n",
        ] {
            assert!(matches!(Settings::parse(bad), Err(CliError::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn hash_ignores_output_paths() {
        let mut a = Settings::defaults();
        let mut b = Settings::defaults();
        a.set("out", "x".into()).unwrap();
        b.set("out", "y".into()).unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "3".into()).unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn lists() {
        let mut s = Settings::defaults();
        assert_eq!(s.list::<usize>("hidden").unwrap(), None);
        s.set("hidden", "8, 4".into()).unwrap();
        assert_eq!(s.list::<usize>("hidden").unwrap(), Some(vec![8, 4]));
        s.set("hidden", "8,x".into()).unwrap();
        assert!(s.list::<usize>("hidden").is_err());
    }
}
