//! Flat key-value configuration files: `key = value` lines, `#` or `;`
//! comments, optional `[section]` headers (accepted and ignored so common
//! INI files parse). Command-line flags override file values, which override
//! built-in defaults. Unknown keys are rejected so a typo cannot silently
//! fall back to a default.

use rfl_core::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

#[derive(Default)]
pub struct ConfigMap {
    origin: String,
    values: BTreeMap<String, String>,
    queried: BTreeSet<String>,
}

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

impl ConfigMap {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = normalize(k);
            if key.is_empty() {
                return Err(Error::Config(format!(
                    "{}:{}: empty key",
                    path.display(),
                    lineno + 1
                )));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!(
                    "{}:{}: duplicate key `{key}`",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        Ok(ConfigMap {
            origin: path.display().to_string(),
            values,
            queried: BTreeSet::new(),
        })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        let k = normalize(key);
        self.queried.insert(k.clone());
        self.values.get(&k).cloned()
    }

    /// Flag beats file beats default.
    pub fn resolve<T>(&mut self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = flag {
            self.take(key);
            return Ok(v);
        }
        match self.take(key) {
            Some(text) => text.parse().map_err(|e| {
                Error::Config(format!(
                    "{}: key `{key}`: cannot parse `{text}`: {e}",
                    self.origin
                ))
            }),
            None => Ok(default),
        }
    }

    /// A flag given on the command line forces true; otherwise the file
    /// decides; otherwise false.
    pub fn resolve_flag(&mut self, flag: bool, key: &str) -> Result<bool> {
        if flag {
            self.take(key);
            return Ok(true);
        }
        match self.take(key) {
            Some(text) => match normalize(&text).as_str() {
                "1" | "true" | "yes" | "on" => Ok(true),
                "0" | "false" | "no" | "off" => Ok(false),
                other => Err(Error::Config(format!(
                    "{}: key `{key}`: expected a boolean, got `{other}`",
                    self.origin
                ))),
            },
            None => Ok(false),
        }
    }

    /// Call after resolving every known key; any remaining key is a typo.
    pub fn finish(self) -> Result<()> {
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !self.queried.contains(*k))
            .map(|s| s.as_str())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{}: unknown keys: {}",
                self.origin,
                unknown.join(", ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn map(text: &str) -> Result<ConfigMap> {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        ConfigMap::load(f.path())
    }

    #[test]
    fn parses_comments_sections_and_values() {
        let mut m = map(
            "# top\n[training]\nbatch-size = 4  ; inline\n\nlr = 2e-5\nshared_backbone = yes\n",
        )
        .unwrap();
        assert_eq!(m.resolve::<usize>(None, "batch_size", 10).unwrap(), 4);
        assert_eq!(m.resolve::<f64>(None, "lr", 1e-4).unwrap(), 2e-5);
        assert!(m.resolve_flag(false, "shared_backbone").unwrap());
        m.finish().unwrap();
    }

    #[test]
    fn flag_overrides_file_overrides_default() {
        let mut m = map("lr = 2e-5\n").unwrap();
        assert_eq!(m.resolve(Some(7.0), "lr", 1e-4).unwrap(), 7.0);
        let mut m = map("lr = 2e-5\n").unwrap();
        assert_eq!(m.resolve::<f64>(None, "lr", 1e-4).unwrap(), 2e-5);
        let mut m = map("").unwrap();
        assert_eq!(m.resolve::<f64>(None, "lr", 1e-4).unwrap(), 1e-4);
    }

    #[test]
    fn rejects_malformed_duplicate_unknown_and_bad_bool() {
        assert!(map("just some words\n").is_err());
        assert!(map("a = 1\na = 2\n").is_err());

        let mut m = map("lr = 1\nmystery = 3\n").unwrap();
        m.resolve::<f64>(None, "lr", 0.0).unwrap();
        assert!(m.finish().is_err());

        let mut m = map("flag = maybe\n").unwrap();
        assert!(m.resolve_flag(false, "flag").is_err());
    }

    #[test]
    fn unparsable_number_reports_key_and_value() {
        let mut m = map("batch_size = many\n").unwrap();
        let err = m.resolve::<usize>(None, "batch_size", 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("batch_size") && msg.contains("many"), "{msg}");
    }
}
