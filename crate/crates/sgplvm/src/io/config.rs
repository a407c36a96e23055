//! Flat `key = value` configuration files with `#` comments.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let Some((k, v)) = t.split_once('=') else {
                return Err(Error::Parse {
                    file: file.to_string(),
                    message: format!("line {}: expected `key = value`, got `{t}`", lineno + 1),
                });
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { map })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: bad number `{v}`"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: bad integer `{v}`"))),
        }
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        self.require(key)?
            .parse()
            .map_err(|_| Error::Config(format!("key `{key}` must be an integer")))
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(Error::Config(format!("key `{key}`: bad boolean `{v}`"))),
        }
    }

    pub fn get_str<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    /// Comma-separated list of integers, e.g. `spatial_sizes = 12,12`.
    pub fn get_usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => {
                let out: std::result::Result<Vec<usize>, _> =
                    v.split(',').map(|s| s.trim().parse()).collect();
                out.map(Some)
                    .map_err(|_| Error::Config(format!("key `{key}`: bad integer list `{v}`")))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_lists() {
        let c = Config::parse(
            "# comment\n d_latent = 4 \nspatial_sizes = 12, 12\noptimizer=adam\n",
            "test",
        )
        .unwrap();
        assert_eq!(c.require_usize("d_latent").unwrap(), 4);
        assert_eq!(c.get_usize_list("spatial_sizes").unwrap().unwrap(), vec![12, 12]);
        assert_eq!(c.get_str("optimizer", "lbfgs"), "adam");
        assert_eq!(c.get_f64("missing", 2.5).unwrap(), 2.5);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Config::parse("not a pair\n", "test").is_err());
    }
}
