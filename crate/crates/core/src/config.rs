//! Plain `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Values are parsed on
//! demand by the typed getters; every key that is read is marked as consumed
//! so callers can reject typos with [`KeyValues::reject_unknown`].

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self {
            entries,
            used: RefCell::default(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply `key=value` overrides on top of the parsed entries.
    pub fn override_with<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for pair in pairs {
            let pair = pair.as_ref();
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override: expected key=value, got `{pair}`")))?;
            self.entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v.as_str())
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key}: {e}"))),
        }
    }

    /// Overwrite `slot` when `key` is present.
    pub fn set<T>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Ranges are written `lo,hi`.
    pub fn set_range(&self, key: &str, slot: &mut [f64; 2]) -> Result<()> {
        if let Some(v) = self.raw(key) {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(Error::Config(format!("{key}: expected `lo,hi`, got `{v}`")));
            }
            for (dst, p) in slot.iter_mut().zip(&parts) {
                *dst = p
                    .parse()
                    .map_err(|e| Error::Config(format!("{key}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn set_list<T>(&self, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = self.raw(key) {
            *slot = v
                .split(',')
                .map(|p| p.trim().parse::<T>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("{key}: {e}")))?;
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_typed_values_and_ranges() {
        let kv = KeyValues::parse("# comment\nphysics_hz = 500\nfriction=0.1, 2.0\n\nname=walk\n").unwrap();
        let mut hz = 0u32;
        kv.set("physics_hz", &mut hz).unwrap();
        assert_eq!(hz, 500);
        let mut range = [0.0; 2];
        kv.set_range("friction", &mut range).unwrap();
        assert_eq!(range, [0.1, 2.0]);
        assert!(kv.reject_unknown().is_err());
        assert_eq!(kv.raw("name"), Some("walk"));
        kv.reject_unknown().unwrap();
    }

    #[test]
    fn rejects_garbage() {
        assert!(KeyValues::parse("novalue").is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
        let kv = KeyValues::parse("x=abc").unwrap();
        assert!(kv.get::<f64>("x").is_err());
    }

    #[test]
    fn overrides_replace_entries() {
        let mut kv = KeyValues::parse("a=1
b=2").unwrap();
        kv.override_with(&["b=3", "c = 4"]).unwrap();
        assert_eq!((kv.raw("b"), kv.raw("c")), (Some("3"), Some("4")));
        assert!(kv.override_with(&["oops"]).is_err());
    }
}
