//! Flat `key = value` text, one pair per line. `#` starts a comment line.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap(BTreeMap<String, String>);

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses text; errors carry the 1-based line number.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(format!("line {}: empty key", i + 1));
            }
            if map.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(format!("line {}: duplicate key {key}", i + 1));
            }
        }
        Ok(Self(map))
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, String>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| format!("{key} = {v}: {e}")),
        }
    }

    pub fn required<T: FromStr>(&self, key: &str) -> Result<T, String>
    where
        T::Err: Display,
    {
        self.parsed(key)?.ok_or_else(|| format!("missing key {key}"))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, String>
    where
        T::Err: Display,
    {
        let Some(v) = self.get(key) else { return Ok(None) };
        v.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| format!("{key} = {v}: {e}")))
            .collect::<Result<Vec<T>, String>>()
            .map(Some)
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let map = KvMap::parse("# header\nseed = 7\n\nwidths= 8, 16,32\nname=dsnet\n").unwrap();
        assert_eq!(map.required::<u64>("seed").unwrap(), 7);
        assert_eq!(map.list::<usize>("widths").unwrap().unwrap(), vec![8, 16, 32]);
        assert_eq!(map.get("name"), Some("dsnet"));
        assert!(map.parsed::<u64>("missing").unwrap().is_none());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvMap::parse("just words").unwrap_err().contains("line 1"));
        assert!(KvMap::parse("a=1\na=2").unwrap_err().contains("duplicate"));
        let map = KvMap::parse("seed = x").unwrap();
        assert!(map.required::<u64>("seed").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut map = KvMap::new();
        map.set("b", 2.5);
        map.set("a", "x");
        assert_eq!(KvMap::parse(&map.to_text()).unwrap(), map);
    }
}
