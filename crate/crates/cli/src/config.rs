//! Flat dotted-key JSON configuration.
//!
//! A subcommand's settings are a serde struct. Its default is flattened to
//! `{"a.b": value}` pairs, then a config file and command-line overrides are
//! layered on top, and the result is rebuilt into the struct. Unknown keys
//! are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub type Flat = BTreeMap<String, Value>;

pub const RESOLVED_NAME: &str = "resolved_config.json";

pub fn flatten(v: &Value) -> Flat {
    fn walk(prefix: &str, v: &Value, out: &mut Flat) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = Flat::new();
    walk("", v, &mut out);
    out
}

pub fn unflatten(flat: &Flat) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("prefix keys are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Reads a config file. Nested objects are accepted and flattened.
pub fn read_file(path: &Path) -> Result<Flat, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if !v.is_object() {
        return Err(format!("{}: top level must be a JSON object", path.display()));
    }
    Ok(flatten(&v))
}

/// Layers `file` then `overrides` over the flattened `defaults`.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, file: &Flat, overrides: &Flat) -> Result<(T, Flat), String> {
    let mut flat = flatten(&serde_json::to_value(defaults).expect("config serializes"));
    for (k, v) in file.iter().chain(overrides) {
        if !flat.contains_key(k) {
            let known: Vec<&str> = flat.keys().map(String::as_str).collect();
            return Err(format!("unknown config key `{k}` (known: {})", known.join(", ")));
        }
        flat.insert(k.clone(), v.clone());
    }
    let cfg: T = serde_json::from_value(unflatten(&flat)).map_err(|e| format!("invalid config: {e}"))?;
    // Round trip so the record shows normalized values.
    let flat = flatten(&serde_json::to_value(&cfg).expect("config serializes"));
    Ok((cfg, flat))
}

pub fn write_resolved(dir: &Path, flat: &Flat) -> anyhow::Result<()> {
    let path = dir.join(RESOLVED_NAME);
    let text = serde_json::to_string_pretty(flat)?;
    fs::write(&path, text + "\n").map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

/// Builds an override map from `(key, value)` pairs, skipping absent values.
#[derive(Default)]
pub struct Overrides(pub Flat);

impl Overrides {
    pub fn set<V: Serialize>(&mut self, key: &str, v: Option<V>) -> &mut Self {
        if let Some(v) = v {
            self.0.insert(key.to_string(), serde_json::to_value(v).expect("override serializes"));
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    #[serde(default)]
    struct Inner {
        b: f64,
    }
    impl Default for Inner {
        fn default() -> Self {
            Self { b: 2.0 }
        }
    }
    #[derive(Serialize, Deserialize, Debug, PartialEq, Default)]
    #[serde(default)]
    struct Outer {
        a: u32,
        inner: Inner,
    }

    #[test]
    fn layered_resolution() {
        let file = flatten(&serde_json::json!({"inner": {"b": 5.0}}));
        let mut o = Overrides::default();
        o.set("a", Some(7));
        let (cfg, flat) = resolve(&Outer::default(), &file, &o.0).unwrap();
        assert_eq!(cfg, Outer { a: 7, inner: Inner { b: 5.0 } });
        assert_eq!(flat["inner.b"], serde_json::json!(5.0));
        assert_eq!(unflatten(&flat), serde_json::to_value(&cfg).unwrap());
    }

    #[test]
    fn unknown_and_mistyped_keys_rejected() {
        let bad = flatten(&serde_json::json!({"inner.c": 1}));
        assert!(resolve(&Outer::default(), &bad, &Flat::new()).unwrap_err().contains("inner.c"));
        let mistyped = flatten(&serde_json::json!({"a": "x"}));
        assert!(resolve(&Outer::default(), &mistyped, &Flat::new()).is_err());
    }
}
