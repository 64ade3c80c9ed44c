//! Flag parsing helpers and config-file merging.
//!
//! A JSON config file may hold one section per subcommand with keys named
//! after the flags. Resolution order: command-line flag, then config file,
//! then built-in default; the manifest records the resolved values.

use anyhow::{anyhow, bail, Context, Result};
use serde_json::Value;

/// Parse "W,H,D" or a single isotropic value.
pub fn parse_triple(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let vals: Vec<usize> = parts
        .iter()
        .map(|p| p.parse::<usize>().with_context(|| format!("bad integer `{p}`")))
        .collect::<Result<_>>()?;
    match vals.as_slice() {
        [a] => Ok([*a, *a, *a]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => bail!("expected one or three comma-separated integers, got `{s}`"),
    }
}

/// Parse a list of isotropic grid sizes: "5,8,10,15".
pub fn parse_grid_list(s: &str) -> Result<Vec<[usize; 3]>> {
    let vals: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad integer `{p}`")))
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        bail!("empty grid list");
    }
    Ok(vals.into_iter().map(|g| [g, g, g]).collect())
}

/// One subcommand's section of the config file.
#[derive(Clone, Copy)]
pub struct Section<'a>(pub Option<&'a Value>);

impl<'a> Section<'a> {
    fn get(&self, key: &str) -> Option<&'a Value> {
        self.0.and_then(|v| v.get(key))
    }

    pub fn f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(Value::as_f64)
    }

    pub fn u64(&self, key: &str) -> Option<u64> {
        self.get(key).and_then(Value::as_u64)
    }

    pub fn usize(&self, key: &str) -> Option<usize> {
        self.get(key).and_then(Value::as_u64).map(|v| v as usize)
    }

    pub fn bool(&self, key: &str) -> Option<bool> {
        self.get(key).and_then(Value::as_bool)
    }

    pub fn string(&self, key: &str) -> Option<String> {
        self.get(key).and_then(Value::as_str).map(str::to_string)
    }

    pub fn triple(&self, key: &str) -> Result<Option<[usize; 3]>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => parse_triple(s).map(Some),
            Some(Value::Array(a)) => {
                let vals: Vec<usize> = a
                    .iter()
                    .map(|v| {
                        v.as_u64()
                            .map(|x| x as usize)
                            .ok_or_else(|| anyhow!("non-integer in `{key}`"))
                    })
                    .collect::<Result<_>>()?;
                match vals.as_slice() {
                    [x] => Ok(Some([*x, *x, *x])),
                    [a, b, c] => Ok(Some([*a, *b, *c])),
                    _ => bail!("`{key}` must hold 1 or 3 integers"),
                }
            }
            Some(other) => bail!("`{key}` must be a string or array, got {other}"),
        }
    }
}

/// Load the per-subcommand section from an optional config file.
pub fn load_section(config_path: Option<&std::path::Path>, subcommand: &str) -> Result<Value> {
    match config_path {
        None => Ok(Value::Null),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let root: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))?;
            Ok(root.get(subcommand).cloned().unwrap_or(Value::Null))
        }
    }
}

/// Resolve flag-over-config-over-default.
pub fn pick<T>(flag: Option<T>, config: Option<T>, default: T) -> T {
    flag.or(config).unwrap_or(default)
}
