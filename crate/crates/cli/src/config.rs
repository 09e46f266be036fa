//! Config resolution: defaults, then the TOML file, then `--set` overrides,
//! then dedicated flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ticft::experiment::RunConfig;
use toml::{Table, Value};

use crate::ConfigError;

/// Parses the right-hand side of `key=value` as a TOML value, falling back to
/// a bare string (`task=i2v`).
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(ConfigError(format!("malformed key '{key}'")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!(ConfigError(format!("'{part}' in '{key}' is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override '{spec}' is not key=value")))?;
    set_path(table, key.trim(), parse_value(raw.trim()))
}

pub fn resolve(file: Option<&Path>, overrides: &[String], flags: &[(&str, Value)]) -> Result<RunConfig> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            text.parse::<Table>()
                .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    for (key, value) in flags {
        set_path(&mut table, key, value.clone())?;
    }
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| ConfigError(e.to_string()).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_parse_as_toml_or_string() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("0.5"), Value::Float(0.5));
        assert_eq!(parse_value("true"), Value::Boolean(true));
        assert_eq!(parse_value("i2v"), Value::String("i2v".into()));
        assert_eq!(parse_value("\"a b\""), Value::String("a b".into()));
    }

    #[test]
    fn later_sources_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 1\n[model]\nd_model = 32\n").unwrap();
        let cfg = resolve(Some(&path), &["seed=2".into(), "train.lr=0.01".into()], &[("seed", Value::Integer(3))]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.train.lr, 0.01);
    }

    #[test]
    fn bad_input_is_config_error() {
        for o in ["nokey", "bogus=1", "model.d_model=0", "seed.x=1", "a..b=1"] {
            let err = resolve(None, &[o.to_string()], &[]).unwrap_err();
            assert!(err.downcast_ref::<ConfigError>().is_some(), "{o}: {err}");
        }
    }

    #[test]
    fn echo_reparses() {
        let cfg = resolve(None, &["task=style-transfer".into(), "buffer=2".into()], &[]).unwrap();
        let text = to_toml(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
