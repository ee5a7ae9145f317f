//! `key=value` edits of a run config, addressed by dotted TOML path.

use anyhow::{anyhow, bail, Context, Result};
use cpt_core::RunConfig;
use toml::{Table, Value};

/// A single `section.field=value` assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl Override {
    /// Parses `key=value`. The value is read as a TOML literal when possible
    /// and as a bare string otherwise, so `ordering=time` works unquoted.
    pub fn parse(text: &str) -> Result<Self> {
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key=value, got `{text}`"))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            bail!("bad key in `{text}`");
        }
        Ok(Self {
            key: key.to_string(),
            value: literal(raw.trim()),
        })
    }
}

impl std::fmt::Display for Override {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.value {
            Value::String(s) => write!(f, "{}={}", self.key, s),
            v => write!(f, "{}={}", self.key, v),
        }
    }
}

pub(crate) fn literal(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies `edits` in order. The key `preset` applies a named preset;
/// anything else is written into the config tree, which is then re-parsed and
/// validated so errors name the offending field.
pub fn apply(config: &RunConfig, edits: &[Override]) -> Result<RunConfig> {
    let mut cfg = config.clone();
    for edit in edits {
        if edit.key == "preset" {
            let name = match &edit.value {
                Value::String(s) => s.clone(),
                v => v.to_string(),
            };
            cfg.apply_preset(&name)?;
            continue;
        }
        let mut tree: Table = toml::from_str(&cfg.to_toml()).context("config does not round-trip through TOML")?;
        let mut parts: Vec<&str> = edit.key.split('.').collect();
        let leaf = parts.pop().expect("key is non-empty");
        let mut node = &mut tree;
        for part in parts {
            let entry = node.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| anyhow!("`{}`: `{part}` is not a section", edit.key))?;
        }
        node.insert(leaf.to_string(), edit.value.clone());
        cfg = RunConfig::from_toml(&toml::to_string(&tree)?).with_context(|| format!("applying `{edit}`"))?;
    }
    Ok(cfg)
}

/// Cartesian product of `key=v1,v2,...` axes, in row-major order.
pub fn grid(axes: &[String]) -> Result<Vec<Vec<Override>>> {
    let mut points: Vec<Vec<Override>> = vec![Vec::new()];
    for axis in axes {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key=v1,v2,..., got `{axis}`"))?;
        let options = values
            .split(',')
            .map(|v| Override::parse(&format!("{key}={v}")))
            .collect::<Result<Vec<_>>>()?;
        points = points
            .into_iter()
            .flat_map(|p| {
                options.iter().map(move |o| {
                    let mut p = p.clone();
                    p.push(o.clone());
                    p
                })
            })
            .collect();
    }
    Ok(points)
}
