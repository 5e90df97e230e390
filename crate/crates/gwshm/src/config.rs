//! Scenario files: TOML with the same field names as [`PlateScenario`], plus dotted
//! `key=value` overrides applied before validation.

use std::fs;
use std::path::Path;

use gwshm_core::scenario::PlateScenario;
use toml::Value;

use crate::error::{CliError, CliResult};

/// Reads, overrides and validates a scenario. Without a path the built-in testbed is used.
pub fn load_scenario(path: Option<&Path>, overrides: &[String]) -> CliResult<PlateScenario> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("scenario {}: {e}", p.display())))?;
            parse_document(&text).map_err(|e| CliError::Scenario(format!("{}: {e}", p.display())))?
        }
        None => Value::try_from(PlateScenario::testbed()).map_err(|e| CliError::Format(e.to_string()))?,
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let s: PlateScenario = doc.try_into().map_err(|e: toml::de::Error| CliError::Scenario(e.message().to_string()))?;
    s.validated().map_err(|e| CliError::Scenario(e.to_string()))
}

/// Parses scenario text; errors carry 1-based line and column.
pub fn parse_document(text: &str) -> Result<Value, String> {
    let table: toml::Table = toml::from_str(text).map_err(|e| locate(text, &e))?;
    toml::from_str::<PlateScenario>(text).map_err(|e| locate(text, &e))?;
    Ok(Value::Table(table))
}

pub fn parse_scenario(text: &str) -> Result<PlateScenario, String> {
    let s: PlateScenario = toml::from_str(text).map_err(|e| locate(text, &e))?;
    s.validated().map_err(|e| e.to_string())
}

fn locate(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            format!("line {line}, column {col}: {}", e.message())
        }
        None => e.message().to_string(),
    }
}

pub fn to_toml(s: &PlateScenario) -> CliResult<String> {
    toml::to_string_pretty(s).map_err(|e| CliError::Format(e.to_string()))
}

/// Applies `a.b.0.c=value`. Numeric segments index arrays; the value is parsed as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(doc: &mut Value, spec: &str) -> CliResult<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{spec}`")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Usage(format!("--set `{spec}` has an empty key")));
    }
    let value = parse_value(raw.trim());
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Table(t) => {
                if last {
                    t.insert((*part).to_string(), value);
                    return Ok(());
                }
                t.entry((*part).to_string()).or_insert_with(|| Value::Table(toml::Table::new()))
            }
            Value::Array(a) => {
                let idx: usize = part.parse().map_err(|_| CliError::Usage(format!("--set `{key}`: `{part}` is not an array index")))?;
                let len = a.len();
                let slot = a.get_mut(idx).ok_or_else(|| CliError::Usage(format!("--set `{key}`: index {idx} out of range ({len} entries)")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Usage(format!("--set `{key}`: `{part}` is not inside a table or array"))),
        };
    }
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
