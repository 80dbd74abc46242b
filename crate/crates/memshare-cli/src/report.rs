//! Report file plumbing: every emitted report embeds the tool version, the
//! resolved config, and the seed, followed by a byte-deterministic data
//! section.

use std::fs;
use std::path::Path;

use memshare_core::Result;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes a CSV report: `#`-prefixed header lines, then the data section.
pub fn write_csv_report(
    path: &Path,
    seed: u64,
    config: &serde_json::Value,
    data: &str,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# tool: memshare v{TOOL_VERSION}\n"));
    out.push_str(&format!("# seed: {seed}\n"));
    out.push_str(&format!("# config: {config}\n"));
    out.push_str(data);
    fs::write(path, out)?;
    Ok(())
}

/// Wraps a payload into the standard JSON report envelope.
pub fn json_report(
    seed: u64,
    config: &serde_json::Value,
    payload_key: &str,
    payload: serde_json::Value,
) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    map.insert("tool".into(), "memshare".into());
    map.insert("version".into(), TOOL_VERSION.into());
    map.insert("seed".into(), seed.into());
    map.insert("config".into(), config.clone());
    map.insert(payload_key.into(), payload);
    serde_json::Value::Object(map)
}

pub fn write_json_report(
    path: &Path,
    seed: u64,
    config: &serde_json::Value,
    payload_key: &str,
    payload: serde_json::Value,
) -> Result<()> {
    let value = json_report(seed, config, payload_key, payload);
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
