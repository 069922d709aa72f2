//! Report writers. JSON is pretty-printed with a trailing newline; floats use
//! the shortest round-trip representation, so equal inputs give equal bytes.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

pub fn json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, json_string(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.csv` and echoes the JSON.
pub fn write_report<J: Serialize, C: Serialize>(dir: &Path, stem: &str, json: &J, rows: &[C]) -> Result<()> {
    ensure_dir(dir)?;
    let json_path = dir.join(format!("{stem}.json"));
    write_json(&json_path, json)?;
    write_csv(&dir.join(format!("{stem}.csv")), rows)?;
    print!("{}", json_string(json)?);
    Ok(())
}

pub fn display(path: &Path) -> String {
    path.display().to_string()
}
