//! Line-delimited JSON with sorted keys.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// One JSON object per line, keys sorted, no trailing whitespace.
pub fn to_line<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut out: W, items: &[T]) -> Result<()> {
    for item in items {
        writeln!(out, "{}", to_line(item)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses every non-blank line; errors carry 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: i + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Like [`read_jsonl`] but keeps going past bad lines, returning them separately.
pub fn read_jsonl_lenient<T: DeserializeOwned, R: BufRead>(
    reader: R,
) -> Result<(Vec<T>, Vec<Error>)> {
    let mut items = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(item) => items.push(item),
            Err(e) => bad.push(Error::Schema {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    Ok((items, bad))
}
