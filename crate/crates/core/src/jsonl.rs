//! JSON Lines helpers shared by the loaders.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Reads every non-blank line of `path` as a `T`. Any malformed line is an
/// error carrying its 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::malformed(path, idx + 1, e.to_string()))?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(writer: W, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

pub fn to_jsonl_string<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<String> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, items)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}
