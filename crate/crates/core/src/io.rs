//! File helpers: every result file is written to a temporary sibling and then
//! renamed into place, so readers never observe a truncated file.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{KtError, Result};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| KtError::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| KtError::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| KtError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| KtError::io(&tmp, e))?;
    f.sync_all().map_err(|e| KtError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| KtError::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| KtError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Serializes rows with the `csv` writer into memory, then writes atomically.
pub fn write_csv_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| KtError::io(path, std::io::Error::other(e));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| KtError::io(path, std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)
}
