//! Dataset manifests: one image path per line, `#` starts a comment.
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let dir = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                dir.join(p)
            }
        })
        .collect())
}

/// Writes entries relative to the manifest directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[PathBuf]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for e in entries {
        let shown = e.strip_prefix(dir).unwrap_or(e);
        text.push_str(&shown.to_string_lossy());
        text.push('\n');
    }
    crate::tensor::write_atomic(path, text.as_bytes())
}
