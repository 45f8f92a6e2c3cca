//! Shared on-disk layout for model and mixture checkpoints: one line of JSON
//! (the manifest), a newline, then raw little-endian f64 blobs in the order
//! the manifest declares. Nothing may follow the last blob.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, SimNetError};
use crate::tensor::{read_f64_le, write_f64_le};

pub(crate) fn write(path: &Path, manifest: &impl Serialize, blobs: &[&[f64]]) -> Result<()> {
    let file = File::create(path).map_err(|e| SimNetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let line = serde_json::to_string(manifest)?;
    let io = |e| SimNetError::io(path, e);
    w.write_all(line.as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    for blob in blobs {
        write_f64_le(&mut w, blob).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reader positioned after the manifest line.
pub(crate) struct BlobReader {
    inner: BufReader<File>,
    path: std::path::PathBuf,
}

pub(crate) fn read<T: DeserializeOwned>(path: &Path) -> Result<(T, BlobReader)> {
    let file = File::open(path).map_err(|e| SimNetError::io(path, e))?;
    let mut inner = BufReader::new(file);
    let mut line = Vec::new();
    inner
        .read_until(b'\n', &mut line)
        .map_err(|e| SimNetError::io(path, e))?;
    if line.last() != Some(&b'\n') {
        return Err(SimNetError::format(path, "missing manifest line"));
    }
    let manifest = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| SimNetError::format(path, format!("bad manifest: {e}")))?;
    Ok((
        manifest,
        BlobReader {
            inner,
            path: path.to_path_buf(),
        },
    ))
}

impl BlobReader {
    pub(crate) fn blob(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        read_f64_le(&mut self.inner, len).map_err(|_| {
            SimNetError::format(&self.path, format!("blob `{name}` truncated, expected {} bytes", len * 8))
        })
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        let mut rest = [0u8; 1];
        match self.inner.read(&mut rest) {
            Ok(0) => Ok(()),
            Ok(_) => Err(SimNetError::format(&self.path, "trailing bytes after last blob")),
            Err(e) => Err(SimNetError::io(&self.path, e)),
        }
    }
}
