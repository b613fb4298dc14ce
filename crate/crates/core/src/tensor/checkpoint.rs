//! Checkpoint files: a text manifest plus one little-endian raw float blob.
//!
//! ```text
//! AUXDEPTH-CKPT v1
//! <name> <dim>x<dim>... <f32|f64> <byte offset>
//! ```
//!
//! The blob lives next to the manifest at `<manifest path>.bin`. Values are
//! converted to the build's [`Real`] on load.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ParamStore, Real, Tensor, REAL_DTYPE};
use crate::error::{Error, Result};

pub const HEADER: &str = "AUXDEPTH-CKPT v1";

pub fn blob_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

pub fn save(path: &Path, params: &ParamStore) -> Result<()> {
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    let mut blob = Vec::new();
    for (name, t) in params.iter() {
        if name.chars().any(char::is_whitespace) || name.is_empty() {
            return Err(Error::Checkpoint(format!("invalid tensor name `{name}`")));
        }
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        writeln!(manifest, "{name} {} {REAL_DTYPE} {}", dims.join("x"), blob.len())
            .expect("write to string");
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, manifest).map_err(|e| Error::io(path, e))?;
    let bp = blob_path(path);
    fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bp = blob_path(path);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    parse(&text, &blob)
}

pub fn parse(manifest: &str, blob: &[u8]) -> Result<ParamStore> {
    let mut lines = manifest.lines();
    if lines.next().map(str::trim) != Some(HEADER) {
        return Err(Error::Checkpoint(format!("missing `{HEADER}` header")));
    }
    let mut store = ParamStore::new();
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Checkpoint(format!("manifest line {}: {msg}", n + 2));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, dims, dtype, offset] = fields[..] else {
            return Err(bad("expected `name shape dtype offset`"));
        };
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().map_err(|_| bad("bad shape")))
            .collect::<Result<_>>()?;
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        let numel: usize = shape.iter().product();
        let width = match dtype {
            "f32" => 4,
            "f64" => 8,
            _ => return Err(bad("dtype must be f32 or f64")),
        };
        let bytes = blob
            .get(offset..offset + numel * width)
            .ok_or_else(|| bad("blob too short"))?;
        let data: Vec<Real> = bytes
            .chunks_exact(width)
            .map(|c| match width {
                4 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as Real,
                _ => f64::from_le_bytes(c.try_into().expect("8 bytes")) as Real,
            })
            .collect();
        store.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamStore::new();
        let mut rng = Rng::seed(5);
        params.insert("a.weight", rng.tensor_uniform(&[2, 3, 3, 3], -1.0, 1.0));
        params.insert("b", rng.tensor_uniform(&[7], -1.0, 1.0));
        let path = dir.path().join("model.ckpt");
        save(&path, &params).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("AUXDEPTH-CKPT v1\n"));
        assert!(text.contains(&format!("a.weight 2x3x3x3 {REAL_DTYPE} 0")));
        assert_eq!(load(&path).unwrap(), params);
    }

    #[test]
    fn rejects_missing_header_and_short_blob() {
        assert!(parse("x 1 f64 0\n", &[]).is_err());
        assert!(parse("AUXDEPTH-CKPT v1\nx 2 f64 0\n", &[0u8; 8]).is_err());
        let ok = parse("AUXDEPTH-CKPT v1\nx 2 f32 0\n", &[0u8; 8]).unwrap();
        assert_eq!(ok.get("x").unwrap().data(), &[0.0, 0.0]);
    }
}
