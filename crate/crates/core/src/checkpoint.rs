//! Single-file checkpoint archive.
//!
//! Layout: a UTF-8 manifest terminated by a `DATA` line, then the raw
//! little-endian `f64` payload of every parameter in manifest order.
//!
//! ```text
//! TRYON-CKPT 1
//! config_hash <sha256 hex>
//! config <n>
//! <n lines of key = value>
//! params <count>
//! <name> <trainable 0|1> <d0,d1,...>
//! DATA
//! <payload>
//! ```

use std::io::Write;
use std::path::Path;

use crate::config::{hash_text, RunConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "TRYON-CKPT 1";

pub struct Checkpoint {
    pub store: ParamStore,
    pub config: RunConfig,
    pub config_hash: String,
}

pub fn save_checkpoint(store: &ParamStore, config: &RunConfig, path: &Path) -> Result<()> {
    let config_text = config.to_text();
    let mut head = String::new();
    head.push_str(MAGIC);
    head.push('\n');
    head.push_str(&format!("config_hash {}\n", hash_text(&config_text)));
    head.push_str(&format!("config {}\n", config_text.lines().count()));
    head.push_str(&config_text);
    head.push_str(&format!("params {}\n", store.len()));
    let mut payload = Vec::with_capacity(store.num_scalars() * 8);
    for (name, p) in store.iter() {
        if name.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("parameter name `{name}` contains whitespace")));
        }
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        head.push_str(&format!("{name} {} {}\n", u8::from(p.trainable), dims.join(",")));
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    head.push_str("DATA\n");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(head.as_bytes())?;
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| corrupt(path, e.to_string()))?;
    let marker = b"\nDATA\n";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| corrupt(path, "no DATA marker".into()))?;
    let head = std::str::from_utf8(&bytes[..split + 1]).map_err(|_| corrupt(path, "manifest is not UTF-8".into()))?;
    let mut payload = &bytes[split + marker.len()..];
    let mut lines = head.lines();

    if lines.next() != Some(MAGIC) {
        return Err(corrupt(path, "bad magic".into()));
    }
    let hash = field(lines.next(), "config_hash", path)?.to_string();
    let n_cfg: usize = field(lines.next(), "config", path)?
        .parse()
        .map_err(|_| corrupt(path, "bad config line count".into()))?;
    let mut config_text = String::new();
    for _ in 0..n_cfg {
        let l = lines.next().ok_or_else(|| corrupt(path, "truncated config".into()))?;
        config_text.push_str(l);
        config_text.push('\n');
    }
    if hash_text(&config_text) != hash {
        return Err(corrupt(path, "config hash mismatch".into()));
    }
    let config = RunConfig::from_text(&config_text)?;
    let n_params: usize = field(lines.next(), "params", path)?
        .parse()
        .map_err(|_| corrupt(path, "bad parameter count".into()))?;

    let mut store = ParamStore::new();
    for _ in 0..n_params {
        let l = lines.next().ok_or_else(|| corrupt(path, "truncated parameter list".into()))?;
        let mut parts = l.split(' ');
        let (Some(name), Some(flag), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(corrupt(path, format!("bad parameter line `{l}`")));
        };
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| d.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| corrupt(path, format!("bad shape for `{name}`")))?;
        let n: usize = shape.iter().product();
        if payload.len() < n * 8 {
            return Err(corrupt(path, format!("payload truncated at `{name}`")));
        }
        let data = payload[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        payload = &payload[n * 8..];
        let t = Tensor::new(&shape, data).map_err(|e| corrupt(path, format!("`{name}`: {e}")))?;
        store.insert(name, t, flag == "1")?;
    }
    if !payload.is_empty() {
        return Err(corrupt(path, "trailing bytes after payload".into()));
    }
    Ok(Checkpoint {
        store,
        config,
        config_hash: hash,
    })
}

fn field<'a>(line: Option<&'a str>, key: &str, path: &Path) -> Result<&'a str> {
    line.and_then(|l| l.strip_prefix(key))
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| corrupt(path, format!("expected `{key}` line")))
}

fn corrupt(path: &Path, reason: String) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_param_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::from_fn(&[2, 3], |i| (i as f64).sqrt() / 3.0), true).unwrap();
        s.insert("b", Tensor::scalar(-0.1), false).unwrap();
        s.insert("c.bias", Tensor::full(&[4], f64::MIN_POSITIVE), true).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let s = three_param_store();
        let cfg = RunConfig::default();
        save_checkpoint(&s, &cfg, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.store, s);
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.config_hash, cfg.hash());
        for (name, p) in s.iter() {
            let q = ck.store.get(name).unwrap();
            for (a, b) in p.value.data().iter().zip(q.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn missing_parameter_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut partial = three_param_store();
        partial = partial.filter_prefix("a");
        save_checkpoint(&partial, &RunConfig::default(), &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let err = ck.store.check_layout(&three_param_store()).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&three_param_store(), &RunConfig::default(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).err().unwrap();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(load_checkpoint(&dir.path().join("absent.ckpt")).is_err());

        save_checkpoint(&three_param_store(), &RunConfig::default(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let at = bytes.windows(8).position(|w| w == b"seed = 0").unwrap();
        bytes[at + 7] = b'1';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).err().unwrap();
        assert!(err.to_string().contains("hash"), "{err}");
    }
}
