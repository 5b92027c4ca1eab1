//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! `b"BGPT"`, `u32` version, `u32` config length, config text (UTF-8 TOML),
//! then per tensor in name order: `u32` name length, name, `u32` rank,
//! `u64` dims, `u8` dtype tag, raw scalars.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::params::Parameters;
use crate::tensor::{Precision, Scalar, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BGPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(params: &Parameters<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut config = params.config;
    config.precision = T::PRECISION;
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, t) in &params.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &dim in &t.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        out.push(T::PRECISION.tag());
        for v in &t.data {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.at,
                self.buf.len() - self.at
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.at == self.buf.len()
    }
}

fn read_tensor<T: Scalar, S: Scalar>(r: &mut Reader, shape: &[usize], name: &str) -> Result<Tensor<T>> {
    let len: usize = shape.iter().product();
    let bytes = r.take(len * S::BYTES, name)?;
    let data = bytes
        .chunks_exact(S::BYTES)
        .map(|c| T::from_f64_lossy(S::read_le(c).as_f64()))
        .collect();
    Ok(Tensor::from_vec(shape, data))
}

/// Decodes a checkpoint, converting scalars to `T` if stored in the other
/// precision. Shapes are validated against the embedded config.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Parameters<T>> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let n = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(n, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config text: {e}")))?;
    let mut config = ModelConfig::from_text(text)?;
    let mut tensors = BTreeMap::new();
    while !r.done() {
        let n = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(n, "tensor name")?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let tag = r.take(1, "dtype")?[0];
        let t = match Precision::from_tag(tag) {
            Some(Precision::Single) => read_tensor::<T, f32>(&mut r, &shape, &name)?,
            Some(Precision::Double) => read_tensor::<T, f64>(&mut r, &shape, &name)?,
            None => return Err(Error::Checkpoint(format!("unknown dtype tag {tag} for `{name}`"))),
        };
        tensors.insert(name, t);
    }
    config.precision = T::PRECISION;
    let params = Parameters { config, tensors };
    let expected = super::params::tensor_specs(&config).len();
    if params.tensors.len() < expected {
        let missing = super::params::tensor_specs(&config)
            .into_iter()
            .find(|s| !params.tensors.contains_key(&s.0))
            .map(|s| s.0)
            .unwrap_or_default();
        return Err(Error::Truncated(format!("file ends before tensor `{missing}`")));
    }
    params.check_shapes()?;
    Ok(params)
}

/// Reads only the header of a checkpoint file and returns the stored
/// config, including the precision the tensors were written in.
pub fn read_checkpoint_config(path: &Path) -> Result<ModelConfig> {
    let mut head = [0u8; 12];
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    f.read_exact(&mut head).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated("file shorter than the header".into()),
        _ => Error::io(path, e),
    })?;
    if &head[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let n = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut text = vec![0u8; n];
    f.read_exact(&mut text).map_err(|_| Error::Truncated("file ends inside the config".into()))?;
    let text = String::from_utf8(text).map_err(|e| Error::Checkpoint(format!("config text: {e}")))?;
    ModelConfig::from_text(&text)
}

pub fn save_checkpoint<T: Scalar>(params: &Parameters<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Parameters<T>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

/// Loads a checkpoint and checks it against an expected config, naming the
/// first tensor whose shape differs.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<Parameters<T>> {
    let params = load_checkpoint::<T>(path)?;
    let mut want = *expected;
    want.precision = T::PRECISION;
    let declared = Parameters::<T> {
        config: want,
        tensors: params.tensors.clone(),
    };
    declared.check_shapes()?;
    Ok(declared)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::VocabSizes;
    use crate::net::init_model;

    fn cfg(d: usize) -> ModelConfig {
        ModelConfig {
            d,
            n_layers: 1,
            n_heads: 2,
            max_len: 6,
            head_hidden: 10,
            ffn_mult: 2,
            vocab: VocabSizes { n_d: 7, n_t: 8, n_l: 5, n_e: 9, n_b: 4 },
            dropout: 0.0,
            precision: Precision::Double,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = init_model::<f64>(&cfg(4), 11).unwrap();
        let back = decode_checkpoint::<f64>(&encode_checkpoint(&p)).unwrap();
        assert!(p.bitwise_eq(&back));
        assert_eq!(back.config, p.config);
        let p32 = init_model::<f32>(&cfg(4), 11).unwrap();
        assert!(p32.bitwise_eq(&decode_checkpoint::<f32>(&encode_checkpoint(&p32)).unwrap()));
    }

    #[test]
    fn header_layout() {
        let p = init_model::<f32>(&cfg(4), 0).unwrap();
        let b = encode_checkpoint(&p);
        assert_eq!(&b[..4], b"BGPT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), FORMAT_VERSION);
        let n = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let first = &b[12 + n..];
        let name_len = u32::from_le_bytes(first[..4].try_into().unwrap()) as usize;
        // lexicographically first tensor
        assert_eq!(&first[4..4 + name_len], b"embed.day");
    }

    #[test]
    fn truncation_detected() {
        let p = init_model::<f32>(&cfg(4), 0).unwrap();
        let b = encode_checkpoint(&p);
        for cut in [3, 10, b.len() / 2, b.len() - 1] {
            let err = decode_checkpoint::<f32>(&b[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let p = init_model::<f32>(&cfg(4), 0).unwrap();
        let mut b = encode_checkpoint(&p);
        b[4] = 9;
        assert!(decode_checkpoint::<f32>(&b).unwrap_err().to_string().contains("version"));
        b[0] = b'X';
        assert!(decode_checkpoint::<f32>(&b).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn header_config_keeps_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&init_model::<f32>(&cfg(4), 0).unwrap(), &path).unwrap();
        let c = read_checkpoint_config(&path).unwrap();
        assert_eq!(c.precision, Precision::Single);
        assert_eq!(c.d, 4);
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&init_model::<f32>(&cfg(8), 0).unwrap(), &path).unwrap();
        let err = load_checkpoint_for::<f32>(&path, &cfg(4)).unwrap_err();
        match err {
            Error::ShapeMismatch { name, .. } => assert_eq!(name, "embed.day"),
            other => panic!("unexpected {other}"),
        }
    }
}
