//! Checkpoint container: a UTF-8 manifest, one blank line, then every tensor
//! as little-endian `f32` in manifest order.
//!
//! ```text
//! mimic-lab checkpoint 1
//! meta kind moe
//! meta n_experts 4
//! tensor experts.0.0.w 72 128
//! ...
//!
//! <payload>
//! ```

use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "mimic-lab checkpoint 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::MalformedHeader(format!("missing `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::MalformedHeader(format!("bad value for `{key}`: {raw}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = String::new();
        text.push_str(CHECKPOINT_MAGIC);
        text.push('\n');
        for (k, v) in &self.meta {
            text.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            text.push_str(&format!("tensor {name} {} {}\n", t.rows, t.cols));
        }
        text.push('\n');
        let mut out = text.into_bytes();
        for (_, t) in &self.tensors {
            for &x in &t.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::MalformedHeader("no manifest terminator".into()))?;
        let text = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::MalformedHeader("manifest is not UTF-8".into()))?;
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::MalformedHeader("not a checkpoint".into()));
        }
        let mut ck = Checkpoint::default();
        let mut shapes = Vec::new();
        for line in lines {
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), v) => ck.meta.push((k.to_string(), v.unwrap_or("").to_string())),
                (Some("tensor"), Some(name), Some(shape)) => {
                    let dims: Vec<usize> = shape
                        .split(' ')
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::MalformedHeader(format!("bad shape in `{line}`")))?;
                    if dims.len() != 2 {
                        return Err(Error::MalformedHeader(format!("bad shape in `{line}`")));
                    }
                    shapes.push((name.to_string(), dims[0], dims[1]));
                }
                _ => return Err(Error::MalformedHeader(format!("unrecognised line `{line}`"))),
            }
        }
        let mut payload = &bytes[split + 2..];
        for (name, rows, cols) in shapes {
            let n = rows * cols;
            if payload.len() < 4 * n {
                return Err(Error::UnexpectedEof);
            }
            let data = payload[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            payload = &payload[4 * n..];
            ck.tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        if !payload.is_empty() {
            return Err(Error::MalformedHeader(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut ck = Checkpoint::default();
        ck.set_meta("kind", "moe");
        ck.set_meta("hidden", "8,8");
        ck.tensors.push(("a".into(), Tensor::from_vec(2, 2, vec![1.5, -0.25, 3.0, 0.0])));
        ck.tensors.push(("b".into(), Tensor::from_vec(1, 1, vec![7.0])));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.require::<String>("hidden").unwrap(), "8,8");
        assert!(back.require::<usize>("missing").is_err());
    }

    #[test]
    fn truncated_payload() {
        let mut ck = Checkpoint::default();
        ck.tensors.push(("a".into(), Tensor::zeros(3, 3)));
        let bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::UnexpectedEof)
        ));
        assert!(Checkpoint::from_bytes(b"garbage\n\n").is_err());
    }
}
