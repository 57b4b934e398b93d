//! Run manifests: the command, its flags, input hashes and the code version,
//! written next to every output so a run can be repeated exactly.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use mimic_core::motion::{read_index, INDEX_FILE};
use mimic_core::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(read(path)?)))
}

/// Hash of a dataset index plus every clip file it lists, in index order.
pub fn hash_dataset(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(read(&dir.join(INDEX_FILE))?);
    for (path, _) in read_index(dir)? {
        h.update(read(&path)?);
    }
    Ok(hex(&h.finalize()))
}

#[derive(Debug, Default)]
pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.push("command", command);
        m.push("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn flag(&mut self, name: &str, value: impl ToString) {
        self.push(&format!("flag.{name}"), value);
    }

    pub fn file_hash(&mut self, name: &str, path: &Path) -> Result<()> {
        let h = hash_file(path)?;
        self.push(&format!("sha256.{name}"), h);
        Ok(())
    }

    pub fn dataset_hash(&mut self, name: &str, dir: &Path) -> Result<()> {
        let h = hash_dataset(dir)?;
        self.push(&format!("sha256.{name}"), h);
        Ok(())
    }

    pub fn render(&self) -> String {
        self.lines.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}\t{v}");
            s
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            hex(&Sha256::digest(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn render_keeps_order() {
        let mut m = Manifest::new("eval");
        m.flag("seed", 3);
        let text = m.render();
        assert!(text.starts_with("command\teval\nversion\t"));
        assert!(text.ends_with("flag.seed\t3\n"));
    }
}
