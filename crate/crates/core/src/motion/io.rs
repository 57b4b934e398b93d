//! Clip files and dataset directories.
//!
//! A clip file is a short text header terminated by a blank line followed by
//! little-endian `f32` rows, one per frame, laid out as
//! `J joints | base vel x, z | pitch rate | pitch | root height | K × (x, z) keybodies | heading`.
//! A dataset is a directory of clip files plus an index listing
//! `relative_path<TAB>category` per line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{MotionClip, MotionFrame};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.tsv";
const VERSION: u32 = 1;

/// Expected dimensions of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipSchema {
    pub n_joints: usize,
    pub n_keybodies: usize,
}

impl ClipSchema {
    pub fn row_len(&self) -> usize {
        self.n_joints + 2 + 1 + 1 + 1 + 2 * self.n_keybodies + 1
    }

    pub fn check(&self, clip: &MotionClip) -> Result<()> {
        if clip.n_joints() != self.n_joints {
            return Err(Error::DimensionMismatch {
                what: format!("joint count (J) of clip `{}`", clip.id()),
                expected: self.n_joints,
                found: clip.n_joints(),
            });
        }
        if clip.n_keybodies() != self.n_keybodies {
            return Err(Error::DimensionMismatch {
                what: format!("keybody count (K) of clip `{}`", clip.id()),
                expected: self.n_keybodies,
                found: clip.n_keybodies(),
            });
        }
        Ok(())
    }
}

pub fn save_clip_file(clip: &MotionClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let schema = ClipSchema {
        n_joints: clip.n_joints(),
        n_keybodies: clip.n_keybodies(),
    };
    let mut out = format!(
        "version={VERSION}\nfps={}\nJ={}\nK={}\ncategory={}\n\n",
        clip.fps(),
        schema.n_joints,
        schema.n_keybodies,
        clip.category()
    )
    .into_bytes();
    out.reserve(clip.frames().len() * schema.row_len() * 4);
    for (i, f) in clip.frames().iter().enumerate() {
        let lateral = f.base_lin_vel[1] != 0.0 || f.keybody_positions.iter().any(|p| p[1] != 0.0);
        if lateral {
            return Err(Error::SchemaMismatch(format!(
                "frame {i} of `{}` has a lateral component; clip files are planar",
                clip.id()
            )));
        }
        let mut push = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        f.joint_positions.iter().for_each(|&v| push(v));
        push(f.base_lin_vel[0]);
        push(f.base_lin_vel[2]);
        push(f.base_ang_vel);
        push(f.base_pitch);
        push(f.root_height);
        for p in &f.keybody_positions {
            push(p[0]);
            push(p[2]);
        }
        push(f.heading);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn split_header(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let sep = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or(Error::UnexpectedEof)?;
    let header = std::str::from_utf8(&bytes[..sep])
        .map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
    Ok((header, &bytes[sep + 2..]))
}

fn header_field<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    header
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::MalformedHeader(format!("missing `{key}`")))
}

fn parse_field<T: std::str::FromStr>(header: &str, key: &str) -> Result<T> {
    let v = header_field(header, key)?;
    v.trim()
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("bad value for `{key}`: `{v}`")))
}

/// Read a clip; the id is the file stem.
pub fn load_clip_file(path: impl AsRef<Path>, schema: Option<ClipSchema>) -> Result<MotionClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = split_header(&bytes)?;
    let version: u32 = parse_field(header, "version")?;
    if version != VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {version}")));
    }
    let fps: f64 = parse_field(header, "fps")?;
    let found = ClipSchema {
        n_joints: parse_field(header, "J")?,
        n_keybodies: parse_field(header, "K")?,
    };
    let category = header_field(header, "category")?.trim().to_string();
    if let Some(expected) = schema {
        if expected.n_joints != found.n_joints {
            return Err(Error::DimensionMismatch {
                what: format!("joint count (J) in {}", path.display()),
                expected: expected.n_joints,
                found: found.n_joints,
            });
        }
        if expected.n_keybodies != found.n_keybodies {
            return Err(Error::DimensionMismatch {
                what: format!("keybody count (K) in {}", path.display()),
                expected: expected.n_keybodies,
                found: found.n_keybodies,
            });
        }
    }
    let row_bytes = found.row_len() * 4;
    if payload.is_empty() || payload.len() % row_bytes != 0 {
        return Err(Error::UnexpectedEof);
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let (j, k) = (found.n_joints, found.n_keybodies);
    let frames = values
        .chunks_exact(found.row_len())
        .map(|row| {
            let kb = &row[j + 5..j + 5 + 2 * k];
            MotionFrame {
                joint_positions: row[..j].to_vec(),
                base_lin_vel: [row[j], 0.0, row[j + 1]],
                base_ang_vel: row[j + 2],
                base_pitch: row[j + 3],
                root_height: row[j + 4],
                keybody_positions: kb.chunks_exact(2).map(|p| [p[0], 0.0, p[1]]).collect(),
                heading: row[j + 5 + 2 * k],
            }
        })
        .collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    MotionClip::new(id, category, fps, frames)
}

pub fn write_index(dir: impl AsRef<Path>, entries: &[(String, String)]) -> Result<()> {
    let path = dir.as_ref().join(INDEX_FILE);
    let mut text = String::new();
    for (rel, cat) in entries {
        let _ = writeln!(text, "{rel}\t{cat}");
    }
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Write each clip as `<id>.clip` plus the index.
pub fn save_dataset(dir: impl AsRef<Path>, clips: &[MotionClip]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(clips.len());
    for clip in clips {
        let rel = format!("{}.clip", clip.id());
        save_clip_file(clip, dir.join(&rel))?;
        entries.push((rel, clip.category().to_string()));
    }
    write_index(dir, &entries)
}

/// Entries of `<dir>/index.tsv` as (resolved clip path, category).
pub fn read_index(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, String)>> {
    let dir = dir.as_ref();
    let index = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (rel, category) = line.split_once('\t').ok_or_else(|| {
            Error::MalformedHeader(format!("{} line {}: expected path<TAB>category", index.display(), n + 1))
        })?;
        let rel = PathBuf::from(rel);
        let path = if rel.is_absolute() { rel } else { dir.join(rel) };
        out.push((path, category.trim().to_string()));
    }
    Ok(out)
}

/// Load every clip listed in `<dir>/index.tsv`, in index order.
pub fn load_dataset(dir: impl AsRef<Path>, schema: Option<ClipSchema>) -> Result<Vec<MotionClip>> {
    let dir = dir.as_ref();
    let mut clips = Vec::new();
    for (path, category) in read_index(dir)? {
        let clip = load_clip_file(&path, schema)?;
        let category = category.as_str();
        clips.push(if clip.category() == category {
            clip
        } else {
            let id = clip.id().to_string();
            clip.renamed(id, category)
        });
    }
    Ok(clips)
}
