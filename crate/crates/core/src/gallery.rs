//! Enrollment store and its binary file format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "DPGL" | u16 version | u64 N | N records
//! record: u32 len | u16 id_len | id (utf-8) | u8 finger | u8 flags | 200-byte template | [minutiae]
//! minutiae: u32 w | u32 h | u32 n | n * (f32 x, f32 y, f32 theta)
//! ```
//!
//! `len` counts the bytes after itself, so a reader can skip records without
//! decoding them. Bit 0 of `flags` marks a minutiae block.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::codec::ByteReader;
use crate::error::{Error, Result};
use crate::minutiae::MinutiaeSet;
use crate::template::{CompressedTemplate, Template, COMPRESSED_LEN};

pub const MAGIC: &[u8; 4] = b"DPGL";
pub const VERSION: u16 = 1;

const FLAG_MINUTIAE: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct RecordKey {
    pub subject_id: String,
    pub finger_index: u8,
}

impl RecordKey {
    pub fn new(subject_id: impl Into<String>, finger_index: u8) -> Result<Self> {
        let subject_id = subject_id.into();
        if subject_id.is_empty() {
            return Err(Error::invalid("subject_id must not be empty"));
        }
        if subject_id.len() > usize::from(u16::MAX) {
            return Err(Error::invalid("subject_id longer than 65535 bytes"));
        }
        if finger_index > 9 {
            return Err(Error::invalid(format!(
                "finger_index {finger_index} outside 0..=9"
            )));
        }
        Ok(Self {
            subject_id,
            finger_index,
        })
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.subject_id, self.finger_index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryRecord {
    pub key: RecordKey,
    pub template: CompressedTemplate,
    pub minutiae: Option<MinutiaeSet>,
}

/// Records in enrollment order; the position of a record is its ordinal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gallery {
    records: Vec<GalleryRecord>,
    by_key: HashMap<RecordKey, usize>,
}

impl Gallery {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record and returns its ordinal.
    pub fn enroll(&mut self, record: GalleryRecord) -> Result<usize> {
        if self.by_key.contains_key(&record.key) {
            return Err(Error::Conflict {
                subject_id: record.key.subject_id,
                finger_index: record.key.finger_index,
            });
        }
        let ordinal = self.records.len();
        self.by_key.insert(record.key.clone(), ordinal);
        self.records.push(record);
        Ok(ordinal)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, ordinal: usize) -> Option<&GalleryRecord> {
        self.records.get(ordinal)
    }

    pub fn ordinal_of(&self, key: &RecordKey) -> Option<usize> {
        self.by_key.get(key).copied()
    }

    pub fn find(&self, key: &RecordKey) -> Option<&GalleryRecord> {
        self.ordinal_of(key).map(|i| &self.records[i])
    }

    pub fn records(&self) -> &[GalleryRecord] {
        &self.records
    }

    pub fn iter(&self) -> impl Iterator<Item = &GalleryRecord> {
        self.records.iter()
    }

    pub fn has_all_minutiae(&self) -> bool {
        self.records.iter().all(|r| r.minutiae.is_some())
    }

    pub fn keys(&self) -> Vec<RecordKey> {
        self.records.iter().map(|r| r.key.clone()).collect()
    }

    pub fn decompressed(&self) -> Vec<Template> {
        self.records.iter().map(|r| r.template.decompress()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.records.len() * (COMPRESSED_LEN + 24));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        let mut body = Vec::new();
        for r in &self.records {
            body.clear();
            let id = r.key.subject_id.as_bytes();
            body.extend_from_slice(&(id.len() as u16).to_le_bytes());
            body.extend_from_slice(id);
            body.push(r.key.finger_index);
            body.push(if r.minutiae.is_some() { FLAG_MINUTIAE } else { 0 });
            body.extend_from_slice(&r.template.to_bytes());
            if let Some(m) = &r.minutiae {
                m.write_binary(&mut body);
            }
            out.extend_from_slice(&(body.len() as u32).to_le_bytes());
            out.extend_from_slice(&body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>("magic")?;
        if &magic != MAGIC {
            return Err(Error::parse(0, "not a gallery file (bad magic)"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let n = r.u64("record count")?;
        // Smallest possible record is 4 + 2 + 1 + 1 + 1 + 200 bytes.
        if n > (r.remaining() / 209) as u64 {
            return Err(Error::parse(
                6,
                format!("record count {n} exceeds what the file can hold"),
            ));
        }
        let mut gallery = Gallery::new();
        for _ in 0..n {
            let start = r.offset();
            let len = r.u32("record length")? as usize;
            let body = r.take(len, "record")?;
            let record = read_record(body, start + 4)?;
            gallery
                .enroll(record)
                .map_err(|e| Error::parse(start, e.to_string()))?;
        }
        r.expect_end()?;
        Ok(gallery)
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

fn read_record(body: &[u8], base: u64) -> Result<GalleryRecord> {
    let rebase = |e: Error| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset: base + offset,
            message,
        },
        other => other,
    };
    let mut r = ByteReader::new(body);
    let inner = |r: &mut ByteReader<'_>| -> Result<GalleryRecord> {
        let id_len = r.u16("id length")? as usize;
        let id_at = r.offset();
        let id = std::str::from_utf8(r.take(id_len, "subject id")?)
            .map_err(|_| Error::parse(id_at, "subject id is not utf-8"))?;
        let finger_at = r.offset();
        let finger = r.u8("finger index")?;
        let key = RecordKey::new(id, finger).map_err(|e| Error::parse(finger_at, e.to_string()))?;
        let flags_at = r.offset();
        let flags = r.u8("flags")?;
        if flags & !FLAG_MINUTIAE != 0 {
            return Err(Error::parse(flags_at, format!("unknown flags {flags:#04x}")));
        }
        let template = CompressedTemplate::read(r)?;
        let minutiae = if flags & FLAG_MINUTIAE != 0 {
            Some(MinutiaeSet::read_binary(r)?)
        } else {
            None
        };
        r.expect_end()?;
        Ok(GalleryRecord {
            key,
            template,
            minutiae,
        })
    };
    inner(&mut r).map_err(rebase)
}

/// One line of an enrollment manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub key: RecordKey,
    pub template: PathBuf,
    pub minutiae: Option<PathBuf>,
}

/// Parses `subject_id finger template_path [minutiae_path]` lines. Blank
/// lines and `#` comments are skipped; relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(Error::invalid(format!(
                "manifest line {}: expected `id finger template [minutiae]`",
                lineno + 1
            )));
        }
        let finger = fields[1].parse::<u8>().map_err(|e| {
            Error::invalid(format!("manifest line {}: finger: {e}", lineno + 1))
        })?;
        out.push(ManifestEntry {
            key: RecordKey::new(fields[0], finger)?,
            template: base.join(fields[2]),
            minutiae: fields.get(3).map(|p| base.join(p)),
        });
    }
    Ok(out)
}

/// Reads a template file: exactly 200 bytes is a compressed template,
/// anything else is whitespace-separated decimal features.
pub fn read_template_file(path: &Path) -> Result<CompressedTemplate> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() == COMPRESSED_LEN {
        return CompressedTemplate::from_bytes(&bytes);
    }
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| Error::invalid(format!("{}: not a template file", path.display())))?;
    Ok(Template::parse_text(text)?.compress())
}

/// Reads a probe template. A 200-byte file is decompressed; text keeps full
/// float precision.
pub fn read_probe_file(path: &Path) -> Result<Template> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() == COMPRESSED_LEN {
        return Ok(CompressedTemplate::from_bytes(&bytes)?.decompress());
    }
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| Error::invalid(format!("{}: not a template file", path.display())))?;
    Template::parse_text(text)
}

pub fn read_minutiae_file(path: &Path) -> Result<MinutiaeSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MinutiaeSet::parse_text(&text)
}

pub fn enroll_manifest(gallery: &mut Gallery, entries: &[ManifestEntry]) -> Result<()> {
    for e in entries {
        let template = read_template_file(&e.template)?;
        let minutiae = e.minutiae.as_deref().map(read_minutiae_file).transpose()?;
        gallery.enroll(GalleryRecord {
            key: e.key.clone(),
            template,
            minutiae,
        })?;
    }
    Ok(())
}
