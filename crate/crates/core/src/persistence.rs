//! Artifact files with exact round-trips.
//!
//! Text layout: a header line `TRAJDIFF <major>.<minor> <tag>` followed by
//! the payload as JSON with sorted keys and shortest round-trip float
//! formatting. Binary layout: the magic `TRAJDIFB`, then little-endian
//! `u32` major, `u32` minor, `u32` tag length, the tag bytes, `u64` payload
//! length and the bincode payload. A file loads if its major version matches
//! and its minor version is not newer than this build's.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::MlpCheckpoint;
use crate::error::{Error, Result};
use crate::latent::LinearMap;
use crate::scenario::{JointGmm, MarginalSampleSet};
use crate::schedule::ScheduleParams;
use crate::stats::{GaussianMixture, Vector};

pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_MINOR: u32 = 0;
pub const TEXT_MAGIC: &str = "TRAJDIFF";
pub const BINARY_MAGIC: &[u8; 8] = b"TRAJDIFB";

/// A value with a registered type tag.
pub trait Artifact: Serialize + DeserializeOwned {
    const TAG: &'static str;
}

impl Artifact for JointGmm {
    const TAG: &'static str = "scene";
}

impl Artifact for GaussianMixture {
    const TAG: &'static str = "mixture";
}

impl Artifact for MarginalSampleSet {
    const TAG: &'static str = "marginals";
}

impl Artifact for MlpCheckpoint {
    const TAG: &'static str = "mlp";
}

impl Artifact for LinearMap {
    const TAG: &'static str = "linear-map";
}

/// A batch of equal-length sample vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub dim: usize,
    pub samples: Vec<Vec<f64>>,
}

impl SampleBatch {
    pub fn new(dim: usize, samples: &[Vector]) -> Result<Self> {
        for s in samples {
            crate::error::check_dim(dim, s.len())?;
        }
        Ok(SampleBatch { dim, samples: samples.iter().map(|s| s.as_slice().to_vec()).collect() })
    }

    pub fn vectors(&self) -> Vec<Vector> {
        self.samples.iter().map(|s| Vector::from_column_slice(s)).collect()
    }
}

impl Artifact for SampleBatch {
    const TAG: &'static str = "samples";
}

/// One flat key-value row.
pub type KvRow = Vec<(String, String)>;

/// Ordered metric rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<KvRow>,
}

impl Artifact for MetricsTable {
    const TAG: &'static str = "metrics";
}

impl MetricsTable {
    /// One `key=value` line per row, fields separated by single spaces.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut row = Vec::new();
            for field in line.split(' ').filter(|f| !f.is_empty()) {
                let (k, v) = field.split_once('=').ok_or_else(|| Error::Parse {
                    location: format!("line {}", i + 1),
                    message: format!("field `{field}` has no `=`"),
                })?;
                row.push((k.to_string(), v.to_string()));
            }
            rows.push(row);
        }
        Ok(MetricsTable { rows })
    }
}

/// Snapshot of a run: enough to re-execute it and check its outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub schedule: Option<ScheduleParams>,
    /// Input file path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock seconds per phase; excluded from [`RunManifest::hash`].
    pub timings: BTreeMap<String, f64>,
}

impl Artifact for RunManifest {
    const TAG: &'static str = "manifest";
}

impl RunManifest {
    /// Hash of everything except timings, independent of key order.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(json_error)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timings");
        }
        Ok(sha256_hex(canonical_json_value(&v).as_bytes()))
    }
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Parse { location: format!("line {} column {}", e.line(), e.column()), message: e.to_string() }
}

fn canonical_json_value(v: &serde_json::Value) -> String {
    // serde_json maps are ordered by key, so serialization is canonical.
    v.to_string()
}

/// Compact JSON with keys sorted at every level.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(canonical_json_value(&serde_json::to_value(value).map_err(json_error)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(canonical_json(value)?.as_bytes()))
}

fn check_version(major: u32, minor: u32) -> Result<()> {
    if major != FORMAT_MAJOR || minor > FORMAT_MINOR {
        return Err(Error::IncompatibleVersion {
            found: format!("{major}.{minor}"),
            expected: format!("{FORMAT_MAJOR}.{FORMAT_MINOR}"),
        });
    }
    Ok(())
}

pub fn to_text<A: Artifact>(value: &A) -> Result<String> {
    let v = serde_json::to_value(value).map_err(json_error)?;
    let body = serde_json::to_string_pretty(&v).map_err(json_error)?;
    Ok(format!("{TEXT_MAGIC} {FORMAT_MAJOR}.{FORMAT_MINOR} {}\n{body}\n", A::TAG))
}

pub fn from_text<A: Artifact>(text: &str) -> Result<A> {
    let header_err = |message: String| Error::Parse { location: "line 1".into(), message };
    let (header, body) = text.split_once('\n').ok_or_else(|| header_err("missing header line".into()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 3 || fields[0] != TEXT_MAGIC {
        return Err(header_err(format!("expected `{TEXT_MAGIC} <version> <type>`, found `{header}`")));
    }
    let (major, minor) = fields[1]
        .split_once('.')
        .and_then(|(a, b)| Some((a.parse::<u32>().ok()?, b.parse::<u32>().ok()?)))
        .ok_or_else(|| header_err(format!("bad version `{}`", fields[1])))?;
    check_version(major, minor)?;
    if fields[2] != A::TAG {
        return Err(header_err(format!("expected type `{}`, found `{}`", A::TAG, fields[2])));
    }
    serde_json::from_str(body).map_err(|e| Error::Parse {
        location: format!("line {} column {}", e.line() + 1, e.column()),
        message: e.to_string(),
    })
}

pub fn to_binary<A: Artifact>(value: &A) -> Result<Vec<u8>> {
    let payload = bincode::serialize(value)
        .map_err(|e| Error::Parse { location: "payload".into(), message: e.to_string() })?;
    let mut out = Vec::with_capacity(payload.len() + 32);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&FORMAT_MAJOR.to_le_bytes());
    out.extend_from_slice(&FORMAT_MINOR.to_le_bytes());
    out.extend_from_slice(&(A::TAG.len() as u32).to_le_bytes());
    out.extend_from_slice(A::TAG.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| Error::Parse {
            location: format!("byte {}", self.pos),
            message: format!("unexpected end of data, wanted {n} bytes"),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_binary<A: Artifact>(bytes: &[u8]) -> Result<A> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(BINARY_MAGIC.len())? != BINARY_MAGIC {
        return Err(Error::Parse { location: "byte 0".into(), message: "bad magic".into() });
    }
    let (major, minor) = (r.u32()?, r.u32()?);
    check_version(major, minor)?;
    let tag_len = r.u32()? as usize;
    let tag_pos = r.pos;
    let tag = r.take(tag_len)?;
    if tag != A::TAG.as_bytes() {
        return Err(Error::Parse {
            location: format!("byte {tag_pos}"),
            message: format!("expected type `{}`, found `{}`", A::TAG, String::from_utf8_lossy(tag)),
        });
    }
    let len = r.u64()? as usize;
    let payload_pos = r.pos;
    let payload = r.take(len)?;
    if r.pos != bytes.len() {
        return Err(Error::Parse { location: format!("byte {}", r.pos), message: "trailing bytes".into() });
    }
    bincode::deserialize(payload)
        .map_err(|e| Error::Parse { location: format!("payload at byte {payload_pos}"), message: e.to_string() })
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_text<A: Artifact>(path: &Path, value: &A) -> Result<()> {
    write_atomic(path, to_text(value)?.as_bytes())
}

pub fn load_text<A: Artifact>(path: &Path) -> Result<A> {
    from_text(&fs::read_to_string(path)?)
}

pub fn save_binary<A: Artifact>(path: &Path, value: &A) -> Result<()> {
    write_atomic(path, &to_binary(value)?)
}

pub fn load_binary<A: Artifact>(path: &Path) -> Result<A> {
    from_binary(&fs::read(path)?)
}

/// Two-column plot series with a `# x y` style header.
pub fn series_text(x_name: &str, y_name: &str, points: &[(f64, f64)]) -> String {
    let mut out = format!("# {x_name} {y_name}\n");
    for (x, y) in points {
        out.push_str(&format!("{x} {y}\n"));
    }
    out
}
