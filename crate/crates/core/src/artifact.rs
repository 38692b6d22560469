//! One container format for every persisted object.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes   "LTLA"
//! version          u32
//! kind             u8        1 checkpoint, 2 ticket, 3 direction, 4 surface, 5 report, 6 dataset
//! reserved         3 bytes   zero
//! header_len       u32
//! header           JSON      {"kind": .., "meta": {..}, "body": ..}
//! section_count    u32
//! per section:
//!   name_len       u16
//!   name           UTF-8
//!   payload_len    u64
//!   sha256         32 bytes  digest of payload
//!   payload
//! file sha256      32 bytes  digest of every preceding byte
//! ```
//!
//! Numeric payloads are raw `f64`/`u64` little-endian, so round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Split};
use crate::directions::{Direction, Normalization};
use crate::error::{Error, Result};
use crate::nn::{ArchSpec, BnStats, LayerSpec, Network, ParamLayout, Params};
use crate::pruning::{Mask, MaskMethod, TicketRecord};
use crate::surface::{GridSpec, SurfaceGrid, SurfaceMeta};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LTLA";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Checkpoint,
    Ticket,
    Direction,
    Surface,
    Report,
    Dataset,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 6] = [
        ArtifactKind::Checkpoint,
        ArtifactKind::Ticket,
        ArtifactKind::Direction,
        ArtifactKind::Surface,
        ArtifactKind::Report,
        ArtifactKind::Dataset,
    ];

    pub fn tag(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get((tag as usize).wrapping_sub(1)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ArtifactKind::Checkpoint => "checkpoint",
            ArtifactKind::Ticket => "ticket",
            ArtifactKind::Direction => "direction",
            ArtifactKind::Surface => "surface",
            ArtifactKind::Report => "report",
            ArtifactKind::Dataset => "dataset",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub payload: Vec<u8>,
}

/// The untyped container: header fields plus named binary sections.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactFile {
    pub kind: ArtifactKind,
    pub meta: BTreeMap<String, String>,
    pub body: Value,
    pub sections: Vec<Section>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ArtifactKind,
    meta: BTreeMap<String, String>,
    body: Value,
}

fn sha(bytes: &[u8]) -> [u8; DIGEST_LEN] {
    Sha256::digest(bytes).into()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Corrupt(format!("{what} runs past the end of the file"))),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl ArtifactFile {
    pub fn new(kind: ArtifactKind, body: Value) -> Self {
        ArtifactFile {
            kind,
            meta: BTreeMap::new(),
            body,
            sections: Vec::new(),
        }
    }

    pub fn push_section(&mut self, name: &str, payload: Vec<u8>) {
        self.sections.push(Section {
            name: name.to_string(),
            payload,
        });
    }

    pub fn section(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.payload.as_slice())
            .ok_or_else(|| Error::Corrupt(format!("missing section {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            kind: self.kind,
            meta: self.meta.clone(),
            body: self.body.clone(),
        })
        .map_err(|e| Error::InvalidArgument(format!("artifact header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&[self.kind.tag(), 0, 0, 0]);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            let name_len = u16::try_from(s.name.len())
                .map_err(|_| Error::InvalidArgument(format!("section name {:?} too long", s.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&sha(&s.payload));
            out.extend_from_slice(&s.payload);
        }
        let digest = sha(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses and verifies a container. Nothing is returned unless every
    /// length and checksum agrees.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(Error::Corrupt("bad magic: not an artifact file".into()));
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let version = cur.u32("version")?;
        if version > FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        if bytes.len() < 16 + DIGEST_LEN {
            return Err(Error::Corrupt("file too short".into()));
        }
        let (content, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if sha(content) != trailer {
            return Err(Error::Corrupt("file checksum mismatch".into()));
        }
        if version == 0 {
            return Err(Error::Corrupt("version 0 is not a valid format version".into()));
        }
        let mut cur = Cursor { bytes: content, pos: 8 };
        let tag = cur.take(4, "kind")?;
        let kind = ArtifactKind::from_tag(tag[0])
            .ok_or_else(|| Error::Corrupt(format!("unknown kind tag {}", tag[0])))?;
        if tag[1..] != [0, 0, 0] {
            return Err(Error::Corrupt("reserved bytes are not zero".into()));
        }
        let header_len = cur.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(cur.take(header_len, "header")?)
            .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        if header.kind != kind {
            return Err(Error::Corrupt("header kind disagrees with kind tag".into()));
        }
        let count = cur.u32("section count")?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let name_len = cur.u16("section name length")? as usize;
            let name = std::str::from_utf8(cur.take(name_len, "section name")?)
                .map_err(|_| Error::Corrupt("section name is not UTF-8".into()))?
                .to_string();
            let len = usize::try_from(cur.u64("section length")?)
                .map_err(|_| Error::Corrupt("section length overflows".into()))?;
            let digest = cur.take(DIGEST_LEN, "section checksum")?;
            let payload = cur.take(len, "section payload")?;
            if sha(payload) != digest {
                return Err(Error::Corrupt(format!("section {name:?} checksum mismatch")));
            }
            sections.push(Section {
                name,
                payload: payload.to_vec(),
            });
        }
        if cur.pos != content.len() {
            return Err(Error::Corrupt("trailing bytes after the last section".into()));
        }
        Ok(ArtifactFile {
            kind,
            meta: header.meta,
            body: header.body,
            sections,
        })
    }

    pub fn expect_kind(&self, kind: ArtifactKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Kind {
                expected: kind.name().into(),
                found: self.kind.name().into(),
            })
        }
    }

    fn body<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.body.clone()).map_err(|e| Error::Corrupt(format!("{} body: {e}", self.kind.name())))
    }
}

/// A type with a fixed artifact representation.
pub trait Artifact: Sized {
    const KIND: ArtifactKind;
    fn to_artifact(&self) -> Result<ArtifactFile>;
    fn from_artifact(file: &ArtifactFile) -> Result<Self>;
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Corrupt("float section length is not a multiple of 8".into()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn json<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::InvalidArgument(format!("serializing artifact body: {e}")))
}

/// Encodes a value as an in-memory artifact with `meta` attached.
pub fn encode<T: Artifact>(obj: &T, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut file = obj.to_artifact()?;
    file.meta.extend(meta.iter().map(|(k, v)| (k.clone(), v.clone())));
    file.to_bytes()
}

pub fn decode<T: Artifact>(bytes: &[u8]) -> Result<T> {
    let file = ArtifactFile::from_bytes(bytes)?;
    file.expect_kind(T::KIND)?;
    T::from_artifact(&file)
}

pub fn write_artifact<T: Artifact>(obj: &T, path: impl AsRef<Path>) -> Result<()> {
    write_artifact_with_meta(obj, &BTreeMap::new(), path)
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn write_artifact_with_meta<T: Artifact>(
    obj: &T,
    meta: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(obj, meta)?;
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_artifact_file(path: impl AsRef<Path>) -> Result<ArtifactFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ArtifactFile::from_bytes(&bytes)
}

pub fn read_artifact<T: Artifact>(path: impl AsRef<Path>) -> Result<T> {
    let file = read_artifact_file(path)?;
    file.expect_kind(T::KIND)?;
    T::from_artifact(&file)
}

#[derive(Serialize, Deserialize)]
struct CheckpointBody {
    arch: ArchSpec,
    seed: u64,
}

fn stats_bytes(stats: &[Option<BnStats>]) -> (Vec<u8>, Vec<u8>) {
    let means: Vec<f64> = stats.iter().flatten().flat_map(|s| s.mean.iter().copied()).collect();
    let vars: Vec<f64> = stats.iter().flatten().flat_map(|s| s.var.iter().copied()).collect();
    (f64s_to_bytes(&means), f64s_to_bytes(&vars))
}

fn stats_from(arch: &ArchSpec, means: &[f64], vars: &[f64]) -> Result<Vec<Option<BnStats>>> {
    let mut offset = 0;
    let mut out = Vec::new();
    for layer in &arch.layers {
        match *layer {
            LayerSpec::BatchNorm { features } => {
                let end = offset + features;
                if end > means.len() || end > vars.len() {
                    return Err(Error::Corrupt("running statistics are too short".into()));
                }
                out.push(Some(BnStats {
                    mean: means[offset..end].to_vec(),
                    var: vars[offset..end].to_vec(),
                }));
                offset = end;
            }
            _ => out.push(None),
        }
    }
    if offset != means.len() || offset != vars.len() {
        return Err(Error::Corrupt("running statistics are too long".into()));
    }
    Ok(out)
}

impl Artifact for Network {
    const KIND: ArtifactKind = ArtifactKind::Checkpoint;

    fn to_artifact(&self) -> Result<ArtifactFile> {
        let mut file = ArtifactFile::new(
            Self::KIND,
            json(&CheckpointBody {
                arch: self.spec().clone(),
                seed: self.seed(),
            })?,
        );
        file.push_section("theta", f64s_to_bytes(&self.theta().to_flat()));
        file.push_section("theta_init", f64s_to_bytes(&self.theta_init().to_flat()));
        let (m, v) = stats_bytes(self.running_stats());
        file.push_section("running_mean", m);
        file.push_section("running_var", v);
        let (m, v) = stats_bytes(self.running_stats_init());
        file.push_section("running_init_mean", m);
        file.push_section("running_init_var", v);
        Ok(file)
    }

    fn from_artifact(file: &ArtifactFile) -> Result<Self> {
        let body: CheckpointBody = file.body()?;
        let floats = |name: &str| -> Result<Vec<f64>> { bytes_to_f64s(file.section(name)?) };
        let running = stats_from(&body.arch, &floats("running_mean")?, &floats("running_var")?)?;
        let running_init = stats_from(&body.arch, &floats("running_init_mean")?, &floats("running_init_var")?)?;
        Network::from_parts(
            body.arch,
            floats("theta")?,
            floats("theta_init")?,
            running,
            running_init,
            body.seed,
        )
        .map_err(|e| Error::Corrupt(format!("checkpoint does not match its architecture: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct TicketBody {
    arch: ArchSpec,
    round: usize,
    method: MaskMethod,
    sparsity: f64,
    test_accuracy: f64,
    init_seed: u64,
    train_seed: u64,
    mask_seed: Option<u64>,
}

impl Artifact for TicketRecord {
    const KIND: ArtifactKind = ArtifactKind::Ticket;

    fn to_artifact(&self) -> Result<ArtifactFile> {
        let mut file = ArtifactFile::new(
            Self::KIND,
            json(&TicketBody {
                arch: self.arch.clone(),
                round: self.round,
                method: self.method,
                sparsity: self.sparsity,
                test_accuracy: self.test_accuracy,
                init_seed: self.init_seed,
                train_seed: self.train_seed,
                mask_seed: self.mask_seed,
            })?,
        );
        file.push_section("mask", self.mask.to_packed_bits());
        Ok(file)
    }

    fn from_artifact(file: &ArtifactFile) -> Result<Self> {
        let body: TicketBody = file.body()?;
        let arch = crate::nn::Architecture::new(body.arch.clone())
            .map_err(|e| Error::Corrupt(format!("ticket architecture: {e}")))?;
        let mask = Mask::from_packed_bits(arch.layout(), file.section("mask")?)
            .map_err(|e| Error::Corrupt(format!("ticket mask: {e}")))?;
        Ok(TicketRecord {
            arch: body.arch,
            round: body.round,
            method: body.method,
            sparsity: body.sparsity,
            test_accuracy: body.test_accuracy,
            init_seed: body.init_seed,
            train_seed: body.train_seed,
            mask_seed: body.mask_seed,
            mask,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DirectionBody {
    layout: ParamLayout,
    status: Normalization,
    seed: u64,
}

impl Artifact for Direction {
    const KIND: ArtifactKind = ArtifactKind::Direction;

    fn to_artifact(&self) -> Result<ArtifactFile> {
        let mut file = ArtifactFile::new(
            Self::KIND,
            json(&DirectionBody {
                layout: (**self.values.layout()).clone(),
                status: self.status,
                seed: self.seed,
            })?,
        );
        file.push_section("values", f64s_to_bytes(&self.values.to_flat()));
        Ok(file)
    }

    fn from_artifact(file: &ArtifactFile) -> Result<Self> {
        let body: DirectionBody = file.body()?;
        let layout = Arc::new(body.layout);
        let values = Params::from_flat(&layout, &bytes_to_f64s(file.section("values")?)?)
            .map_err(|e| Error::Corrupt(format!("direction values: {e}")))?;
        Ok(Direction {
            values,
            status: body.status,
            seed: body.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SurfaceBody {
    spec: GridSpec,
    meta: SurfaceMeta,
}

impl Artifact for SurfaceGrid {
    const KIND: ArtifactKind = ArtifactKind::Surface;

    fn to_artifact(&self) -> Result<ArtifactFile> {
        let mut file = ArtifactFile::new(
            Self::KIND,
            json(&SurfaceBody {
                spec: self.spec,
                meta: self.meta.clone(),
            })?,
        );
        // The center can be a sentinel, which JSON cannot carry.
        file.push_section("center_loss", f64s_to_bytes(&[self.center_loss]));
        file.push_section("losses", self.losses_le_bytes());
        Ok(file)
    }

    fn from_artifact(file: &ArtifactFile) -> Result<Self> {
        let body: SurfaceBody = file.body()?;
        let losses = bytes_to_f64s(file.section("losses")?)?;
        if losses.len() != body.spec.len() {
            return Err(Error::Corrupt(format!(
                "surface holds {} losses for a {}x{} grid",
                losses.len(),
                body.spec.resolution_a,
                body.spec.resolution_b
            )));
        }
        let center = bytes_to_f64s(file.section("center_loss")?)?;
        let [center_loss] = center[..] else {
            return Err(Error::Corrupt("center loss section must hold one value".into()));
        };
        Ok(SurfaceGrid {
            spec: body.spec,
            losses,
            center_loss,
            meta: body.meta,
        })
    }
}

/// A named JSON report (training curves, sweep tables, comparisons).
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub name: String,
    pub body: Value,
}

impl Report {
    pub fn from_serialize<T: Serialize>(name: impl Into<String>, value: &T) -> Result<Self> {
        Ok(Report {
            name: name.into(),
            body: json(value)?,
        })
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.body.clone()).map_err(|e| Error::Corrupt(format!("report {:?}: {e}", self.name)))
    }
}

#[derive(Serialize, Deserialize)]
struct ReportBody {
    name: String,
    report: Value,
}

impl Artifact for Report {
    const KIND: ArtifactKind = ArtifactKind::Report;

    fn to_artifact(&self) -> Result<ArtifactFile> {
        Ok(ArtifactFile::new(
            Self::KIND,
            json(&ReportBody {
                name: self.name.clone(),
                report: self.body.clone(),
            })?,
        ))
    }

    fn from_artifact(file: &ArtifactFile) -> Result<Self> {
        let body: ReportBody = file.body()?;
        Ok(Report {
            name: body.name,
            body: body.report,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetBody {
    shape: Vec<usize>,
    classes: usize,
    split: Split,
    source: String,
}

impl Artifact for Dataset {
    const KIND: ArtifactKind = ArtifactKind::Dataset;

    fn to_artifact(&self) -> Result<ArtifactFile> {
        let mut file = ArtifactFile::new(
            Self::KIND,
            json(&DatasetBody {
                shape: self.images().shape().to_vec(),
                classes: self.classes(),
                split: self.split(),
                source: self.source().to_string(),
            })?,
        );
        file.push_section("images", f64s_to_bytes(self.images().data()));
        let labels: Vec<u8> = self.labels().iter().flat_map(|&l| (l as u64).to_le_bytes()).collect();
        file.push_section("labels", labels);
        Ok(file)
    }

    fn from_artifact(file: &ArtifactFile) -> Result<Self> {
        let body: DatasetBody = file.body()?;
        let images = Tensor::new(body.shape, bytes_to_f64s(file.section("images")?)?)
            .map_err(|e| Error::Corrupt(format!("dataset images: {e}")))?;
        let raw = file.section("labels")?;
        if raw.len() % 8 != 0 {
            return Err(Error::Corrupt("label section length is not a multiple of 8".into()));
        }
        let labels = raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        Dataset::new(images, labels, body.classes, body.split, body.source)
            .map_err(|e| Error::Corrupt(format!("dataset: {e}")))
    }
}
