//! Binary container for per-layer SSL features, plus the CSV manifest that
//! ties utterances to feature files, MOS labels and splits.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "SSLF" | u16 version=1 | u16 reserved=0
//! u16 len + utf-8 utterance id | u16 len + utf-8 model id
//! u16 stored layer count L | u32 feat_dim D | u32 num_frames T | u8 dtype
//! L x u16 layer index (strictly ascending)
//! L x T x D x f32, layer-major, row-major [T][D] within a layer
//! ```
//!
//! Layer `j` (0-based position in the index table) starts at
//! `header_len + j * T * D * 4`, so a single layer can be read with one seek.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SSLF";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32_LE: u8 = 0;

/// Size of the fixed-width part of the header (everything except the two
/// strings and the layer table).
const FIXED_HEADER_BYTES: u64 = 4 + 2 + 2 + 2 + 2 + 2 + 4 + 4 + 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?}, expected \"SSLF\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("header truncated")]
    TruncatedHeader,
    #[error("data section truncated while reading layer {layer}")]
    TruncatedData { layer: u16 },
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("layer {layer} not stored (available: {available:?})")]
    MissingLayer { layer: u16, available: Vec<u16> },
    #[error("invalid features: {0}")]
    Invalid(String),
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureHeader {
    pub version: u16,
    pub utterance_id: String,
    pub model_id: String,
    /// Transformer layer indices, 1-based. Index 0 is reserved for the
    /// pre-transformer encoder output.
    pub layer_indices: Vec<u16>,
    pub feat_dim: u32,
    pub num_frames: u32,
    pub dtype_code: u8,
}

impl FeatureHeader {
    pub fn validate(&self) -> Result<(), String> {
        if self.version != FORMAT_VERSION {
            return Err(format!("version {} != {}", self.version, FORMAT_VERSION));
        }
        if self.layer_indices.is_empty() {
            return Err("no stored layers".into());
        }
        if self.layer_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!(
                "layer indices not strictly increasing: {:?}",
                self.layer_indices
            ));
        }
        if self.feat_dim == 0 || self.num_frames == 0 {
            return Err(format!(
                "empty geometry T={} D={}",
                self.num_frames, self.feat_dim
            ));
        }
        for (what, s) in [("utterance id", &self.utterance_id), ("model id", &self.model_id)] {
            if s.len() > u16::MAX as usize {
                return Err(format!("{what} longer than {} bytes", u16::MAX));
            }
        }
        if self.layer_indices.len() > u16::MAX as usize {
            return Err("too many layers".into());
        }
        Ok(())
    }

    /// Byte offset of the first layer's data.
    pub fn header_len(&self) -> u64 {
        FIXED_HEADER_BYTES
            + self.utterance_id.len() as u64
            + self.model_id.len() as u64
            + 2 * self.layer_indices.len() as u64
    }

    pub fn layer_bytes(&self) -> u64 {
        self.num_frames as u64 * self.feat_dim as u64 * 4
    }

    pub fn data_len(&self) -> u64 {
        self.layer_bytes() * self.layer_indices.len() as u64
    }

    pub fn layer_position(&self, layer: u16) -> Option<usize> {
        self.layer_indices.binary_search(&layer).ok()
    }

    pub fn layer_offset(&self, layer: u16) -> Option<u64> {
        self.layer_position(layer)
            .map(|j| self.header_len() + j as u64 * self.layer_bytes())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_frames as usize, self.feat_dim as usize)
    }

    fn encode(&self, out: &mut impl Write) -> io::Result<()> {
        out.write_all(&MAGIC)?;
        out.write_all(&self.version.to_le_bytes())?;
        out.write_all(&0u16.to_le_bytes())?;
        for s in [&self.utterance_id, &self.model_id] {
            out.write_all(&(s.len() as u16).to_le_bytes())?;
            out.write_all(s.as_bytes())?;
        }
        out.write_all(&(self.layer_indices.len() as u16).to_le_bytes())?;
        out.write_all(&self.feat_dim.to_le_bytes())?;
        out.write_all(&self.num_frames.to_le_bytes())?;
        out.write_all(&[self.dtype_code])?;
        for idx in &self.layer_indices {
            out.write_all(&idx.to_le_bytes())?;
        }
        Ok(())
    }

    fn decode(input: &mut impl Read) -> Result<Self, StoreError> {
        let mut magic = [0u8; 4];
        read_header_bytes(input, &mut magic)?;
        if magic != MAGIC {
            return Err(StoreError::BadMagic { found: magic });
        }
        let version = read_u16(input)?;
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let _reserved = read_u16(input)?;
        let utterance_id = read_string(input)?;
        let model_id = read_string(input)?;
        let count = read_u16(input)? as usize;
        let feat_dim = read_u32(input)?;
        let num_frames = read_u32(input)?;
        let mut dtype = [0u8; 1];
        read_header_bytes(input, &mut dtype)?;
        if dtype[0] != DTYPE_F32_LE {
            return Err(StoreError::UnsupportedDtype(dtype[0]));
        }
        let layer_indices = (0..count)
            .map(|_| read_u16(input))
            .collect::<Result<Vec<_>, _>>()?;
        let header = FeatureHeader {
            version,
            utterance_id,
            model_id,
            layer_indices,
            feat_dim,
            num_frames,
            dtype_code: dtype[0],
        };
        header.validate().map_err(StoreError::CorruptHeader)?;
        Ok(header)
    }
}

fn read_header_bytes(input: &mut impl Read, buf: &mut [u8]) -> Result<(), StoreError> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => StoreError::TruncatedHeader,
        _ => StoreError::Io {
            path: PathBuf::new(),
            source: e,
        },
    })
}

fn read_u16(input: &mut impl Read) -> Result<u16, StoreError> {
    let mut b = [0u8; 2];
    read_header_bytes(input, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(input: &mut impl Read) -> Result<u32, StoreError> {
    let mut b = [0u8; 4];
    read_header_bytes(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(input: &mut impl Read) -> Result<String, StoreError> {
    let len = read_u16(input)? as usize;
    let mut buf = vec![0u8; len];
    read_header_bytes(input, &mut buf)?;
    String::from_utf8(buf).map_err(|e| StoreError::CorruptHeader(e.to_string()))
}

/// All stored layers of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceFeatures {
    header: FeatureHeader,
    layers: BTreeMap<u16, Array2<f32>>,
}

impl UtteranceFeatures {
    /// Builds features from a layer map; the header geometry is taken from
    /// the matrices, which must all share one shape and be finite.
    pub fn new(
        utterance_id: impl Into<String>,
        model_id: impl Into<String>,
        layers: BTreeMap<u16, Array2<f32>>,
    ) -> Result<Self, StoreError> {
        let (num_frames, feat_dim) = layers
            .values()
            .next()
            .map(|m| m.dim())
            .ok_or_else(|| StoreError::Invalid("no stored layers".into()))?;
        let header = FeatureHeader {
            version: FORMAT_VERSION,
            utterance_id: utterance_id.into(),
            model_id: model_id.into(),
            layer_indices: layers.keys().copied().collect(),
            feat_dim: u32::try_from(feat_dim)
                .map_err(|_| StoreError::Invalid("feat_dim overflows u32".into()))?,
            num_frames: u32::try_from(num_frames)
                .map_err(|_| StoreError::Invalid("num_frames overflows u32".into()))?,
            dtype_code: DTYPE_F32_LE,
        };
        let features = Self { header, layers };
        features.validate()?;
        Ok(features)
    }

    pub fn header(&self) -> &FeatureHeader {
        &self.header
    }

    pub fn layer(&self, index: u16) -> Option<&Array2<f32>> {
        self.layers.get(&index)
    }

    pub fn layers(&self) -> &BTreeMap<u16, Array2<f32>> {
        &self.layers
    }

    pub fn into_layers(self) -> BTreeMap<u16, Array2<f32>> {
        self.layers
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        self.header.validate().map_err(StoreError::Invalid)?;
        let shape = self.header.shape();
        if self.layers.keys().copied().ne(self.header.layer_indices.iter().copied()) {
            return Err(StoreError::Invalid(
                "layer map does not match header index table".into(),
            ));
        }
        for (&idx, m) in &self.layers {
            if m.dim() != shape {
                return Err(StoreError::Invalid(format!(
                    "layer {idx} has shape {:?}, expected {shape:?}",
                    m.dim()
                )));
            }
            if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
                return Err(StoreError::Invalid(format!(
                    "layer {idx} has a non-finite value at [{}, {}]",
                    pos / shape.1,
                    pos % shape.1
                )));
            }
        }
        Ok(())
    }
}

/// Writes `features` to `destination`. Invariants are checked before the
/// file is created.
pub fn write_feature_file(features: &UtteranceFeatures, destination: &Path) -> Result<(), StoreError> {
    features.validate()?;
    let file = File::create(destination).map_err(|e| StoreError::io(destination, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>| -> io::Result<()> {
        features.header.encode(out)?;
        let mut buf = Vec::with_capacity(features.header.layer_bytes() as usize);
        for m in features.layers.values() {
            buf.clear();
            for v in m.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| StoreError::io(destination, e))
}

fn open(source: &Path) -> Result<BufReader<File>, StoreError> {
    File::open(source)
        .map(BufReader::new)
        .map_err(|e| StoreError::io(source, e))
}

fn attach_path(err: StoreError, source: &Path) -> StoreError {
    match err {
        StoreError::Io { path, source: e } if path.as_os_str().is_empty() => {
            StoreError::io(source, e)
        }
        other => other,
    }
}

/// Parses only the header.
pub fn read_header(source: &Path) -> Result<FeatureHeader, StoreError> {
    let mut reader = open(source)?;
    FeatureHeader::decode(&mut reader).map_err(|e| attach_path(e, source))
}

fn read_matrix(
    reader: &mut impl Read,
    header: &FeatureHeader,
    layer: u16,
    buf: &mut Vec<u8>,
) -> Result<Array2<f32>, StoreError> {
    buf.resize(header.layer_bytes() as usize, 0);
    reader.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => StoreError::TruncatedData { layer },
        _ => StoreError::Io {
            path: PathBuf::new(),
            source: e,
        },
    })?;
    let data: Vec<f32> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec(header.shape(), data).expect("length matches header"))
}

/// Reads one layer's `[T, D]` matrix, seeking straight to its offset.
pub fn read_feature_layer(source: &Path, layer: u16) -> Result<Array2<f32>, StoreError> {
    let mut reader = open(source)?;
    let header = FeatureHeader::decode(&mut reader).map_err(|e| attach_path(e, source))?;
    let offset = header
        .layer_offset(layer)
        .ok_or_else(|| StoreError::MissingLayer {
            layer,
            available: header.layer_indices.clone(),
        })?;
    reader
        .seek(SeekFrom::Start(offset))
        .map_err(|e| StoreError::io(source, e))?;
    read_matrix(&mut reader, &header, layer, &mut Vec::new()).map_err(|e| attach_path(e, source))
}

pub fn read_feature_file(source: &Path) -> Result<UtteranceFeatures, StoreError> {
    let mut reader = open(source)?;
    let header = FeatureHeader::decode(&mut reader).map_err(|e| attach_path(e, source))?;
    let mut buf = Vec::new();
    let mut layers = BTreeMap::new();
    for &idx in &header.layer_indices {
        let m = read_matrix(&mut reader, &header, idx, &mut buf)
            .map_err(|e| attach_path(e, source))?;
        layers.insert(idx, m);
    }
    Ok(UtteranceFeatures { header, layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub mos: f64,
    pub split: Split,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad header {found:?}, expected utt_id,path,mos,split")]
    BadHeader { found: Vec<String> },
    #[error("row {row}: malformed record: {reason}")]
    Malformed { row: usize, reason: String },
    #[error("row {row}: duplicate utt_id {utt_id:?}")]
    DuplicateId { row: usize, utt_id: String },
    #[error("row {row}: mos {mos} outside [1, 5]")]
    MosOutOfRange { row: usize, mos: f64 },
    #[error("row {row}: unknown split {label:?}")]
    UnknownSplit { row: usize, label: String },
}

const MANIFEST_HEADER: [&str; 4] = ["utt_id", "path", "mos", "split"];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// `root` is the directory relative paths resolve against.
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self, ManifestError> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            let row = i + 1;
            if !seen.insert(e.utt_id.as_str()) {
                return Err(ManifestError::DuplicateId {
                    row,
                    utt_id: e.utt_id.clone(),
                });
            }
            if !(1.0..=5.0).contains(&e.mos) {
                return Err(ManifestError::MosOutOfRange { row, mos: e.mos });
            }
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = MANIFEST_HEADER.join(",");
        out.push('\n');
        for e in &self.entries {
            let path = e.path.to_string_lossy();
            out.push_str(&format!("{},{},{},{}\n", e.utt_id, path, e.mos, e.split));
        }
        out
    }

    pub fn write(&self, destination: &Path) -> Result<(), ManifestError> {
        std::fs::write(destination, self.to_csv_string()).map_err(|source| ManifestError::Io {
            path: destination.to_path_buf(),
            source,
        })
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self, ManifestError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| ManifestError::Malformed {
            row: 0,
            reason: e.to_string(),
        })?;
        if headers.iter().ne(MANIFEST_HEADER) {
            return Err(ManifestError::BadHeader {
                found: headers.iter().map(str::to_string).collect(),
            });
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let record = record.map_err(|e| ManifestError::Malformed {
                row,
                reason: e.to_string(),
            })?;
            if record.len() != 4 {
                return Err(ManifestError::Malformed {
                    row,
                    reason: format!("expected 4 fields, got {}", record.len()),
                });
            }
            let utt_id = record[0].to_string();
            if utt_id.is_empty() {
                return Err(ManifestError::Malformed {
                    row,
                    reason: "empty utt_id".into(),
                });
            }
            let mos: f64 = record[2].parse().map_err(|_| ManifestError::Malformed {
                row,
                reason: format!("mos {:?} is not a number", &record[2]),
            })?;
            if !(1.0..=5.0).contains(&mos) {
                return Err(ManifestError::MosOutOfRange { row, mos });
            }
            let split = record[3].parse().map_err(|_| ManifestError::UnknownSplit {
                row,
                label: record[3].to_string(),
            })?;
            if !seen.insert(utt_id.clone()) {
                return Err(ManifestError::DuplicateId { row, utt_id });
            }
            entries.push(ManifestEntry {
                utt_id,
                path: PathBuf::from(&record[1]),
                mos,
                split,
            });
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }
}

/// Reads a manifest CSV; relative paths resolve against its directory.
pub fn load_manifest(source: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = std::fs::read_to_string(source).map_err(|e| ManifestError::Io {
        path: source.to_path_buf(),
        source: e,
    })?;
    let root = source.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::parse(&text, root)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IssueKind {
    MissingFile,
    Unreadable(String),
    DimMismatch { found: u32, majority: u32 },
    FramesMismatch { found: u32, majority: u32 },
    MissingLayer(u16),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreIssue {
    pub utt_id: String,
    pub kind: IssueKind,
}

impl fmt::Display for StoreIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            IssueKind::MissingFile => write!(f, "{}: feature file missing", self.utt_id),
            IssueKind::Unreadable(why) => write!(f, "{}: unreadable header: {why}", self.utt_id),
            IssueKind::DimMismatch { found, majority } => {
                write!(f, "{}: feat_dim {found}, majority is {majority}", self.utt_id)
            }
            IssueKind::FramesMismatch { found, majority } => {
                write!(f, "{}: num_frames {found}, majority is {majority}", self.utt_id)
            }
            IssueKind::MissingLayer(l) => write!(f, "{}: layer {l} not stored", self.utt_id),
        }
    }
}

/// Problems found by [`validate_store`]; empty means sweep-ready.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub issues: Vec<StoreIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Most frequent value; ties go to the smallest.
fn majority(values: impl Iterator<Item = u32>) -> Option<u32> {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(v, _)| v)
}

/// Checks every manifest entry's header: file present, geometry agreeing
/// with the majority, and every required layer stored.
pub fn validate_store(manifest: &DatasetManifest, required_layers: &[u16]) -> ValidationReport {
    let mut issues = Vec::new();
    let mut headers = Vec::new();
    for entry in manifest.entries() {
        let path = manifest.resolve(entry);
        if !path.is_file() {
            issues.push(StoreIssue {
                utt_id: entry.utt_id.clone(),
                kind: IssueKind::MissingFile,
            });
            continue;
        }
        match read_header(&path) {
            Ok(h) => headers.push((entry.utt_id.clone(), h)),
            Err(e) => issues.push(StoreIssue {
                utt_id: entry.utt_id.clone(),
                kind: IssueKind::Unreadable(e.to_string()),
            }),
        }
    }
    let dim = majority(headers.iter().map(|(_, h)| h.feat_dim));
    let frames = majority(headers.iter().map(|(_, h)| h.num_frames));
    for (utt_id, h) in &headers {
        if let Some(majority) = dim.filter(|&d| d != h.feat_dim) {
            issues.push(StoreIssue {
                utt_id: utt_id.clone(),
                kind: IssueKind::DimMismatch {
                    found: h.feat_dim,
                    majority,
                },
            });
        }
        if let Some(majority) = frames.filter(|&t| t != h.num_frames) {
            issues.push(StoreIssue {
                utt_id: utt_id.clone(),
                kind: IssueKind::FramesMismatch {
                    found: h.num_frames,
                    majority,
                },
            });
        }
        for &layer in required_layers {
            if h.layer_position(layer).is_none() {
                issues.push(StoreIssue {
                    utt_id: utt_id.clone(),
                    kind: IssueKind::MissingLayer(layer),
                });
            }
        }
    }
    ValidationReport { issues }
}
