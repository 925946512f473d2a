//! On-disk formats for embeddings, labels, class tables, multi-label ground
//! truth, scatter checkpoints and fitted transforms.
//!
//! All integers and floats are little-endian.
//!
//! | file  | header                                                          | payload                         |
//! |-------|-----------------------------------------------------------------|---------------------------------|
//! | KFEB  | magic, u16 version, u8 dtype (0 = f32), u8 flags, u32 dim, u64 count, 4 pad bytes (24 total) | `count × dim` f32, row-major |
//! | KFLB  | magic, u16 version, u64 count (14 total)                         | `count` u32 class ids           |
//! | KFTX  | magic, u16 version, u32 D, u32 L, f64 λ (22 total)               | μ (D), Z (D×D), U_L (D×L), γ (L), all f64 |
//! | KFST  | magic, u16 version, u64 D, u64 K (22 total)                      | counts (K u64), class sums (K×D f64), second moment (D×D f64) |
//!
//! Class tables are UTF-8 TSV (`id<TAB>name`), ground truth is NDJSON
//! (`{"index": i, "labels": [..]}`).
//!
//! Readers validate the header and the file length before touching the
//! payload, so a corrupt header can never trigger a large allocation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::stats::ScatterStats;
use crate::transform::KooFuTransform;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"KFEB";
pub const LABEL_MAGIC: &[u8; 4] = b"KFLB";
pub const TRANSFORM_MAGIC: &[u8; 4] = b"KFTX";
pub const STATS_MAGIC: &[u8; 4] = b"KFST";
pub const FORMAT_VERSION: u16 = 1;

pub const EMBEDDING_HEADER_LEN: u64 = 24;
pub const LABEL_HEADER_LEN: u64 = 14;
pub const TRANSFORM_HEADER_LEN: u64 = 22;
pub const STATS_HEADER_LEN: u64 = 22;

const DTYPE_F32: u8 = 0;
const READ_CHUNK: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype {0} (only 0 = f32 is defined)")]
    UnsupportedDtype(u8),
    #[error("truncated file: header declares {expected} bytes, file has {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("trailing bytes: header declares {expected} bytes, file has {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Row-major matrix of 32-bit embeddings, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    dim: usize,
    data: Vec<f32>,
}

impl Embeddings {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(DataError::Shape(
                "embedding dimension must be positive".into(),
            ));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(DataError::Shape(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(DataError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Embeddings { dim, data })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(DataError::Shape(format!(
                    "row {i} has {} values, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Rows selected by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Embeddings {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Embeddings {
            dim: self.dim,
            data,
        }
    }

    /// Bytes held by the vector payload.
    pub fn payload_bytes(&self) -> u64 {
        (self.data.len() * std::mem::size_of::<f32>()) as u64
    }
}

/// Dense class-id → name table; ids are exactly `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassTable {
    names: Vec<String>,
}

impl ClassTable {
    pub fn new(names: Vec<String>) -> Self {
        ClassTable { names }
    }

    /// Table with placeholder names `class_<id>`.
    pub fn numbered(count: usize) -> Self {
        ClassTable {
            names: (0..count).map(|i| format!("class_{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Labeled embeddings with a class table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub embeddings: Embeddings,
    pub labels: Vec<u32>,
    pub classes: ClassTable,
}

impl EmbeddingDataset {
    pub fn new(embeddings: Embeddings, labels: Vec<u32>, classes: ClassTable) -> Result<Self> {
        if labels.len() != embeddings.len() {
            return Err(DataError::Shape(format!(
                "{} labels for {} vectors",
                labels.len(),
                embeddings.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes.len()) {
            return Err(DataError::Invalid(format!(
                "label {bad} outside class table of {} entries",
                classes.len()
            )));
        }
        Ok(EmbeddingDataset {
            embeddings,
            labels,
            classes,
        })
    }

    /// Dataset whose class table is sized from the largest label.
    pub fn with_numbered_classes(embeddings: Embeddings, labels: Vec<u32>) -> Result<Self> {
        let k = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        Self::new(embeddings, labels, ClassTable::numbered(k))
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Rows `indices`, sharing the class table.
    pub fn select(&self, indices: &[usize]) -> EmbeddingDataset {
        EmbeddingDataset {
            embeddings: self.embeddings.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes.clone(),
        }
    }
}

/// Per-sample sets of acceptable labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MultiLabelGroundTruth {
    entries: BTreeMap<usize, BTreeSet<u32>>,
}

impl MultiLabelGroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, index: usize, labels: BTreeSet<u32>) -> Result<()> {
        if labels.is_empty() {
            return Err(DataError::Invalid(format!(
                "empty label set for sample {index}"
            )));
        }
        if self.entries.insert(index, labels).is_some() {
            return Err(DataError::Invalid(format!(
                "duplicate entry for sample {index}"
            )));
        }
        Ok(())
    }

    /// Singleton sets from plain labels.
    pub fn from_single_labels(labels: &[u32]) -> Self {
        MultiLabelGroundTruth {
            entries: labels
                .iter()
                .enumerate()
                .map(|(i, &l)| (i, BTreeSet::from([l])))
                .collect(),
        }
    }

    pub fn get(&self, index: usize) -> Option<&BTreeSet<u32>> {
        self.entries.get(&index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &BTreeSet<u32>)> {
        self.entries.iter().map(|(&i, s)| (i, s))
    }

    /// Checks every referenced class against a table of `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, set) in &self.entries {
            if let Some(&bad) = set.iter().find(|&&l| l as usize >= num_classes) {
                return Err(DataError::Invalid(format!(
                    "sample {i} references class {bad}, table has {num_classes}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// byte helpers

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Header { bytes, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        out
    }

    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

fn magic_str(m: &[u8]) -> String {
    String::from_utf8_lossy(m).into_owned()
}

/// Opens `path`, reads a fixed-size header and checks magic and version.
fn open_with_header(
    path: &Path,
    magic: &[u8; 4],
    header_len: u64,
) -> Result<(BufReader<File>, Vec<u8>, u64)> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut reader = BufReader::new(file);
    if file_len < 4 {
        return Err(DataError::Truncated {
            expected: header_len,
            actual: file_len,
        });
    }
    let mut header = vec![0u8; header_len.min(file_len) as usize];
    reader.read_exact(&mut header)?;
    if &header[..4] != magic {
        return Err(DataError::BadMagic {
            expected: magic_str(magic),
            found: magic_str(&header[..4]),
        });
    }
    if file_len < header_len {
        return Err(DataError::Truncated {
            expected: header_len,
            actual: file_len,
        });
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    Ok((reader, header, file_len))
}

fn check_length(header_len: u64, payload: Option<u64>, file_len: u64) -> Result<()> {
    let expected = payload
        .and_then(|p| p.checked_add(header_len))
        .ok_or_else(|| DataError::Shape("declared payload size overflows".into()))?;
    match file_len.cmp(&expected) {
        std::cmp::Ordering::Less => Err(DataError::Truncated {
            expected,
            actual: file_len,
        }),
        std::cmp::Ordering::Greater => Err(DataError::TrailingBytes {
            expected,
            actual: file_len,
        }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(count);
    let mut buf = vec![0u8; READ_CHUNK.min(count * 4).max(4)];
    let mut remaining = count;
    while remaining > 0 {
        let n = remaining.min(buf.len() / 4);
        r.read_exact(&mut buf[..n * 4])?;
        out.extend(
            buf[..n * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        remaining -= n;
    }
    Ok(out)
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

fn read_u32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(count);
    let mut b = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut b)?;
        out.push(u32::from_le_bytes(b));
    }
    Ok(out)
}

fn write_f64s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f64>) -> io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DataError::Invalid(format!("non-finite value in {what}")))
    }
}

// ---------------------------------------------------------------------------
// embeddings

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Embeddings> {
    let (mut reader, header, file_len) =
        open_with_header(path.as_ref(), EMBEDDING_MAGIC, EMBEDDING_HEADER_LEN)?;
    let mut h = Header::new(&header);
    h.take::<4>();
    h.u16();
    let dtype = h.u8();
    if dtype != DTYPE_F32 {
        return Err(DataError::UnsupportedDtype(dtype));
    }
    let flags = h.u8();
    if flags != 0 {
        return Err(DataError::Invalid(format!(
            "reserved flags byte is {flags}, expected 0"
        )));
    }
    let dim = h.u32() as u64;
    let count = h.u64();
    if dim == 0 {
        return Err(DataError::Shape(
            "embedding dimension must be positive".into(),
        ));
    }
    let payload = count.checked_mul(dim).and_then(|v| v.checked_mul(4));
    check_length(EMBEDDING_HEADER_LEN, payload, file_len)?;
    let data = read_f32s(&mut reader, (count * dim) as usize)?;
    Embeddings::new(dim as usize, data)
}

pub fn write_embeddings(embeddings: &Embeddings, path: impl AsRef<Path>) -> Result<()> {
    let dim = u32::try_from(embeddings.dim())
        .map_err(|_| DataError::Shape("dimension does not fit in u32".into()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, 0])?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&(embeddings.len() as u64).to_le_bytes())?;
    w.write_all(&[0u8; 4])?;
    for v in embeddings.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// labels and class tables

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let (mut reader, header, file_len) =
        open_with_header(path.as_ref(), LABEL_MAGIC, LABEL_HEADER_LEN)?;
    let mut h = Header::new(&header);
    h.take::<4>();
    h.u16();
    let count = h.u64();
    check_length(LABEL_HEADER_LEN, count.checked_mul(4), file_len)?;
    read_u32s(&mut reader, count as usize)
}

pub fn write_labels(labels: &[u32], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(LABEL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(labels.len() as u64).to_le_bytes())?;
    for l in labels {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_class_table(path: impl AsRef<Path>) -> Result<ClassTable> {
    let reader = BufReader::new(File::open(path)?);
    let mut by_id: BTreeMap<u32, String> = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (id, name) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            line: lineno + 1,
            msg: "expected id<TAB>name".into(),
        })?;
        let id: u32 = id.trim().parse().map_err(|e| DataError::Parse {
            line: lineno + 1,
            msg: format!("bad class id {id:?}: {e}"),
        })?;
        if by_id.insert(id, name.to_string()).is_some() {
            return Err(DataError::Parse {
                line: lineno + 1,
                msg: format!("duplicate class id {id}"),
            });
        }
    }
    for (expected, &id) in by_id.keys().enumerate() {
        if id as usize != expected {
            return Err(DataError::Invalid(format!(
                "class ids must be contiguous from 0; missing id {expected}"
            )));
        }
    }
    Ok(ClassTable::new(by_id.into_values().collect()))
}

pub fn write_class_table(table: &ClassTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, name) in table.names().iter().enumerate() {
        if name.contains('\n') || name.contains('\t') {
            return Err(DataError::Invalid(format!(
                "class {i} name contains a tab or newline"
            )));
        }
        writeln!(w, "{i}\t{name}")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads vectors and labels, plus the class table when given. Without a
/// table, placeholder names are generated up to the largest label.
pub fn read_dataset(
    embeddings: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    classes: Option<&Path>,
) -> Result<EmbeddingDataset> {
    let emb = read_embeddings(embeddings)?;
    let labels = read_labels(labels)?;
    match classes {
        Some(p) => EmbeddingDataset::new(emb, labels, read_class_table(p)?),
        None => EmbeddingDataset::with_numbered_classes(emb, labels),
    }
}

/// Plain list of class ids, one decimal id per line.
pub fn read_class_set(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let id: u32 = t.parse().map_err(|e| DataError::Parse {
            line: lineno + 1,
            msg: format!("bad class id {t:?}: {e}"),
        })?;
        if seen.insert(id) {
            out.push(id);
        }
    }
    Ok(out)
}

pub fn write_class_set(ids: &[u32], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for id in ids {
        writeln!(w, "{id}")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// multi-label ground truth

#[derive(Serialize, Deserialize)]
struct GroundTruthRecord {
    index: usize,
    labels: Vec<u32>,
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<MultiLabelGroundTruth> {
    let reader = BufReader::new(File::open(path)?);
    let mut gt = MultiLabelGroundTruth::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GroundTruthRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        gt.insert(rec.index, rec.labels.into_iter().collect())
            .map_err(|e| DataError::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
    }
    Ok(gt)
}

pub fn write_ground_truth(gt: &MultiLabelGroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (index, set) in gt.iter() {
        let rec = GroundTruthRecord {
            index,
            labels: set.iter().copied().collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// transforms

fn transform_bytes(t: &KooFuTransform) -> Result<Vec<u8>> {
    let d = u32::try_from(t.dim()).map_err(|_| DataError::Shape("D does not fit in u32".into()))?;
    let l = t.out_dim() as u32;
    let mut buf = Vec::with_capacity(
        TRANSFORM_HEADER_LEN as usize + 8 * (t.dim() * (1 + t.dim() + t.out_dim()) + t.out_dim()),
    );
    buf.extend_from_slice(TRANSFORM_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    buf.extend_from_slice(&l.to_le_bytes());
    buf.extend_from_slice(&t.lambda().to_le_bytes());
    write_f64s(&mut buf, t.mean().iter().copied())?;
    write_f64s(&mut buf, linalg::to_row_major(t.whitener()))?;
    write_f64s(&mut buf, linalg::to_row_major(t.rotation()))?;
    write_f64s(&mut buf, t.gammas().iter().copied())?;
    Ok(buf)
}

pub fn write_transform(t: &KooFuTransform, path: impl AsRef<Path>) -> Result<()> {
    let bytes = transform_bytes(t)?;
    let mut f = File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Short content hash of the serialized transform, used to tie prototype
/// banks and reports to the transform that produced them.
pub fn transform_id(t: &KooFuTransform) -> Result<String> {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(transform_bytes(t)?);
    Ok(hex::encode(&digest[..8]))
}

pub fn read_transform(path: impl AsRef<Path>) -> Result<KooFuTransform> {
    let (mut reader, header, file_len) =
        open_with_header(path.as_ref(), TRANSFORM_MAGIC, TRANSFORM_HEADER_LEN)?;
    let mut h = Header::new(&header);
    h.take::<4>();
    h.u16();
    let d = h.u32() as u64;
    let l = h.u32() as u64;
    let lambda = h.f64();
    if d == 0 {
        return Err(DataError::Shape(
            "transform dimension D must be positive".into(),
        ));
    }
    if l == 0 || l > d {
        return Err(DataError::Shape(format!(
            "output dimension L={l} must be in 1..=D={d}"
        )));
    }
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(DataError::Invalid(format!(
            "shrinkage λ must be positive and finite, got {lambda}"
        )));
    }
    let floats = d
        .checked_mul(d)
        .and_then(|dd| dd.checked_add(d))
        .and_then(|v| v.checked_add(d.checked_mul(l)?))
        .and_then(|v| v.checked_add(l));
    check_length(
        TRANSFORM_HEADER_LEN,
        floats.and_then(|f| f.checked_mul(8)),
        file_len,
    )?;
    let (d, l) = (d as usize, l as usize);
    let mean = read_f64s(&mut reader, d)?;
    let whitener = read_f64s(&mut reader, d * d)?;
    let rotation = read_f64s(&mut reader, d * l)?;
    let gammas = read_f64s(&mut reader, l)?;
    for (vals, what) in [
        (&mean, "mean"),
        (&whitener, "whitener"),
        (&rotation, "rotation"),
        (&gammas, "eigenvalues"),
    ] {
        ensure_finite(vals, what)?;
    }
    KooFuTransform::from_parts(
        lambda,
        mean,
        linalg::from_row_major(d, d, &whitener),
        linalg::from_row_major(d, l, &rotation),
        gammas,
    )
    .map_err(|e| DataError::Invalid(e.to_string()))
}

// ---------------------------------------------------------------------------
// scatter checkpoints

pub fn write_stats(stats: &ScatterStats, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(STATS_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(stats.dim() as u64).to_le_bytes())?;
    w.write_all(&(stats.num_classes() as u64).to_le_bytes())?;
    for &c in stats.counts() {
        w.write_all(&c.to_le_bytes())?;
    }
    write_f64s(&mut w, stats.class_sums().iter().copied())?;
    write_f64s(&mut w, linalg::to_row_major(stats.second_moment()))?;
    w.flush()?;
    Ok(())
}

pub fn read_stats(path: impl AsRef<Path>) -> Result<ScatterStats> {
    let (mut reader, header, file_len) =
        open_with_header(path.as_ref(), STATS_MAGIC, STATS_HEADER_LEN)?;
    let mut h = Header::new(&header);
    h.take::<4>();
    h.u16();
    let d = h.u64();
    let k = h.u64();
    if d == 0 {
        return Err(DataError::Shape(
            "stats dimension D must be positive".into(),
        ));
    }
    let words = d
        .checked_mul(d)
        .and_then(|dd| dd.checked_add(k))
        .and_then(|v| v.checked_add(k.checked_mul(d)?));
    check_length(
        STATS_HEADER_LEN,
        words.and_then(|w| w.checked_mul(8)),
        file_len,
    )?;
    let (d, k) = (d as usize, k as usize);
    let mut counts = Vec::with_capacity(k);
    let mut b = [0u8; 8];
    for _ in 0..k {
        reader.read_exact(&mut b)?;
        counts.push(u64::from_le_bytes(b));
    }
    let sums = read_f64s(&mut reader, k * d)?;
    let moment = read_f64s(&mut reader, d * d)?;
    ensure_finite(&sums, "class sums")?;
    ensure_finite(&moment, "second moment")?;
    ScatterStats::from_parts(counts, sums, DMatrix::from_row_slice(d, d, &moment))
        .map_err(|e| DataError::Invalid(e.to_string()))
}

/// Kind of artifact, detected from the first four bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Embeddings,
    Labels,
    Transform,
    Stats,
}

pub fn sniff(path: impl AsRef<Path>) -> Result<Option<ArtifactKind>> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = f.read(&mut magic[got..])?;
        if n == 0 {
            return Ok(None);
        }
        got += n;
    }
    Ok(match &magic {
        EMBEDDING_MAGIC => Some(ArtifactKind::Embeddings),
        LABEL_MAGIC => Some(ArtifactKind::Labels),
        TRANSFORM_MAGIC => Some(ArtifactKind::Transform),
        STATS_MAGIC => Some(ArtifactKind::Stats),
        _ => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn sample(n: usize, d: usize) -> Embeddings {
        let data = (0..n * d).map(|i| (i as f32 * 0.37).sin()).collect();
        Embeddings::new(d, data).unwrap()
    }

    #[test]
    fn empty_file_is_header_only() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("e.kfeb");
        write_embeddings(&Embeddings::empty(2).unwrap(), &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 24);
        let back = read_embeddings(&p).unwrap();
        assert_eq!(back.dim(), 2);
        assert!(back.is_empty());
    }

    #[test]
    fn file_size_matches_layout() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("e.kfeb");
        write_embeddings(&sample(3, 4), &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 24 + 3 * 4 * 4);
    }

    #[test]
    fn header_bytes_are_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("e.kfeb");
        write_embeddings(&sample(1, 3), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"KFEB");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 0);
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1u64.to_le_bytes());
        assert_eq!(&bytes[20..24], &[0, 0, 0, 0]);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("e.kfeb");
        write_embeddings(&sample(5, 3), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_embeddings(&p),
            Err(DataError::Truncated { .. })
        ));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&p, &longer).unwrap();
        assert!(matches!(
            read_embeddings(&p),
            Err(DataError::TrailingBytes { .. })
        ));
    }

    #[test]
    fn huge_declared_count_fails_before_allocation() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("e.kfeb");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"KFEB");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&[0, 0]);
        bytes.extend_from_slice(&768u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&[0; 4]);
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_embeddings(&p).is_err());
    }

    #[test]
    fn header_errors() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("e.kfeb");
        write_embeddings(&sample(2, 2), &p).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut b = good.clone();
        b[0] = b'X';
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(
            read_embeddings(&p),
            Err(DataError::BadMagic { .. })
        ));

        let mut b = good.clone();
        b[4] = 2;
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(
            read_embeddings(&p),
            Err(DataError::UnsupportedVersion(2))
        ));

        let mut b = good.clone();
        b[6] = 1;
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(
            read_embeddings(&p),
            Err(DataError::UnsupportedDtype(1))
        ));

        let mut b = good.clone();
        b[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(
            read_embeddings(&p),
            Err(DataError::NonFinite { row: 0, col: 0 })
        ));

        std::fs::write(&p, b"KF").unwrap();
        assert!(read_embeddings(&p).is_err());
    }

    #[test]
    fn labels_and_class_table() {
        let dir = tempdir().unwrap();
        let lp = dir.path().join("l.kflb");
        write_labels(&[2, 0, 1], &lp).unwrap();
        assert_eq!(std::fs::metadata(&lp).unwrap().len(), 14 + 12);
        assert_eq!(read_labels(&lp).unwrap(), vec![2, 0, 1]);

        let cp = dir.path().join("c.tsv");
        std::fs::write(&cp, "1\tdog\n0\tcat\n2\tgoldfish, Carassius auratus\n").unwrap();
        let table = read_class_table(&cp).unwrap();
        assert_eq!(table.len(), 3);
        assert_eq!(table.name(0), Some("cat"));
        assert_eq!(table.name(2), Some("goldfish, Carassius auratus"));

        std::fs::write(&cp, "0\tcat\n2\tdog\n").unwrap();
        assert!(read_class_table(&cp).is_err());
    }

    #[test]
    fn dataset_invariants() {
        let e = sample(3, 2);
        assert!(EmbeddingDataset::new(e.clone(), vec![0, 1], ClassTable::numbered(2)).is_err());
        assert!(EmbeddingDataset::new(e.clone(), vec![0, 1, 2], ClassTable::numbered(2)).is_err());
        let ds = EmbeddingDataset::with_numbered_classes(e, vec![0, 3, 1]).unwrap();
        assert_eq!(ds.num_classes(), 4);
    }

    #[test]
    fn ground_truth_ndjson() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("gt.ndjson");
        std::fs::write(
            &p,
            "{\"index\": 0, \"labels\": [3]}\n{\"index\": 4, \"labels\": [1, 2]}\n",
        )
        .unwrap();
        let gt = read_ground_truth(&p).unwrap();
        assert_eq!(gt.len(), 2);
        assert!(gt.get(4).unwrap().contains(&2));
        assert!(gt.validate(4).is_ok());
        assert!(gt.validate(3).is_err());

        std::fs::write(&p, "{\"index\": 0, \"labels\": []}\n").unwrap();
        assert!(read_ground_truth(&p).is_err());

        let q = dir.path().join("gt2.ndjson");
        let gt = MultiLabelGroundTruth::from_single_labels(&[1, 0, 5]);
        write_ground_truth(&gt, &q).unwrap();
        assert_eq!(read_ground_truth(&q).unwrap(), gt);
    }

    #[test]
    fn class_set_dedups() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("set.txt");
        std::fs::write(&p, "3\n1\n\n3\n").unwrap();
        assert_eq!(read_class_set(&p).unwrap(), vec![3, 1]);
    }

    proptest! {
        #[test]
        fn embeddings_round_trip_bitwise(
            d in 1usize..9,
            raw in proptest::collection::vec(-1e30f32..1e30f32, 0..64),
            labels_seed in any::<u32>(),
        ) {
            let n = raw.len() / d;
            let data = raw[..n * d].to_vec();
            let emb = Embeddings::new(d, data).unwrap();
            let labels: Vec<u32> = (0..n as u32).map(|i| i.wrapping_mul(labels_seed) % 7).collect();
            let dir = tempdir().unwrap();
            let ep = dir.path().join("e.kfeb");
            let lp = dir.path().join("l.kflb");
            write_embeddings(&emb, &ep).unwrap();
            write_labels(&labels, &lp).unwrap();
            let back = read_embeddings(&ep).unwrap();
            prop_assert_eq!(back.dim(), d);
            prop_assert!(back.as_slice().iter().zip(emb.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(read_labels(&lp).unwrap(), labels);
        }
    }
}
