//! Paired image/text embedding datasets and the GAPEMB v1 container.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! 0..8    magic "GAPEMB01"
//! u32     version (= 1)
//! u32     d
//! u64     N
//! u8      dtype (0 = f32)
//! u8      task kind (0 = multiclass, 1 = multilabel)
//! u16     reserved (= 0)
//! u32     C
//! N*d f32 image embeddings, row-major
//! N*d f32 text embeddings, row-major
//! labels  multiclass: N x u32, multilabel: N*C x u8
//! splits  N x u8 (0 = train, 1 = val, 2 = test)
//! ```
//!
//! A JSON manifest is written next to the payload as `<path>.manifest.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GapError, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 8] = b"GAPEMB01";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

const DTYPE_F32: u8 = 0;
const ZERO_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Split> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = GapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(GapError::parameter(
                "split",
                format!("expected train, val or test, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Multiclass,
    Multilabel,
}

impl TaskKind {
    fn code(self) -> u8 {
        match self {
            TaskKind::Multiclass => 0,
            TaskKind::Multilabel => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// One class index per row, each in `[0, C)`.
    Multiclass(Vec<u32>),
    /// N x C indicator matrix with entries in {0, 1}.
    Multilabel(Array2<u8>),
}

impl Labels {
    pub fn task_kind(&self) -> TaskKind {
        match self {
            Labels::Multiclass(_) => TaskKind::Multiclass,
            Labels::Multilabel(_) => TaskKind::Multilabel,
        }
    }

    fn len(&self) -> usize {
        match self {
            Labels::Multiclass(v) => v.len(),
            Labels::Multilabel(m) => m.nrows(),
        }
    }

    fn select(&self, rows: &[usize]) -> Labels {
        match self {
            Labels::Multiclass(v) => Labels::Multiclass(rows.iter().map(|&i| v[i]).collect()),
            Labels::Multilabel(m) => Labels::Multilabel(m.select(Axis(0), rows)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub backbone: String,
    /// Free-form provenance recorded by whatever produced the file.
    #[serde(default)]
    pub creation: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: u64,
    pub val: u64,
    pub test: u64,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Sidecar manifest describing a GAPEMB payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub dataset: String,
    pub backbone: String,
    #[serde(default)]
    pub creation: BTreeMap<String, serde_json::Value>,
    pub dim: u32,
    pub count: u64,
    pub class_count: u32,
    pub task_kind: TaskKind,
    pub split_counts: SplitCounts,
}

/// N aligned (image, text) embedding pairs with labels and split assignment.
///
/// Embeddings are held in f64; the container stores f32, so a write/read
/// cycle is exact only for values representable in f32 (which includes
/// everything that was itself read from a file).
#[derive(Debug, Clone, PartialEq)]
pub struct PairedEmbeddingDataset {
    image: Array2<f64>,
    text: Array2<f64>,
    labels: Labels,
    class_count: usize,
    splits: Vec<Split>,
    meta: DatasetMeta,
}

impl PairedEmbeddingDataset {
    pub fn new(
        image: Array2<f64>,
        text: Array2<f64>,
        labels: Labels,
        class_count: usize,
        splits: Vec<Split>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let ds = PairedEmbeddingDataset {
            image,
            text,
            labels,
            class_count,
            splits,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.image.dim();
        if self.text.dim() != (n, d) {
            return Err(GapError::validation(
                "text_embeddings",
                format!("shape {:?} differs from image shape {:?}", self.text.dim(), (n, d)),
            ));
        }
        if n == 0 {
            return Err(GapError::validation("count", "dataset has no rows"));
        }
        if d < 2 {
            return Err(GapError::validation("dim", format!("d must be at least 2, got {d}")));
        }
        if n > u64::MAX as usize || d > u32::MAX as usize {
            return Err(GapError::validation("dim", "shape exceeds format limits"));
        }
        for (field, m) in [("image_embeddings", &self.image), ("text_embeddings", &self.text)] {
            if let Some(pos) = m.iter().position(|x| !x.is_finite()) {
                return Err(GapError::validation(
                    field,
                    format!("non-finite value in row {}", pos / d),
                ));
            }
        }
        if self.class_count == 0 || self.class_count > u32::MAX as usize {
            return Err(GapError::validation("class_count", "C must be in [1, 2^32)"));
        }
        if self.labels.len() != n {
            return Err(GapError::validation(
                "labels",
                format!("{} label rows for {n} samples", self.labels.len()),
            ));
        }
        match &self.labels {
            Labels::Multiclass(v) => {
                if let Some((i, &c)) = v.iter().enumerate().find(|(_, &c)| c as usize >= self.class_count) {
                    return Err(GapError::validation(
                        "labels",
                        format!("row {i} has class {c}, but C = {}", self.class_count),
                    ));
                }
            }
            Labels::Multilabel(m) => {
                if m.ncols() != self.class_count {
                    return Err(GapError::validation(
                        "labels",
                        format!("{} label columns, but C = {}", m.ncols(), self.class_count),
                    ));
                }
                if let Some(pos) = m.iter().position(|&x| x > 1) {
                    return Err(GapError::validation(
                        "labels",
                        format!("row {} has a multilabel entry outside {{0, 1}}", pos / m.ncols()),
                    ));
                }
            }
        }
        if self.splits.len() != n {
            return Err(GapError::validation(
                "splits",
                format!("{} split entries for {n} samples", self.splits.len()),
            ));
        }
        if !self.splits.contains(&Split::Train) {
            return Err(GapError::validation("splits", "train split is empty"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.image.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.image.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn task_kind(&self) -> TaskKind {
        self.labels.task_kind()
    }

    pub fn image(&self) -> ArrayView2<'_, f64> {
        self.image.view()
    }

    pub fn text(&self) -> ArrayView2<'_, f64> {
        self.text.view()
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn set_meta(&mut self, meta: DatasetMeta) {
        self.meta = meta;
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for s in &self.splits {
            match s {
                Split::Train => c.train += 1,
                Split::Val => c.val += 1,
                Split::Test => c.test += 1,
            }
        }
        c
    }

    /// Same labels, splits and metadata with replacement embeddings.
    pub fn with_embeddings(&self, image: Array2<f64>, text: Array2<f64>) -> Result<Self> {
        PairedEmbeddingDataset::new(
            image,
            text,
            self.labels.clone(),
            self.class_count,
            self.splits.clone(),
            self.meta.clone(),
        )
    }

    /// Copy of the dataset restricted to `rows`, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.len()) {
            return Err(GapError::parameter("rows", format!("row {bad} out of range")));
        }
        PairedEmbeddingDataset::new(
            self.image.select(Axis(0), rows),
            self.text.select(Axis(0), rows),
            self.labels.select(rows),
            self.class_count,
            rows.iter().map(|&i| self.splits[i]).collect(),
            self.meta.clone(),
        )
    }

    /// Both modalities projected onto the unit sphere.
    pub fn normalized(&self) -> Result<Self> {
        self.with_embeddings(l2_normalize(self.image.view())?, l2_normalize(self.text.view())?)
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format: String::from_utf8_lossy(MAGIC).into_owned(),
            version: FORMAT_VERSION,
            dataset: self.meta.name.clone(),
            backbone: self.meta.backbone.clone(),
            creation: self.meta.creation.clone(),
            dim: self.dim() as u32,
            count: self.len() as u64,
            class_count: self.class_count as u32,
            task_kind: self.task_kind(),
            split_counts: self.split_counts(),
        }
    }
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(matrix: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = matrix.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm >= ZERO_ROW_NORM) || !norm.is_finite() {
            return Err(GapError::DegenerateEmbedding { row: i, norm });
        }
        row.mapv_inplace(|x| x / norm);
    }
    Ok(out)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Serializes the binary payload (no manifest).
pub fn encode(dataset: &PairedEmbeddingDataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let (n, d) = (dataset.len(), dataset.dim());
    let c = dataset.class_count();
    let mut buf = Vec::with_capacity(payload_len(n, d, c, dataset.task_kind()).unwrap_or(0));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.push(DTYPE_F32);
    buf.push(dataset.task_kind().code());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    for m in [&dataset.image, &dataset.text] {
        for row in m.rows() {
            for &x in row {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    match &dataset.labels {
        Labels::Multiclass(v) => {
            for &y in v {
                buf.extend_from_slice(&y.to_le_bytes());
            }
        }
        Labels::Multilabel(m) => {
            for row in m.rows() {
                buf.extend(row.iter().copied());
            }
        }
    }
    buf.extend(dataset.splits.iter().map(|s| s.code()));
    Ok(buf)
}

fn payload_len(n: usize, d: usize, c: usize, kind: TaskKind) -> Option<usize> {
    let emb = n.checked_mul(d)?.checked_mul(2 * 4)?;
    let labels = match kind {
        TaskKind::Multiclass => n.checked_mul(4)?,
        TaskKind::Multilabel => n.checked_mul(c)?,
    };
    HEADER_LEN.checked_add(emb)?.checked_add(labels)?.checked_add(n)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> io::Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("truncated payload at byte {}", self.pos),
            )),
        }
    }

    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> io::Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a binary payload. Metadata is left empty.
pub fn decode(bytes: &[u8]) -> Result<PairedEmbeddingDataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(GapError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(GapError::Format(format!("unsupported version {version}")));
    }
    let d = r.u32()? as usize;
    let n = usize::try_from(r.u64()?).map_err(|_| GapError::Format("N does not fit in memory".into()))?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(GapError::Format(format!("unsupported dtype code {dtype}")));
    }
    let kind = match r.u8()? {
        0 => TaskKind::Multiclass,
        1 => TaskKind::Multilabel,
        k => return Err(GapError::Format(format!("unknown task kind code {k}"))),
    };
    let reserved = r.u16()?;
    if reserved != 0 {
        return Err(GapError::Format(format!("reserved field is {reserved}, expected 0")));
    }
    let c = r.u32()? as usize;

    let expected = payload_len(n, d, c, kind)
        .ok_or_else(|| GapError::Format("header shape overflows".into()))?;
    if bytes.len() < expected {
        return Err(GapError::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("truncated payload: header implies {expected} bytes, file has {}", bytes.len()),
        )));
    }
    if bytes.len() > expected {
        return Err(GapError::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }

    let read_matrix = |r: &mut Reader<'_>| -> io::Result<Array2<f64>> {
        let raw = r.take(n * d * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Array2::from_shape_vec((n, d), data).expect("shape checked"))
    };
    let image = read_matrix(&mut r)?;
    let text = read_matrix(&mut r)?;
    let labels = match kind {
        TaskKind::Multiclass => Labels::Multiclass(
            r.take(n * 4)?
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        TaskKind::Multilabel => Labels::Multilabel(
            Array2::from_shape_vec((n, c), r.take(n * c)?.to_vec()).expect("shape checked"),
        ),
    };
    let splits = r
        .take(n)?
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            Split::from_code(code).ok_or_else(|| {
                GapError::validation("splits", format!("row {i} has unknown split code {code}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;

    PairedEmbeddingDataset::new(image, text, labels, c, splits, DatasetMeta::default())
}

/// Loads and validates a GAPEMB file plus its manifest sidecar, if present.
///
/// Embeddings are returned as stored; call [`PairedEmbeddingDataset::normalized`]
/// (or use [`read_normalized`]) before any geometry.
pub fn read_dataset(path: &Path) -> Result<PairedEmbeddingDataset> {
    let bytes = std::fs::read(path)?;
    let mut ds = decode(&bytes)?;
    let mpath = manifest_path(path);
    let meta = if mpath.exists() {
        let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(&mpath)?)
            .map_err(|e| GapError::validation("manifest", e.to_string()))?;
        check_manifest(&manifest, &ds)?;
        DatasetMeta {
            name: manifest.dataset,
            backbone: manifest.backbone,
            creation: manifest.creation,
        }
    } else {
        DatasetMeta {
            name: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            backbone: "unknown".into(),
            creation: BTreeMap::new(),
        }
    };
    ds.set_meta(meta);
    Ok(ds)
}

/// [`read_dataset`] followed by row normalization of both modalities.
pub fn read_normalized(path: &Path) -> Result<PairedEmbeddingDataset> {
    read_dataset(path)?.normalized()
}

fn check_manifest(m: &DatasetManifest, ds: &PairedEmbeddingDataset) -> Result<()> {
    let actual = ds.manifest();
    let mismatch = |field: &str, want: String, got: String| {
        Err(GapError::validation(
            format!("manifest.{field}"),
            format!("manifest says {want}, payload has {got}"),
        ))
    };
    if m.dim != actual.dim {
        return mismatch("dim", m.dim.to_string(), actual.dim.to_string());
    }
    if m.count != actual.count {
        return mismatch("count", m.count.to_string(), actual.count.to_string());
    }
    if m.class_count != actual.class_count {
        return mismatch("class_count", m.class_count.to_string(), actual.class_count.to_string());
    }
    if m.task_kind != actual.task_kind {
        return mismatch("task_kind", format!("{:?}", m.task_kind), format!("{:?}", actual.task_kind));
    }
    if m.split_counts != actual.split_counts {
        return mismatch(
            "split_counts",
            format!("{:?}", m.split_counts),
            format!("{:?}", actual.split_counts),
        );
    }
    Ok(())
}

/// Writes the payload and its manifest sidecar, each atomically.
pub fn write_dataset(dataset: &PairedEmbeddingDataset, path: &Path) -> Result<()> {
    let bytes = encode(dataset)?;
    let manifest = serde_json::to_vec_pretty(&dataset.manifest())?;
    write_atomic(path, &bytes)?;
    write_atomic(&manifest_path(path), &manifest)?;
    Ok(())
}
