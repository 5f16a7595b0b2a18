//! LIBSVM ingestion and the on-disk binary record cache.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! header   magic "SPRW1" | n: u64 | d: u64 | layout: u8 (0 dense, 1 sparse)
//!          | seed: u64 | shuffled: u8 | index_offset: u64
//! dense    d x f32 feature values, then i8 label
//! sparse   i8 label | count: u32 | count x (index: u32, value: f32)
//! index    (sparse only) n x u64 record offsets, starting at index_offset
//! ```
//!
//! Feature indices are 0-based in memory and 1-based in LIBSVM text.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{FeatureAccess, Features};

pub const MAGIC: &[u8; 5] = b"SPRW1";
const HEADER_LEN: u64 = 5 + 8 + 8 + 1 + 8 + 1 + 8;
/// Read buffer for sequential streams.
pub const STREAM_BUFFER: usize = 1 << 16;
const DENSE_MAX_DIM: usize = 1024;
const DENSE_MIN_DENSITY: f64 = 0.25;

/// Label and 0-based `(index, value)` entries of one LIBSVM line.
pub type LibsvmRow = (i8, Vec<(u32, f32)>);

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub index: u64,
    pub x: Features,
    /// -1 or +1
    pub y: i8,
}

/// A dataset that can be read front to back any number of times.
pub trait RecordSource {
    fn len(&self) -> u64;

    fn dim(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn records(&self) -> Result<Box<dyn Iterator<Item = Result<Record>> + '_>>;
}

/// Records held in memory; used for holdout sets and tests.
#[derive(Clone, Debug, Default)]
pub struct MemoryDataset {
    dim: usize,
    records: Vec<Record>,
}

impl MemoryDataset {
    pub fn new(dim: usize, records: Vec<Record>) -> Self {
        MemoryDataset { dim, records }
    }

    pub fn from_dense(rows: Vec<(Vec<f32>, i8)>) -> Self {
        let dim = rows.first().map_or(0, |(x, _)| x.len());
        let records = rows
            .into_iter()
            .enumerate()
            .map(|(i, (x, y))| Record {
                index: i as u64,
                x: Features::Dense(x),
                y,
            })
            .collect();
        MemoryDataset { dim, records }
    }

    pub fn as_slice(&self) -> &[Record] {
        &self.records
    }

    /// `(x, y)` pairs as consumed by [`crate::model::exp_loss`].
    pub fn examples(&self) -> impl Iterator<Item = (&Features, f64)> {
        self.records.iter().map(|r| (&r.x, f64::from(r.y)))
    }
}

impl RecordSource for MemoryDataset {
    fn len(&self) -> u64 {
        self.records.len() as u64
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn records(&self) -> Result<Box<dyn Iterator<Item = Result<Record>> + '_>> {
        Ok(Box::new(self.records.iter().cloned().map(Ok)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Dense,
    Sparse,
}

impl Layout {
    fn tag(self) -> u8 {
        match self {
            Layout::Dense => 0,
            Layout::Sparse => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Layout::Dense),
            1 => Ok(Layout::Sparse),
            other => Err(Error::Format(format!("unknown layout tag {other}"))),
        }
    }

    /// Dense for narrow data with more than a quarter of entries present.
    pub fn choose(dim: usize, n: u64, nnz: u64) -> Self {
        let cells = dim as f64 * n as f64;
        if dim <= DENSE_MAX_DIM && cells > 0.0 && nnz as f64 / cells > DENSE_MIN_DENSITY {
            Layout::Dense
        } else {
            Layout::Sparse
        }
    }
}

/// An ingested, disk-resident dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    path: PathBuf,
    n: u64,
    dim: usize,
    layout: Layout,
    seed: u64,
    shuffled: bool,
    index_offset: u64,
}

impl Dataset {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut f = BufReader::new(File::open(&path)?);
        let mut magic = [0u8; 5];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{} is not a dataset cache", path.display())));
        }
        let n = read_u64(&mut f)?;
        let dim = read_u64(&mut f)? as usize;
        let layout = Layout::from_tag(read_u8(&mut f)?)?;
        let seed = read_u64(&mut f)?;
        let shuffled = read_u8(&mut f)? != 0;
        let index_offset = read_u64(&mut f)?;
        Ok(Dataset {
            path,
            n,
            dim,
            layout,
            seed,
            shuffled,
            index_offset,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shuffled(&self) -> bool {
        self.shuffled
    }

    /// Sequential reader over all records in stored order.
    pub fn stream(&self) -> Result<RecordStream> {
        let mut file = File::open(&self.path)?;
        file.seek(SeekFrom::Start(HEADER_LEN))?;
        Ok(RecordStream {
            reader: BufReader::with_capacity(STREAM_BUFFER, file),
            layout: self.layout,
            dim: self.dim,
            next: 0,
            n: self.n,
        })
    }

    pub fn read_at(&self, index: u64) -> Result<Record> {
        if index >= self.n {
            return Err(Error::domain(format!("record {index} out of range (n = {})", self.n)));
        }
        let mut file = File::open(&self.path)?;
        let offset = match self.layout {
            Layout::Dense => HEADER_LEN + index * dense_record_len(self.dim),
            Layout::Sparse => {
                file.seek(SeekFrom::Start(self.index_offset + 8 * index))?;
                read_u64(&mut file)?
            }
        };
        file.seek(SeekFrom::Start(offset))?;
        let mut reader = BufReader::new(file);
        read_record(&mut reader, self.layout, self.dim, index)
            .map_err(|source| Error::Stream { position: index, source })
    }

    /// Loads every record; for holdout sets that fit in memory.
    pub fn load(&self) -> Result<MemoryDataset> {
        let records = self.stream()?.collect::<Result<Vec<_>>>()?;
        Ok(MemoryDataset::new(self.dim, records))
    }
}

impl RecordSource for Dataset {
    fn len(&self) -> u64 {
        self.n
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn records(&self) -> Result<Box<dyn Iterator<Item = Result<Record>> + '_>> {
        Ok(Box::new(self.stream()?))
    }
}

pub struct RecordStream {
    reader: BufReader<File>,
    layout: Layout,
    dim: usize,
    next: u64,
    n: u64,
}

impl Iterator for RecordStream {
    type Item = Result<Record>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.n {
            return None;
        }
        let index = self.next;
        self.next += 1;
        Some(
            read_record(&mut self.reader, self.layout, self.dim, index)
                .map_err(|source| Error::Stream { position: index, source }),
        )
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.n - self.next) as usize;
        (left, Some(left))
    }
}

fn dense_record_len(dim: usize) -> u64 {
    4 * dim as u64 + 1
}

fn read_u8(r: &mut impl Read) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> io::Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn read_label(r: &mut impl Read) -> io::Result<i8> {
    match read_u8(r)? as i8 {
        y @ (-1 | 1) => Ok(y),
        other => Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("stored label {other} is not -1 or +1"),
        )),
    }
}

fn read_record(r: &mut impl Read, layout: Layout, dim: usize, index: u64) -> io::Result<Record> {
    match layout {
        Layout::Dense => {
            let mut buf = vec![0u8; 4 * dim];
            r.read_exact(&mut buf)?;
            let x = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let y = read_label(r)?;
            Ok(Record {
                index,
                x: Features::Dense(x),
                y,
            })
        }
        Layout::Sparse => {
            let y = read_label(r)?;
            let count = read_u32(r)? as usize;
            if count > dim {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("record has {count} entries for dimension {dim}"),
                ));
            }
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                let j = read_u32(r)?;
                let v = read_f32(r)?;
                entries.push((j, v));
            }
            Ok(Record {
                index,
                x: Features::Sparse { dim, entries },
                y,
            })
        }
    }
}

/// Appends records to a new binary cache file.
pub struct DatasetWriter {
    out: BufWriter<File>,
    path: PathBuf,
    dim: usize,
    layout: Layout,
    seed: u64,
    shuffled: bool,
    n: u64,
    position: u64,
    offsets: Vec<u64>,
}

impl DatasetWriter {
    pub fn create(
        path: impl AsRef<Path>,
        dim: usize,
        layout: Layout,
        seed: u64,
        shuffled: bool,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut out = BufWriter::new(File::create(&path)?);
        out.write_all(&[0u8; HEADER_LEN as usize])?;
        Ok(DatasetWriter {
            out,
            path,
            dim,
            layout,
            seed,
            shuffled,
            n: 0,
            position: HEADER_LEN,
            offsets: Vec::new(),
        })
    }

    pub fn push(&mut self, x: &Features, y: i8) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::Dimension {
                feature: x.dim(),
                dim: self.dim,
            });
        }
        if y != 1 && y != -1 {
            return Err(Error::domain(format!("label must be -1 or +1, got {y}")));
        }
        match self.layout {
            Layout::Dense => {
                for v in x.to_dense() {
                    self.out.write_all(&v.to_le_bytes())?;
                }
                self.out.write_all(&[y as u8])?;
                self.position += dense_record_len(self.dim);
            }
            Layout::Sparse => {
                self.offsets.push(self.position);
                let nz = x.nonzeros();
                self.out.write_all(&[y as u8])?;
                self.out.write_all(&(nz.len() as u32).to_le_bytes())?;
                for (j, v) in &nz {
                    self.out.write_all(&j.to_le_bytes())?;
                    self.out.write_all(&v.to_le_bytes())?;
                }
                self.position += 1 + 4 + 8 * nz.len() as u64;
            }
        }
        self.n += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<Dataset> {
        let index_offset = match self.layout {
            Layout::Dense => 0,
            Layout::Sparse => {
                for off in &self.offsets {
                    self.out.write_all(&off.to_le_bytes())?;
                }
                self.position
            }
        };
        let mut file = self.out.into_inner().map_err(|e| e.into_error())?;
        file.seek(SeekFrom::Start(0))?;
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&self.n.to_le_bytes());
        header.extend_from_slice(&(self.dim as u64).to_le_bytes());
        header.push(self.layout.tag());
        header.extend_from_slice(&self.seed.to_le_bytes());
        header.push(u8::from(self.shuffled));
        header.extend_from_slice(&index_offset.to_le_bytes());
        file.write_all(&header)?;
        file.sync_all()?;
        Dataset::open(&self.path)
    }
}

/// Parses one LIBSVM line. Returns `None` for blank and comment-only lines.
pub fn parse_libsvm_line(line: &str, line_no: usize) -> Result<Option<LibsvmRow>> {
    let content = line.split('#').next().unwrap_or("").trim();
    if content.is_empty() {
        return Ok(None);
    }
    let err = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let mut tokens = content.split_whitespace();
    let label_tok = tokens.next().unwrap_or_default();
    let label: f64 = label_tok
        .parse()
        .map_err(|_| err(format!("invalid label {label_tok:?}")))?;
    let y = if label == 1.0 {
        1
    } else if label == -1.0 || label == 0.0 {
        -1
    } else {
        return Err(err(format!("label {label_tok} is not one of -1, +1, 0, 1")));
    };
    let mut entries = Vec::new();
    let mut last = 0u32;
    for tok in tokens {
        let (idx, val) = tok
            .split_once(':')
            .ok_or_else(|| err(format!("expected index:value, got {tok:?}")))?;
        let idx: u32 = idx
            .parse()
            .map_err(|_| err(format!("invalid feature index {idx:?}")))?;
        if idx == 0 {
            return Err(err("feature indices are 1-based".into()));
        }
        if idx <= last {
            return Err(err(format!("feature index {idx} is not ascending")));
        }
        let val: f32 = val
            .parse()
            .map_err(|_| err(format!("invalid feature value {val:?}")))?;
        last = idx;
        entries.push((idx - 1, val));
    }
    Ok(Some((y, entries)))
}

/// Reads a whole LIBSVM file. Dimensionality is the largest index seen.
pub fn read_libsvm(path: impl AsRef<Path>) -> Result<(usize, Vec<LibsvmRow>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    let mut dim = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if let Some((y, entries)) = parse_libsvm_line(&line, i + 1)? {
            if let Some(&(j, _)) = entries.last() {
                dim = dim.max(j as usize + 1);
            }
            rows.push((y, entries));
        }
    }
    Ok((dim, rows))
}

#[derive(Clone, Copy, Debug)]
pub struct IngestOptions {
    pub seed: u64,
    /// Holdout sets keep file order.
    pub shuffle: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            seed: 0,
            shuffle: true,
        }
    }
}

/// Parses `input`, applies a seeded permutation and writes the binary cache.
pub fn ingest(input: impl AsRef<Path>, output: impl AsRef<Path>, opts: IngestOptions) -> Result<Dataset> {
    let (dim, mut rows) = read_libsvm(input)?;
    if rows.is_empty() {
        return Err(Error::domain("dataset has no examples"));
    }
    if opts.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rows.shuffle(&mut rng);
    }
    let nnz: u64 = rows.iter().map(|(_, e)| e.len() as u64).sum();
    let layout = Layout::choose(dim, rows.len() as u64, nnz);
    let mut writer = DatasetWriter::create(output, dim, layout, opts.seed, opts.shuffle)?;
    for (y, entries) in rows {
        writer.push(&Features::Sparse { dim, entries }, y)?;
    }
    writer.finish()
}

/// Writes rows as LIBSVM text, skipping zero entries.
pub fn write_libsvm<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = (&'a Features, i8)>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (x, y) in rows {
        write!(out, "{}", if y > 0 { "+1" } else { "-1" })?;
        for (j, v) in x.nonzeros() {
            write!(out, " {}:{}", j + 1, v)?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
