//! MNIST ingestion (IDX files, optionally gzipped), per-pixel
//! standardisation, binary relabelling tasks and labelled-subset sampling.

use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ndcore::Matrix;
use crate::real::Real;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const STD_FLOOR: f64 = 1e-6;
pub const NUM_CLASSES: usize = 10;
/// Number of valid binary tasks, `2^10 - 2`.
pub const NUM_TASKS: usize = (1 << NUM_CLASSES) - 2;

/// Decoded IDX contents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Idx {
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
    },
    Labels(Vec<u8>),
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(parse_err(bytes.len(), format!("file ends inside the {what}"))),
    }
}

/// Parses an uncompressed IDX image (`0x803`) or label (`0x801`) file.
pub fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    let magic = be_u32(bytes, 0, "magic number")?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(parse_err(0, format!("unexpected magic number {other:#010x}"))),
    };
    let mut dims = Vec::with_capacity(ndims);
    for k in 0..ndims {
        dims.push(be_u32(bytes, 4 + 4 * k, "dimension sizes")? as usize);
    }
    let header = 4 + 4 * ndims;
    let size = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let end = size
        .and_then(|s| s.checked_add(header))
        .ok_or_else(|| parse_err(4, "dimension sizes overflow"))?;
    if bytes.len() < end {
        return Err(parse_err(
            bytes.len(),
            format!("payload truncated: expected {} bytes, file has {}", end, bytes.len()),
        ));
    }
    if bytes.len() > end {
        return Err(parse_err(
            end,
            format!("{} unexpected trailing bytes", bytes.len() - end),
        ));
    }
    let payload = bytes[header..end].to_vec();
    Ok(if ndims == 3 {
        Idx::Images {
            count: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels: payload,
        }
    } else {
        if let Some(pos) = payload.iter().position(|&l| l as usize >= NUM_CLASSES) {
            return Err(parse_err(header + pos, format!("label {} outside 0-9", payload[pos])));
        }
        Idx::Labels(payload)
    })
}

/// Reads a file, transparently decompressing gzip content.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_idx(path: &Path) -> Result<Idx> {
    parse_idx(&read_maybe_gzip(path)?)
}

pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), count * rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stems(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// Unstandardised images with their labels.
#[derive(Clone, Debug)]
pub struct RawSplit {
    pub count: usize,
    pub pixels_per_image: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

/// `dir/stem` or `dir/stem.gz`, whichever exists.
pub fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (also tried .gz)"),
    ))
}

pub fn load_raw_split(dir: &Path, split: Split) -> Result<RawSplit> {
    let (img_stem, lbl_stem) = split.stems();
    load_raw_files(&locate(dir, img_stem)?, &locate(dir, lbl_stem)?)
}

pub fn load_raw_files(images: &Path, labels: &Path) -> Result<RawSplit> {
    let (count, rows, cols, pixels) = match read_idx(images)? {
        Idx::Images {
            count,
            rows,
            cols,
            pixels,
        } => (count, rows, cols, pixels),
        Idx::Labels(_) => return Err(parse_err(0, format!("{} holds labels, not images", images.display()))),
    };
    let labels = match read_idx(labels)? {
        Idx::Labels(l) => l,
        Idx::Images { .. } => return Err(parse_err(0, format!("{} holds images, not labels", labels.display()))),
    };
    if labels.len() != count {
        return Err(parse_err(4, format!("{count} images but {} labels", labels.len())));
    }
    Ok(RawSplit {
        count,
        pixels_per_image: rows * cols,
        pixels,
        labels,
    })
}

/// Per-pixel mean and standard deviation of a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    pub fn fit(raw: &RawSplit) -> Result<Self> {
        if raw.count == 0 {
            return Err(Error::Domain("cannot standardise an empty split".into()));
        }
        let p = raw.pixels_per_image;
        let mut sum = vec![0.0f64; p];
        let mut sq = vec![0.0f64; p];
        for img in raw.pixels.chunks_exact(p) {
            for ((s, q), &v) in sum.iter_mut().zip(sq.iter_mut()).zip(img) {
                let v = v as f64;
                *s += v;
                *q += v * v;
            }
        }
        let n = raw.count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(StandardizationStats { mean, std })
    }

    pub fn apply<T: Real>(&self, raw: &RawSplit) -> Result<Matrix<T>> {
        let p = raw.pixels_per_image;
        if p != self.mean.len() {
            return Err(Error::dims("standardize", self.mean.len(), p));
        }
        let data = raw
            .pixels
            .chunks_exact(p)
            .flat_map(|img| {
                img.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(&v, (m, s))| T::of((v as f64 - m) / s))
            })
            .collect();
        Matrix::from_vec(raw.count, p, data)
    }
}

/// Standardised images with digit labels.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub images: Matrix<T>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    /// Rows `indices` of the image matrix, in order.
    pub fn gather(&self, indices: &[usize]) -> Matrix<T> {
        let d = self.dim();
        let mut out = Matrix::zeros(indices.len(), d);
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.images.row(i));
        }
        out
    }

    /// The first `n` examples.
    pub fn head(&self, n: usize) -> Dataset<T> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Dataset {
            images: self.gather(&idx),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }
}

/// Train and test splits standardised with training statistics.
pub fn load_mnist<T: Real>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let train = load_raw_split(dir, Split::Train)?;
    let test = load_raw_split(dir, Split::Test)?;
    standardize_splits(&train, &test)
}

pub fn standardize_splits<T: Real>(train: &RawSplit, test: &RawSplit) -> Result<(Dataset<T>, Dataset<T>)> {
    let stats = StandardizationStats::fit(train)?;
    Ok((
        Dataset {
            images: stats.apply(train)?,
            labels: train.labels.clone(),
            split: Split::Train,
        },
        Dataset {
            images: stats.apply(test)?,
            labels: test.labels.clone(),
            split: Split::Test,
        },
    ))
}

/// A binary task: digit `c` maps to label 1 when bit `c` of the mask is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskSpec(u16);

impl TaskSpec {
    pub fn new(mask: u16) -> Result<Self> {
        if mask == 0 || mask as usize >= (1 << NUM_CLASSES) - 1 {
            return Err(Error::InvalidTask(mask));
        }
        Ok(TaskSpec(mask))
    }

    pub fn mask(self) -> u16 {
        self.0
    }

    pub fn label(self, digit: u8) -> u8 {
        ((self.0 >> digit) & 1) as u8
    }

    /// Every valid task in increasing mask order.
    pub fn all() -> Vec<TaskSpec> {
        (1..(1u16 << NUM_CLASSES) - 1).map(TaskSpec).collect()
    }
}

pub fn derive_labels(task: TaskSpec, labels: &[u8]) -> Vec<u8> {
    labels.iter().map(|&l| task.label(l)).collect()
}

/// Indices of a labelled subset: `n` training and `n/5` validation examples
/// from every digit class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subset {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn sample_labelled_subset<R: Rng + ?Sized>(labels: &[u8], n: usize, rng: &mut R) -> Result<Subset> {
    if n == 0 || !n.is_multiple_of(5) {
        return Err(Error::Config(format!("N must be a positive multiple of 5, got {n}")));
    }
    let n_val = n / 5;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut train = Vec::with_capacity(n * NUM_CLASSES);
    let mut val = Vec::with_capacity(n_val * NUM_CLASSES);
    for (digit, pool) in by_class.iter_mut().enumerate() {
        if pool.len() < n + n_val {
            return Err(Error::Domain(format!(
                "digit {digit} has {} examples, need {}",
                pool.len(),
                n + n_val
            )));
        }
        let (picked, _) = pool.partial_shuffle(rng, n + n_val);
        train.extend_from_slice(&picked[..n]);
        val.extend_from_slice(&picked[n..]);
    }
    Ok(Subset { train, val })
}

/// `k` distinct valid tasks drawn uniformly without replacement.
pub fn sample_tasks<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Vec<TaskSpec>> {
    if k > NUM_TASKS {
        return Err(Error::Config(format!(
            "at most {NUM_TASKS} distinct tasks exist, asked for {k}"
        )));
    }
    let mut all = TaskSpec::all();
    let (picked, _) = all.partial_shuffle(rng, k);
    Ok(picked.to_vec())
}

pub fn format_task_file(seed: Option<u64>, tasks: &[TaskSpec]) -> String {
    let mut s = String::new();
    match seed {
        Some(seed) => writeln!(s, "# seed={seed}").unwrap(),
        None => writeln!(s, "# seed=none").unwrap(),
    }
    for t in tasks {
        writeln!(s, "{}", t.mask()).unwrap();
    }
    s
}

/// Parses a task file: one decimal mask per line, `#` comments and blank
/// lines ignored.
pub fn parse_task_file(text: &str) -> Result<Vec<TaskSpec>> {
    let mut tasks = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mask: u16 = line
            .parse()
            .map_err(|_| Error::Config(format!("task file line {}: {line:?} is not a mask", no + 1)))?;
        tasks.push(TaskSpec::new(mask).map_err(|e| Error::Config(format!("task file line {}: {e}", no + 1)))?);
    }
    if tasks.is_empty() {
        return Err(Error::Config("task file lists no tasks".into()));
    }
    Ok(tasks)
}

pub fn write_task_file(path: &Path, seed: Option<u64>, tasks: &[TaskSpec]) -> Result<()> {
    std::fs::write(path, format_task_file(seed, tasks)).map_err(|e| Error::io(path, e))
}

pub fn read_task_file(path: &Path) -> Result<Vec<TaskSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_task_file(&text)
}
