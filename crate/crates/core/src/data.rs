//! In-memory labelled datasets: a synthetic Gaussian-cluster generator and
//! loaders for labelled CSV and a raw little-endian tensor container.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{Rng, Tensor};

/// Magic of the raw dataset container.
pub const RAW_MAGIC: &[u8; 4] = b"BDS1";

/// Samples with labels and stable ids. `x` has the sample index on axis 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Tensor,
    y: Vec<usize>,
    ids: Vec<u64>,
    num_classes: usize,
}

/// A gathered mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, ids: Vec<u64>, num_classes: usize) -> Result<Self> {
        let n = x.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::EmptyInput("dataset has no samples"));
        }
        if y.len() != n || ids.len() != n {
            return Err(Error::Data(format!(
                "{n} samples but {} labels and {} ids",
                y.len(),
                ids.len()
            )));
        }
        if let Some((i, &l)) = y.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {l} of sample {i} is outside [0, {num_classes})"
            )));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data("duplicate sample ids".into()));
        }
        x.check_finite("dataset")?;
        Ok(Self {
            x,
            y,
            ids,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn features(&self) -> &Tensor {
        &self.x
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let per = self.x.len() / self.len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    index: i,
                    bound: self.len(),
                });
            }
            data.extend_from_slice(&self.x.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok(Batch {
            x: Tensor::new(&shape, data)?,
            y: indices.iter().map(|&i| self.y[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        })
    }

    /// The first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Data(format!("cannot split {} samples at {n}", self.len())));
        }
        let a: Vec<usize> = (0..n).collect();
        let b: Vec<usize> = (n..self.len()).collect();
        let (ba, bb) = (self.batch(&a)?, self.batch(&b)?);
        Ok((
            Dataset::new(ba.x, ba.y, ba.ids, self.num_classes)?,
            Dataset::new(bb.x, bb.y, bb.ids, self.num_classes)?,
        ))
    }

    /// SHA-256 over shapes, features, labels and ids.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for &d in self.x.shape() {
            h.update((d as u64).to_le_bytes());
        }
        h.update((self.num_classes as u64).to_le_bytes());
        for v in self.x.data() {
            h.update(v.to_le_bytes());
        }
        for &l in &self.y {
            h.update((l as u64).to_le_bytes());
        }
        for &i in &self.ids {
            h.update(i.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Gaussian clusters: one random center per class, samples are the center
/// plus isotropic noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_dims")]
    pub dims: usize,
    #[serde(default = "default_train")]
    pub train_size: usize,
    #[serde(default = "default_test")]
    pub test_size: usize,
    /// Standard deviation of the class centers.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Standard deviation of the per-sample noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    10
}
fn default_dims() -> usize {
    64
}
fn default_train() -> usize {
    500
}
fn default_test() -> usize {
    500
}
fn default_separation() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    1.0
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: default_classes(),
            dims: default_dims(),
            train_size: default_train(),
            test_size: default_test(),
            separation: default_separation(),
            noise: default_noise(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// `(train, test)` drawn from the same centers; labels cycle through the
    /// classes so every class is represented.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        if self.num_classes < 2 || self.dims == 0 || self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config(
                "synthetic dataset needs >= 2 classes and positive dims and split sizes".into(),
            ));
        }
        let mut rng = Rng::new(self.seed);
        let centers: Vec<Vec<f32>> = (0..self.num_classes)
            .map(|_| (0..self.dims).map(|_| (rng.normal() * self.separation) as f32).collect())
            .collect();
        let mut make = |n: usize, id0: u64| {
            let mut x = Vec::with_capacity(n * self.dims);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let c = i % self.num_classes;
                y.push(c);
                x.extend(centers[c].iter().map(|&m| m + (rng.normal() * self.noise) as f32));
            }
            let ids = (0..n as u64).map(|i| id0 + i).collect();
            Dataset::new(Tensor::new(&[n, self.dims], x)?, y, ids, self.num_classes)
        };
        let train = make(self.train_size, 0)?;
        let test = make(self.test_size, self.train_size as u64)?;
        Ok((train, test))
    }
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    SyntheticGaussianClusters(SyntheticSpec),
    /// `label,f0,f1,...` rows; a non-numeric first line is treated as a header.
    /// The first `train_size` rows train, the rest are held out.
    LabeledCsv {
        path: PathBuf,
        num_classes: usize,
        train_size: usize,
        /// Optional per-sample shape (defaults to a flat vector).
        #[serde(default)]
        sample_shape: Option<Vec<usize>>,
    },
    /// [`RAW_MAGIC`] container; split like `LabeledCsv`.
    RawTensorBinary { path: PathBuf, train_size: usize },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::SyntheticGaussianClusters(SyntheticSpec::default())
    }
}

impl DatasetSpec {
    pub fn path(&self) -> Option<&Path> {
        match self {
            DatasetSpec::SyntheticGaussianClusters(_) => None,
            DatasetSpec::LabeledCsv { path, .. } | DatasetSpec::RawTensorBinary { path, .. } => {
                Some(path)
            }
        }
    }

    /// Loads `(train, test)` splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::SyntheticGaussianClusters(s) => s.generate(),
            DatasetSpec::LabeledCsv {
                path,
                num_classes,
                train_size,
                sample_shape,
            } => load_csv(path, *num_classes, sample_shape.as_deref())?.split_at(*train_size),
            DatasetSpec::RawTensorBinary { path, train_size } => {
                read_raw(path)?.split_at(*train_size)
            }
        }
    }
}

fn data_err(path: &Path, reason: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason,
    }
}

pub fn load_csv(path: &Path, num_classes: usize, sample_shape: Option<&[usize]>) -> Result<Dataset> {
    let r = BufReader::new(File::open(path)?);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut width = None;
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first = fields.next().unwrap_or("");
        let label = match first.parse::<usize>() {
            Ok(l) => l,
            Err(_) if ln == 0 => continue,
            Err(_) => return Err(data_err(path, format!("line {}: bad label {first:?}", ln + 1))),
        };
        let row: Vec<f32> = fields
            .map(|f| f.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| data_err(path, format!("line {}: {e}", ln + 1)))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(data_err(
                    path,
                    format!("line {}: {} features, expected {w}", ln + 1, row.len()),
                ))
            }
            _ => {}
        }
        y.push(label);
        x.extend(row);
    }
    let w = width.filter(|&w| w > 0).ok_or(Error::EmptyInput("csv has no feature rows"))?;
    let mut shape = vec![y.len()];
    match sample_shape {
        Some(s) if s.iter().product::<usize>() == w => shape.extend_from_slice(s),
        Some(s) => return Err(data_err(path, format!("sample shape {s:?} does not hold {w} features"))),
        None => shape.push(w),
    }
    let ids = (0..y.len() as u64).collect();
    Dataset::new(Tensor::new(&shape, x)?, y, ids, num_classes)
}

/// Layout: magic, `u64` samples, `u32` classes, `u32` rank, `u64` extents of
/// one sample, `u32` label per sample, then `f32` features; little-endian.
pub fn write_raw(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RAW_MAGIC)?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    w.write_all(&(ds.num_classes as u32).to_le_bytes())?;
    w.write_all(&(ds.sample_shape().len() as u32).to_le_bytes())?;
    for &d in ds.sample_shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &l in &ds.y {
        w.write_all(&(l as u32).to_le_bytes())?;
    }
    for v in ds.x.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = buf.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(data_err(path, "truncated".into()));
        }
        let (a, b) = cur.split_at(n);
        cur = b;
        Ok(a)
    };
    if take(4)? != RAW_MAGIC {
        return Err(data_err(path, "bad magic".into()));
    }
    let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let classes = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut shape = vec![n];
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
    }
    let labels = take(4 * n)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let data = take(4 * count)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !take(0)?.is_empty() || !cur.is_empty() {
        return Err(data_err(path, "trailing bytes".into()));
    }
    Dataset::new(Tensor::new(&shape, data)?, labels, (0..n as u64).collect(), classes)
}
