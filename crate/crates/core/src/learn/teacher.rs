//! Teacher hard labels, computed live or read from a logits cache.
//!
//! Cache layout, little-endian:
//!
//! ```text
//! magic        "BLGC"
//! version      u32
//! num_samples  u64
//! num_classes  u32
//! dataset      32-byte SHA-256 of the dataset the logits were computed on
//! records      num_samples x { sample id u64, num_classes x f32 }, ascending id
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;

pub const LOGITS_MAGIC: &[u8; 4] = b"BLGC";
pub const LOGITS_VERSION: u32 = 1;

/// Teacher logits for one sample and their argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput {
    pub logits: Vec<f32>,
    pub hard_label: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl TeacherOutput {
    pub fn from_logits(logits: Vec<f32>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::EmptyInput("teacher logits"));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("teacher logits are not finite".into()));
        }
        Ok(Self {
            hard_label: argmax(&logits),
            logits,
        })
    }
}

/// Per-sample teacher logits keyed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsCache {
    pub num_classes: usize,
    pub dataset_hash: [u8; 32],
    pub records: BTreeMap<u64, Vec<f32>>,
}

impl LogitsCache {
    /// Runs `teacher` over every sample of `data`.
    pub fn build(teacher: &Model, data: &Dataset, batch_size: usize) -> Result<Self> {
        let mut records = BTreeMap::new();
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let b = data.batch(chunk)?;
            let logits = teacher.predict(&b.x)?;
            for (r, &id) in b.ids.iter().enumerate() {
                records.insert(id, logits.row(r).to_vec());
            }
        }
        Ok(Self {
            num_classes: teacher.config().num_classes,
            dataset_hash: data.content_hash(),
            records,
        })
    }

    /// Fails unless the cache was computed on exactly this dataset.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if self.dataset_hash != data.content_hash() {
            return Err(Error::Data("logits cache was computed on a different dataset".into()));
        }
        if self.num_classes != data.num_classes() {
            return Err(Error::Data(format!(
                "logits cache has {} classes, dataset has {}",
                self.num_classes,
                data.num_classes()
            )));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(LOGITS_MAGIC)?;
        w.write_all(&LOGITS_VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        w.write_all(&(self.num_classes as u32).to_le_bytes())?;
        w.write_all(&self.dataset_hash)?;
        for (id, logits) in &self.records {
            w.write_all(&id.to_le_bytes())?;
            for v in logits {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("logits cache: {m}"));
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < 52 || &buf[..4] != LOGITS_MAGIC {
            return Err(bad("bad magic or truncated header"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != LOGITS_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(buf[16..20].try_into().unwrap()) as usize;
        let dataset_hash: [u8; 32] = buf[20..52].try_into().unwrap();
        let rec = 8 + 4 * c;
        let body = &buf[52..];
        if c == 0 || body.len() != n * rec {
            return Err(bad("record section has the wrong length"));
        }
        let mut records = BTreeMap::new();
        for chunk in body.chunks_exact(rec) {
            let id = u64::from_le_bytes(chunk[..8].try_into().unwrap());
            let logits = chunk[8..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if records.insert(id, logits).is_some() {
                return Err(bad(&format!("duplicate sample id {id}")));
            }
        }
        Ok(Self {
            num_classes: c,
            dataset_hash,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Source of teacher decisions.
#[derive(Clone, Debug)]
pub enum Teacher {
    Live(Box<Model>),
    Cached(LogitsCache),
}

/// Teacher logits and hard labels for every sample of `batch`.
pub fn teacher_predict(teacher: &Teacher, batch: &Batch, num_classes: usize) -> Result<Vec<TeacherOutput>> {
    match teacher {
        Teacher::Live(m) => {
            if m.config().num_classes != num_classes {
                return Err(Error::Data(format!(
                    "teacher predicts {} classes, student {num_classes}",
                    m.config().num_classes
                )));
            }
            let logits = m.predict(&batch.x)?;
            (0..logits.rows())
                .map(|r| TeacherOutput::from_logits(logits.row(r).to_vec()))
                .collect()
        }
        Teacher::Cached(c) => {
            if c.num_classes != num_classes {
                return Err(Error::Data(format!(
                    "cached teacher has {} classes, student {num_classes}",
                    c.num_classes
                )));
            }
            batch
                .ids
                .iter()
                .map(|id| {
                    let v = c
                        .records
                        .get(id)
                        .ok_or_else(|| Error::Data(format!("sample id {id} missing from logits cache")))?;
                    TeacherOutput::from_logits(v.clone())
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::model::ModelConfig;

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[-1.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn cached_equals_live() {
        let (train, _) = SyntheticSpec {
            train_size: 30,
            test_size: 10,
            dims: 16,
            num_classes: 4,
            ..Default::default()
        }
        .generate()
        .unwrap();
        let cfg = ModelConfig::vector(1, 16, 2, 4, 2, 8).full_precision_counterpart();
        let m = Model::new(&cfg, 1).unwrap();
        let cache = LogitsCache::build(&m, &train, 7).unwrap();
        let mut bytes = Vec::new();
        cache.write_to(&mut bytes).unwrap();
        let back = LogitsCache::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, cache);
        back.check_dataset(&train).unwrap();
        let batch = train.batch(&[3, 1, 4, 1, 5, 9, 2, 6]).unwrap();
        let live = teacher_predict(&Teacher::Live(Box::new(m)), &batch, 4).unwrap();
        let cached = teacher_predict(&Teacher::Cached(back), &batch, 4).unwrap();
        assert_eq!(live, cached);
    }

    #[test]
    fn mismatches_are_data_errors() {
        let mut cache = LogitsCache {
            num_classes: 3,
            dataset_hash: [0; 32],
            records: BTreeMap::new(),
        };
        cache.records.insert(5, vec![0.0, 1.0, 0.0]);
        let batch = Batch {
            x: crate::numeric::Tensor::zeros(&[1, 2]),
            y: vec![0],
            ids: vec![6],
        };
        let t = Teacher::Cached(cache);
        assert!(matches!(teacher_predict(&t, &batch, 3), Err(Error::Data(_))));
        assert!(matches!(teacher_predict(&t, &batch, 4), Err(Error::Data(_))));
    }
}
