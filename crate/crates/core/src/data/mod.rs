//! Synthetic dataset generation and the on-disk dataset format.
//!
//! Layout:
//!
//! ```text
//! root/meta.json
//! root/{train,val}/{id}.rgb.ppm     P6, 8-bit
//! root/{train,val}/{id}.depth.pgm   P5, 16-bit
//! root/{train,val}/{id}.gt.pgm      P5, 8-bit (optional)
//! root/{train,val}/{id}.exo{0,1,2}.ppm
//! root/{train,val}/{id}.label.txt   class word
//! ```

pub mod pnm;
pub mod synthetic;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::sub_seed;
use crate::pipeline::TrainItem;
use crate::Tensor;

pub use synthetic::{generate, generate_synthetic, part_threshold, render, CueMode, Geometry, Rendered, SyntheticSpec};

pub const SPLITS: [&str; 2] = ["train", "val"];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `3×H×W` in `[0,1]`.
    pub rgb: Tensor,
    /// `1×H×W` in `[0,1]`.
    pub depth: Tensor,
    pub exo: Vec<Tensor>,
    pub label: usize,
    pub word: String,
    /// `H×W`, evaluation only.
    pub gt: Option<Tensor>,
}

impl Sample {
    /// The view the optimiser sees; the heatmap is not part of it.
    pub fn train_item(&self) -> TrainItem<'_> {
        TrainItem {
            rgb: &self.rgb,
            depth: &self.depth,
            exo: &self.exo,
            label: self.label,
        }
    }

    /// Pixels whose heatmap value marks the functional part.
    pub fn part_region(&self) -> Option<Vec<bool>> {
        let t = part_threshold();
        self.gt.as_ref().map(|g| g.data().iter().map(|&v| v >= t).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub format: u32,
    /// Class words; a label's index is its class id.
    pub classes: Vec<String>,
    pub side: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<serde_json::Value>,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl Meta {
    pub fn ids(&self, split: &str) -> Result<&[String]> {
        match split {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            _ => Err(Error::Dataset(format!("unknown split {split:?} (expected train or val)"))),
        }
    }

    fn check(&self) -> Result<()> {
        let mut sorted = self.classes.clone();
        sorted.sort();
        sorted.dedup();
        if self.classes.len() < 2 || sorted.len() != self.classes.len() {
            return Err(Error::Dataset("meta classes must hold at least 2 distinct labels".into()));
        }
        Ok(())
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub(crate) fn write_dataset(root: &Path, meta: &Meta, train: &[Sample], val: &[Sample]) -> Result<()> {
    for (split, samples) in SPLITS.iter().zip([train, val]) {
        let dir = root.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for s in samples {
            let base = dir.join(&s.id);
            let file = |ext: &str| PathBuf::from(format!("{}.{ext}", base.display()));
            write(&file("rgb.ppm"), &pnm::encode_ppm(&s.rgb)?)?;
            write(&file("depth.pgm"), &pnm::encode_pgm(&s.depth, 65535)?)?;
            if let Some(gt) = &s.gt {
                write(&file("gt.pgm"), &pnm::encode_pgm(gt, 255)?)?;
            }
            for (i, e) in s.exo.iter().enumerate() {
                write(&file(&format!("exo{i}.ppm")), &pnm::encode_ppm(e)?)?;
            }
            write(&file("label.txt"), format!("{}\n", s.word).as_bytes())?;
        }
    }
    write(&root.join("meta.json"), serde_json::to_string_pretty(meta)?.as_bytes())
}

/// A dataset directory with its parsed meta; samples load on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: Meta,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("meta.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let meta: Meta = serde_json::from_str(&text)?;
        meta.check()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            meta,
        })
    }

    pub fn load_sample(&self, split: &str, id: &str) -> Result<Sample> {
        let base = self.root.join(split).join(id);
        let file = |ext: &str| PathBuf::from(format!("{}.{ext}", base.display()));
        let fail = |path: &Path, msg: String| Error::Sample {
            id: id.to_string(),
            path: path.to_path_buf(),
            msg,
        };
        let read = |path: &Path| std::fs::read(path).map_err(|e| fail(path, e.to_string()));
        let n = self.meta.side;
        let check = |path: &Path, t: Tensor, want: &[usize]| {
            if t.shape() == want {
                Ok(t)
            } else {
                Err(fail(path, format!("dimensions {:?}, expected {want:?}", t.shape())))
            }
        };
        let ppm = |path: PathBuf| -> Result<Tensor> {
            let t = pnm::decode_ppm(&read(&path)?).map_err(|m| fail(&path, m))?;
            check(&path, t, &[3, n, n])
        };
        let pgm = |path: PathBuf| -> Result<Tensor> {
            let t = pnm::decode_pgm(&read(&path)?).map_err(|m| fail(&path, m))?;
            check(&path, t, &[n, n])
        };

        let label_path = file("label.txt");
        let word = String::from_utf8_lossy(&read(&label_path)?).trim().to_string();
        let label = self
            .meta
            .classes
            .iter()
            .position(|c| *c == word)
            .ok_or_else(|| fail(&label_path, format!("label {word:?} is not listed in meta.json")))?;
        let rgb = ppm(file("rgb.ppm"))?;
        let depth = pgm(file("depth.pgm"))?.reshape(vec![1, n, n])?;
        let exo = (0..synthetic::EXO_VIEWS)
            .map(|i| ppm(file(&format!("exo{i}.ppm"))))
            .collect::<Result<_>>()?;
        let gt_path = file("gt.pgm");
        let gt = if gt_path.exists() { Some(pgm(gt_path)?) } else { None };
        Ok(Sample {
            id: id.to_string(),
            rgb,
            depth,
            exo,
            label,
            word,
            gt,
        })
    }

    /// Samples of `split` in meta order, loaded one at a time.
    pub fn iter<'a>(&'a self, split: &str) -> Result<impl Iterator<Item = Result<Sample>> + 'a> {
        let split = split.to_string();
        let ids = self.meta.ids(&split)?;
        Ok(ids.iter().map(move |id| self.load_sample(&split, id)))
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<Sample>> {
        self.iter(split)?.collect()
    }
}

/// Hex SHA-256 over `meta.json` and every sample file in meta order.
pub fn dataset_hash(root: &Path) -> Result<String> {
    let ds = Dataset::open(root)?;
    let mut h = Sha256::new();
    let mut feed = |path: PathBuf| -> Result<()> {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
        Ok(())
    };
    feed(root.join("meta.json"))?;
    for split in SPLITS {
        for id in ds.meta.ids(split)? {
            let base = root.join(split).join(id);
            for ext in ["rgb.ppm", "depth.pgm", "gt.pgm", "exo0.ppm", "exo1.ppm", "exo2.ppm", "label.txt"] {
                let p = PathBuf::from(format!("{}.{ext}", base.display()));
                if ext != "gt.pgm" || p.exists() {
                    feed(p)?;
                }
            }
        }
    }
    Ok(crate::pipeline::hex(&h.finalize()))
}

/// Index batches over `n` samples: a fresh seeded shuffle each epoch, with
/// the final partial batch of every epoch dropped.
#[derive(Debug, Clone)]
pub struct BatchIter {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl BatchIter {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Batch("batch size must be at least 1".into()));
        }
        if n == 0 {
            return Err(Error::Dataset("empty split".into()));
        }
        if n < batch {
            return Err(Error::Dataset(format!("split of {n} samples is smaller than one batch of {batch}")));
        }
        let mut it = BatchIter {
            n,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        it.order = it.epoch_order(0);
        Ok(it)
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.seed, &format!("epoch.{epoch}")));
        order.shuffle(&mut rng);
        order
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.n {
            self.epoch += 1;
            self.order = self.epoch_order(self.epoch);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

/// Endless batches of samples from `split`.
pub fn batch_iter(split: &[Sample], batch: usize, seed: u64) -> Result<impl Iterator<Item = Vec<&Sample>>> {
    Ok(BatchIter::new(split.len(), batch, seed)?.map(move |idx| idx.into_iter().map(|i| &split[i]).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_partition_minus_tail() {
        let mut it = BatchIter::new(10, 3, 7).unwrap();
        assert_eq!(it.batches_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| it.next_batch()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(it.epoch(), 0);
        it.next_batch();
        assert_eq!(it.epoch(), 1);
        assert_ne!(it.epoch_order(0), it.epoch_order(1));
    }

    #[test]
    fn batch_order_is_seeded() {
        let a: Vec<_> = BatchIter::new(20, 4, 1).unwrap().take(12).collect();
        let b: Vec<_> = BatchIter::new(20, 4, 1).unwrap().take(12).collect();
        let c: Vec<_> = BatchIter::new(20, 4, 2).unwrap().take(12).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn batch_errors() {
        assert!(BatchIter::new(0, 8, 0).is_err());
        assert!(BatchIter::new(5, 0, 0).is_err());
        assert!(BatchIter::new(5, 8, 0).is_err());
        assert!(batch_iter(&[], 1, 0).is_err());
    }
}
