//! Dataset construction for the open-world long-tailed SSL setting:
//! a long-tailed labeled set over known classes, a long-tailed unlabeled
//! set over known classes, and an unlabeled novel-class set whose profile
//! follows one of three regimes (consistent, uniform, reversed).
//!
//! Class indices are zero-based. Known classes occupy `0..c_k`, novel
//! classes `c_k..c_t`, matching the classifier head layout.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Bytes per record in the standard CIFAR binary layout: one label byte
/// followed by 32x32x3 pixel bytes.
pub const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_PIXELS: usize = 3072;
const CACHE_MAGIC: &[u8; 8] = b"DPLADS01";

/// Shape of the novel-class distribution relative to the labeled tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Same descending long tail as the labeled known classes.
    Consistent,
    /// Every novel class contributes the same count.
    Uniform,
    /// Mirror image: ascending counts across novel class index.
    Reversed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailDirection {
    Descending,
    Ascending,
    Uniform,
}

/// Recipe for one dataset: class counts, head sizes, imbalance ratios,
/// the novel regime, the feature dimensionality, and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub known_classes: usize,
    pub novel_classes: usize,
    /// Head-class count of the labeled known-class partition.
    pub labeled_head: usize,
    /// Head-class count of the unlabeled known-class partition.
    pub unlabeled_head: usize,
    /// Head (or uniform) count of the unlabeled novel-class partition.
    pub novel_head: usize,
    pub gamma_labeled: f64,
    pub gamma_unlabeled: f64,
    pub gamma_novel: f64,
    pub regime: Regime,
    pub input_dim: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn total_classes(&self) -> usize {
        self.known_classes + self.novel_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.known_classes == 0 {
            return Err(Error::invalid("known_classes must be >= 1"));
        }
        if self.labeled_head == 0 {
            return Err(Error::invalid("labeled_head must be >= 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be >= 1"));
        }
        for (name, g) in [
            ("gamma_labeled", self.gamma_labeled),
            ("gamma_unlabeled", self.gamma_unlabeled),
            ("gamma_novel", self.gamma_novel),
        ] {
            if !(g >= 1.0) {
                return Err(Error::invalid(format!("{name} must be >= 1, got {g}")));
            }
        }
        Ok(())
    }

    /// Per-class labeled counts implied by the head count and decay.
    pub fn labeled_counts(&self) -> Result<Vec<usize>> {
        long_tail_counts(
            self.labeled_head,
            self.gamma_labeled,
            self.known_classes,
            TailDirection::Descending,
        )
    }

    fn unlabeled_known_counts(&self) -> Result<Vec<usize>> {
        long_tail_counts(
            self.unlabeled_head,
            self.gamma_unlabeled,
            self.known_classes,
            TailDirection::Descending,
        )
    }

    fn novel_counts(&self) -> Result<Vec<usize>> {
        let (gamma, direction) = match self.regime {
            Regime::Consistent => (self.gamma_novel, TailDirection::Descending),
            Regime::Uniform => (1.0, TailDirection::Uniform),
            Regime::Reversed => (self.gamma_novel, TailDirection::Ascending),
        };
        long_tail_counts(self.novel_head, gamma, self.novel_classes, direction)
    }
}

/// Exponential long-tail profile between the head count and `head/gamma`:
/// `counts[c] = round(n_max * gamma^(-c/(K-1)))` for the descending
/// direction, mirrored for ascending, constant for uniform. Every count
/// is floored at one so each class stays represented.
pub fn long_tail_counts(
    n_max: usize,
    gamma: f64,
    num_classes: usize,
    direction: TailDirection,
) -> Result<Vec<usize>> {
    if n_max == 0 || num_classes == 0 {
        return Err(Error::invalid("n_max and num_classes must be >= 1"));
    }
    if !(gamma >= 1.0) {
        return Err(Error::invalid(format!(
            "imbalance ratio must be >= 1, got {gamma}"
        )));
    }
    if num_classes == 1 && gamma > 1.0 {
        return Err(Error::invalid(
            "a single class cannot express an imbalance ratio > 1",
        ));
    }
    let counts: Vec<usize> = match direction {
        TailDirection::Uniform => vec![n_max; num_classes],
        TailDirection::Descending | TailDirection::Ascending => {
            let k = num_classes as f64;
            let mut counts: Vec<usize> = (0..num_classes)
                .map(|c| {
                    let exponent = if num_classes == 1 {
                        0.0
                    } else {
                        -(c as f64) / (k - 1.0)
                    };
                    let raw = n_max as f64 * gamma.powf(exponent);
                    (raw.round() as usize).max(1)
                })
                .collect();
            if direction == TailDirection::Ascending {
                counts.reverse();
            }
            counts
        }
    };
    Ok(counts)
}

/// Per-class sample pools drawn from some source (synthetic or file).
/// `pools[c]` holds the available feature rows for class `c`.
#[derive(Debug, Clone)]
pub struct ClassPools {
    pub input_dim: usize,
    pub pools: Vec<Matrix>,
}

impl ClassPools {
    pub fn num_classes(&self) -> usize {
        self.pools.len()
    }
}

/// Materialized partitions of one experiment: the labeled known-class
/// set, the shuffled unlabeled pool, and the pool's ground-truth labels.
///
/// The ground truth exists for evaluation only. It is kept behind the
/// [`Splits::pool_ground_truth`] accessor and nothing on the training
/// path may call it; the leak test in the acceptance suite checks that
/// corrupting it leaves training byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub labeled_features: Matrix,
    pub labeled_labels: Vec<usize>,
    pub unlabeled_features: Matrix,
    hidden_truth: Vec<usize>,
    pub known_classes: usize,
    pub novel_classes: usize,
}

impl Splits {
    /// Reassemble splits from raw parts (cache loading, leak tests).
    pub fn from_parts(
        labeled_features: Matrix,
        labeled_labels: Vec<usize>,
        unlabeled_features: Matrix,
        hidden_truth: Vec<usize>,
        known_classes: usize,
        novel_classes: usize,
    ) -> Result<Self> {
        if labeled_features.rows() != labeled_labels.len() {
            return Err(Error::invalid("labeled feature/label length mismatch"));
        }
        if unlabeled_features.rows() != hidden_truth.len() {
            return Err(Error::invalid("unlabeled feature/truth length mismatch"));
        }
        if labeled_labels.iter().any(|&y| y >= known_classes) {
            return Err(Error::invalid("labeled label outside known classes"));
        }
        Ok(Splits {
            labeled_features,
            labeled_labels,
            unlabeled_features,
            hidden_truth,
            known_classes,
            novel_classes,
        })
    }

    pub fn total_classes(&self) -> usize {
        self.known_classes + self.novel_classes
    }

    /// Ground-truth class per unlabeled-pool row. Evaluation only.
    pub fn pool_ground_truth(&self) -> &[usize] {
        &self.hidden_truth
    }

    /// Labeled per-class counts over the known classes.
    pub fn labeled_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.known_classes];
        for &y in &self.labeled_labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Balanced held-out test set: equal per-class counts over all classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

/// Everything one experiment consumes: training splits plus the balanced
/// test set, drawn disjointly from the same pools.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub splits: Splits,
    pub test: TestSet,
}

/// Build the labeled/unlabeled partitions from per-class pools.
///
/// Labeled and unlabeled samples of a known class are disjoint (labeled
/// rows come first in the pool, unlabeled rows follow). The unlabeled
/// pool is a seed-determined permutation of the union of unlabeled-known
/// and novel samples.
pub fn build_splits(spec: &DatasetSpec, source: &ClassPools) -> Result<Splits> {
    build_splits_with_test(spec, source, 0).map(|data| data.splits)
}

/// [`build_splits`] plus a balanced test set of `test_per_class` samples
/// per class, taken after the training samples so the sets are disjoint.
pub fn build_splits_with_test(
    spec: &DatasetSpec,
    source: &ClassPools,
    test_per_class: usize,
) -> Result<ExperimentData> {
    spec.validate()?;
    let c_k = spec.known_classes;
    let c_t = spec.total_classes();
    if source.num_classes() < c_t {
        return Err(Error::invalid(format!(
            "source provides {} classes but the spec needs {c_t}",
            source.num_classes()
        )));
    }
    if source.input_dim != spec.input_dim {
        return Err(Error::invalid(format!(
            "source dimensionality {} does not match spec input_dim {}",
            source.input_dim, spec.input_dim
        )));
    }

    let labeled_counts = spec.labeled_counts()?;
    let unlabeled_counts = spec.unlabeled_known_counts()?;
    let novel_counts = spec.novel_counts()?;

    let m_labeled: usize = labeled_counts.iter().sum();
    let m_unlabeled_known: usize = unlabeled_counts.iter().sum();
    if m_labeled >= m_unlabeled_known {
        return Err(Error::invalid(format!(
            "labeled known-class samples ({m_labeled}) must be fewer than \
             unlabeled known-class samples ({m_unlabeled_known})"
        )));
    }

    for c in 0..c_t {
        let needed = if c < c_k {
            labeled_counts[c] + unlabeled_counts[c] + test_per_class
        } else {
            novel_counts[c - c_k] + test_per_class
        };
        let available = source.pools[c].rows();
        if available < needed {
            return Err(Error::Capacity {
                class: c,
                needed,
                available,
            });
        }
    }

    let dim = spec.input_dim;
    let mut labeled_rows: Vec<Vec<f64>> = Vec::with_capacity(m_labeled);
    let mut labeled_labels = Vec::with_capacity(m_labeled);
    let mut pool_rows: Vec<Vec<f64>> = Vec::new();
    let mut pool_truth: Vec<usize> = Vec::new();
    let mut test_rows: Vec<Vec<f64>> = Vec::new();
    let mut test_labels: Vec<usize> = Vec::new();

    for c in 0..c_k {
        let pool = &source.pools[c];
        for r in 0..labeled_counts[c] {
            labeled_rows.push(pool.row(r).to_vec());
            labeled_labels.push(c);
        }
        let start = labeled_counts[c];
        for r in start..start + unlabeled_counts[c] {
            pool_rows.push(pool.row(r).to_vec());
            pool_truth.push(c);
        }
        let t0 = start + unlabeled_counts[c];
        for r in t0..t0 + test_per_class {
            test_rows.push(pool.row(r).to_vec());
            test_labels.push(c);
        }
    }
    for c in c_k..c_t {
        let pool = &source.pools[c];
        let n = novel_counts[c - c_k];
        for r in 0..n {
            pool_rows.push(pool.row(r).to_vec());
            pool_truth.push(c);
        }
        for r in n..n + test_per_class {
            test_rows.push(pool.row(r).to_vec());
            test_labels.push(c);
        }
    }

    // Seed-determined permutation of the unlabeled pool.
    let mut order: Vec<usize> = (0..pool_rows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    order.shuffle(&mut rng);
    let mut shuffled_rows = Vec::with_capacity(pool_rows.len());
    let mut shuffled_truth = Vec::with_capacity(pool_truth.len());
    for &i in &order {
        shuffled_rows.push(std::mem::take(&mut pool_rows[i]));
        shuffled_truth.push(pool_truth[i]);
    }

    let labeled_features = Matrix::from_rows(&labeled_rows)?;
    let unlabeled_features = if shuffled_rows.is_empty() {
        Matrix::zeros(0, dim)
    } else {
        Matrix::from_rows(&shuffled_rows)?
    };
    let test_features = if test_rows.is_empty() {
        Matrix::zeros(0, dim)
    } else {
        Matrix::from_rows(&test_rows)?
    };

    let splits = Splits::from_parts(
        labeled_features,
        labeled_labels,
        unlabeled_features,
        shuffled_truth,
        c_k,
        spec.novel_classes,
    )?;
    Ok(ExperimentData {
        splits,
        test: TestSet {
            features: test_features,
            labels: test_labels,
        },
    })
}

/// Synthetic source: class `c` is an isotropic unit-variance Gaussian
/// centered on a seed-determined random direction scaled by `separation`.
pub fn gen_synthetic_gaussian(
    total_classes: usize,
    input_dim: usize,
    separation: f64,
    seed: u64,
    per_class_cap: usize,
) -> Result<ClassPools> {
    if total_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if input_dim < 2 {
        return Err(Error::invalid("input_dim must be >= 2"));
    }
    if !(separation >= 0.0) {
        return Err(Error::invalid("separation must be >= 0"));
    }
    if per_class_cap == 0 {
        return Err(Error::invalid("per_class_cap must be >= 1"));
    }

    let mut center_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = Vec::with_capacity(total_classes);
    for class in 0..total_classes {
        // Random unit direction for the class center.
        let mut dir: Vec<f64> = (0..input_dim)
            .map(|_| StandardNormal.sample(&mut center_rng))
            .collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut dir {
            *x *= separation / norm;
        }

        let mut sample_rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x517c_c1b7 + class as u64));
        let mut data = Vec::with_capacity(per_class_cap * input_dim);
        for _ in 0..per_class_cap {
            for &center in &dir {
                let noise: f64 = StandardNormal.sample(&mut sample_rng);
                data.push(center + noise);
            }
        }
        pools.push(Matrix::new(per_class_cap, input_dim, data)?);
    }
    Ok(ClassPools {
        input_dim,
        pools,
    })
}

/// Ingest the standard CIFAR binary layout: 3073-byte records, one label
/// byte in `0..=9` followed by 3072 pixel bytes scaled to `[0, 1]`.
pub fn load_cifar_binary(path: &Path) -> Result<ClassPools> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let offset = (bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES) as u64;
        return Err(Error::Format {
            offset,
            message: format!(
                "truncated record: file length {} is not a multiple of {CIFAR_RECORD_BYTES}",
                bytes.len()
            ),
        });
    }

    let mut rows_per_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 10];
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD_BYTES) as u64,
                message: format!("label byte {label} out of range 0..=9"),
            });
        }
        let features: Vec<f64> = record[1..].iter().map(|&b| b as f64 / 255.0).collect();
        rows_per_class[label as usize].push(features);
    }

    let pools = rows_per_class
        .into_iter()
        .map(|rows| {
            if rows.is_empty() {
                Ok(Matrix::zeros(0, CIFAR_PIXELS))
            } else {
                Matrix::from_rows(&rows)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassPools {
        input_dim: CIFAR_PIXELS,
        pools,
    })
}

fn push_features(out: &mut Vec<u8>, m: &Matrix) {
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_labels(out: &mut Vec<u8>, labels: &[usize]) {
    for &l in labels {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
}

/// Serialize experiment data into the flat binary cache layout:
/// magic, `c_k`/`c_n` as u16, `input_dim` and section counts as u32 LE,
/// then labeled (u16 label + features), unlabeled features, unlabeled
/// ground-truth labels, and the test section (u16 label + features).
/// Features are little-endian doubles throughout.
pub fn encode_cache(data: &ExperimentData) -> Vec<u8> {
    let splits = &data.splits;
    let dim = splits.labeled_features.cols();
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(splits.known_classes as u16).to_le_bytes());
    out.extend_from_slice(&(splits.novel_classes as u16).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(splits.labeled_labels.len() as u32).to_le_bytes());
    out.extend_from_slice(&(splits.unlabeled_features.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(data.test.labels.len() as u32).to_le_bytes());
    push_labels(&mut out, &splits.labeled_labels);
    push_features(&mut out, &splits.labeled_features);
    push_features(&mut out, &splits.unlabeled_features);
    push_labels(&mut out, splits.pool_ground_truth());
    push_labels(&mut out, &data.test.labels);
    push_features(&mut out, &data.test.features);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: "cache truncated".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn labels(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.u16().map(usize::from)).collect()
    }

    fn features(&mut self, rows: usize, dim: usize) -> Result<Matrix> {
        let raw = self.take(rows * dim * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if rows == 0 {
            return Ok(Matrix::zeros(0, dim));
        }
        Matrix::new(rows, dim, data)
    }
}

/// Decode a cache produced by [`encode_cache`].
pub fn decode_cache(bytes: &[u8]) -> Result<ExperimentData> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CACHE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad cache magic".into(),
        });
    }
    let c_k = cur.u16()? as usize;
    let c_n = cur.u16()? as usize;
    let dim = cur.u32()? as usize;
    let n_labeled = cur.u32()? as usize;
    let n_unlabeled = cur.u32()? as usize;
    let n_test = cur.u32()? as usize;
    let labeled_labels = cur.labels(n_labeled)?;
    let labeled_features = cur.features(n_labeled, dim)?;
    let unlabeled_features = cur.features(n_unlabeled, dim)?;
    let hidden_truth = cur.labels(n_unlabeled)?;
    let test_labels = cur.labels(n_test)?;
    let test_features = cur.features(n_test, dim)?;
    let splits = Splits::from_parts(
        labeled_features,
        labeled_labels,
        unlabeled_features,
        hidden_truth,
        c_k,
        c_n,
    )?;
    Ok(ExperimentData {
        splits,
        test: TestSet {
            features: test_features,
            labels: test_labels,
        },
    })
}

pub fn write_cache(path: &Path, data: &ExperimentData) -> Result<Vec<u8>> {
    let bytes = encode_cache(data);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub fn read_cache(path: &Path) -> Result<ExperimentData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes)
}
