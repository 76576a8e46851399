//! Synthetic classification data, client partitioning and the shift
//! protocols used by the experiments.

mod partition;
mod task;

use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;

pub use partition::{
    partition, partition_dirichlet, partition_iid, partition_pathological, sample_client_dirichlet,
    sample_dirichlet, PartitionScheme, PartitionSpec,
};
pub use task::{generate_base_task, make_public_dataset, GaussianTask, TaskSpec};

use crate::error::{Error, Result};
use crate::io;
use crate::seed::{rng_for, stream};
use crate::tensor::Tensor;

/// Share of a training client's samples held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.15;

/// Features with integer labels. `ids` names each sample's origin so that
/// partitions can be checked for conservation.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    ids: Vec<usize>,
    n_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let ids = (0..labels.len()).collect();
        Self::with_ids(features, labels, ids, n_classes)
    }

    pub fn with_ids(
        features: Tensor,
        labels: Vec<usize>,
        ids: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let (m, _) = features.dims2().ok_or_else(|| Error::Shape {
            op: "LabeledDataset",
            shapes: vec![features.shape().to_vec()],
        })?;
        if labels.len() != m || ids.len() != m {
            return Err(Error::Shape {
                op: "LabeledDataset",
                shapes: vec![
                    features.shape().to_vec(),
                    vec![labels.len()],
                    vec![ids.len()],
                ],
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Domain {
                op: "LabeledDataset",
                message: format!("label {bad} out of range for {n_classes} classes"),
            });
        }
        Ok(Self {
            features: features.detach(),
            labels,
            ids,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Distinct labels present.
    pub fn label_set(&self) -> Vec<usize> {
        let counts = self.class_counts();
        (0..self.n_classes).filter(|&c| counts[c] > 0).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// Concatenates datasets over the same classes and feature dimension.
    pub fn concat(parts: &[LabeledDataset]) -> Result<LabeledDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of nothing".into()))?;
        let d = first.dim();
        let mut x = Vec::new();
        let (mut labels, mut ids) = (Vec::new(), Vec::new());
        for p in parts {
            if p.dim() != d || p.n_classes != first.n_classes {
                return Err(Error::Shape {
                    op: "LabeledDataset::concat",
                    shapes: vec![first.features.shape().to_vec(), p.features.shape().to_vec()],
                });
            }
            x.extend_from_slice(p.features.data());
            labels.extend_from_slice(&p.labels);
            ids.extend_from_slice(&p.ids);
        }
        Self::with_ids(
            Tensor::matrix(labels.len(), d, x),
            labels,
            ids,
            first.n_classes,
        )
    }

    /// Drops the labels.
    pub fn unlabeled(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            features: self.features.clone(),
        }
    }

    /// `FTDS` v1: `m`, `d`, `C` as u64, then `m*d` f64 features, then `m` u32 labels.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, self.len(), self.dim(), self.n_classes)?;
        io::write_f64s(w, self.features.data())?;
        let mut buf = Vec::with_capacity(self.len() * 4);
        for &y in &self.labels {
            buf.extend_from_slice(&(y as u32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let (m, d, c) = read_header(r)?;
        if c == 0 {
            return Err(Error::Format("file holds an unlabeled dataset".into()));
        }
        let x = io::read_f64s(r, m * d)?;
        let mut buf = vec![0u8; m * 4];
        r.read_exact(&mut buf)?;
        let labels = buf
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .collect();
        Self::new(Tensor::matrix(m, d, x), labels, c).map_err(|e| Error::Format(e.to_string()))
    }
}

fn write_header(w: &mut impl Write, m: usize, d: usize, c: usize) -> Result<()> {
    io::write_magic(w, b"FTDS", 1)?;
    io::write_u64(w, m as u64)?;
    io::write_u64(w, d as u64)?;
    io::write_u64(w, c as u64)
}

fn read_header(r: &mut impl Read) -> Result<(usize, usize, usize)> {
    io::read_magic(r, b"FTDS", 1)?;
    let m = io::read_len(r, "m")?;
    let d = io::read_len(r, "d")?;
    let c = io::read_len(r, "C")?;
    if m.checked_mul(d).is_none_or(|n| n > 1 << 32) {
        return Err(Error::Format(format!("{m} x {d} features is out of range")));
    }
    Ok((m, d, c))
}

/// Features only: a new client's data or the public distillation set.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledDataset {
    features: Tensor,
}

impl UnlabeledDataset {
    pub fn new(features: Tensor) -> Result<Self> {
        match features.dims2() {
            Some((m, _)) if m >= 1 => Ok(Self {
                features: features.detach(),
            }),
            _ => Err(Error::Shape {
                op: "UnlabeledDataset",
                shapes: vec![features.shape().to_vec()],
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Same layout as [`LabeledDataset::write_to`] with `C = 0` and no labels.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let (m, d) = self.features.dims2().expect("rank 2");
        write_header(w, m, d, 0)?;
        io::write_f64s(w, self.features.data())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let (m, d, c) = read_header(r)?;
        if c != 0 {
            return Err(Error::Format("file holds a labeled dataset".into()));
        }
        Self::new(Tensor::matrix(m, d, io::read_f64s(r, m * d)?))
    }
}

/// A training client's local data, split 85:15 into train and validation.
#[derive(Clone, Debug)]
pub struct ClientDataset {
    pub id: usize,
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
}

impl ClientDataset {
    /// Seeded shuffle, then `floor(0.15 m)` samples go to validation.
    pub fn split(id: usize, data: &LabeledDataset, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_for(&[seed, stream::SPLIT, id as u64]));
        let n_val = (data.len() as f64 * VALIDATION_FRACTION).floor() as usize;
        let (val, train) = order.split_at(n_val);
        Self {
            id,
            train: data.subset(train),
            validation: data.subset(val),
        }
    }
}

/// Labels whose every read is counted. Only evaluation code may read them.
#[derive(Debug)]
pub struct AuditedLabels {
    labels: Vec<usize>,
    reads: AtomicUsize,
}

impl AuditedLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self {
            labels,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub(crate) fn reveal(&self) -> &[usize] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.labels
    }
}

impl Clone for AuditedLabels {
    fn clone(&self) -> Self {
        Self {
            labels: self.labels.clone(),
            reads: AtomicUsize::new(self.read_count()),
        }
    }
}

/// A new client at deployment: unlabeled features, with labels sealed for
/// scoring only.
#[derive(Clone, Debug)]
pub struct TestClient {
    pub id: usize,
    features: UnlabeledDataset,
    labels: AuditedLabels,
    n_classes: usize,
}

impl TestClient {
    pub fn new(id: usize, data: &LabeledDataset) -> Result<Self> {
        Ok(Self {
            id,
            features: UnlabeledDataset::new(data.features().clone())?,
            labels: AuditedLabels::new(data.labels().to_vec()),
            n_classes: data.n_classes(),
        })
    }

    pub fn unlabeled(&self) -> &UnlabeledDataset {
        &self.features
    }

    pub fn labels(&self) -> &AuditedLabels {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Rotates the first two feature coordinates counterclockwise by `degrees`.
pub fn apply_rotation(ds: &LabeledDataset, degrees: f64) -> LabeledDataset {
    if degrees == 0.0 {
        return ds.clone();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let d = ds.dim();
    let mut x = ds.features.data().to_vec();
    for row in x.chunks_exact_mut(d) {
        let (a, b) = (row[0], row[1]);
        row[0] = cos * a - sin * b;
        row[1] = sin * a + cos * b;
    }
    LabeledDataset {
        features: Tensor::matrix(ds.len(), d, x),
        ..ds.clone()
    }
}

/// Seeded subsample without replacement of `ceil(fraction * m)` samples.
pub fn reduce_client_data(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    // Guard against 0.1 * 60 = 6.000000000000001.
    let keep = ((fraction * ds.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    if keep == 0 {
        return Err(Error::Config("reduction leaves an empty dataset".into()));
    }
    if keep >= ds.len() {
        return Ok(ds.clone());
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng_for(&[seed, stream::REDUCE]));
    let mut rows = order[..keep].to_vec();
    rows.sort_unstable();
    Ok(ds.subset(&rows))
}

/// Endless mini-batches over a dataset. Each pass is a fresh seeded shuffle;
/// a batch never straddles two passes. When `batch >= m` every batch is the
/// whole dataset in its stored order.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    m: usize,
    batch: usize,
    seed: u64,
    pass: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(m: usize, batch: usize, seed: u64) -> Result<Self> {
        if m == 0 || batch == 0 {
            return Err(Error::Config(
                "batch sampling needs data and a positive batch size".into(),
            ));
        }
        Ok(Self {
            m,
            batch,
            seed,
            pass: 0,
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn next_rows(&mut self) -> Vec<usize> {
        if self.batch >= self.m {
            return (0..self.m).collect();
        }
        if self.cursor + self.batch > self.order.len() {
            self.order = (0..self.m).collect();
            self.order.shuffle(&mut rng_for(&[self.seed, self.pass]));
            self.pass += 1;
            self.cursor = 0;
        }
        let rows = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        rows
    }
}
