//! Datasets: synthetic generators, IDX loading, normalization and the
//! initiator / reliable / unreliable partitioning used by experiments.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Distance of each clean class centre from the origin.
pub const DEFAULT_SEPARATION: f64 = 1.6;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("IDX format error: {0}")]
    Format(String),
    #[error("infeasible partition plan: {0}")]
    InfeasiblePlan(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    x: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} rows but {} labels",
                x.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::Invalid(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Dataset {
            x,
            labels,
            class_count,
        })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.input_dim() != other.input_dim() && !self.is_empty() && !other.is_empty() {
            return Err(DataError::Invalid(format!(
                "cannot concatenate {}-dim and {}-dim data",
                self.input_dim(),
                other.input_dim()
            )));
        }
        if self.is_empty() {
            return Ok(Dataset {
                class_count: self.class_count.max(other.class_count),
                ..other.clone()
            });
        }
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Dataset {
            x: if other.is_empty() {
                self.x.clone()
            } else {
                self.x.vstack(&other.x)
            },
            labels,
            class_count: self.class_count.max(other.class_count),
        })
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Debug dump with columns `f0..f{d-1},label`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.input_dim()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (row, label) in self.x.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Balanced Gaussian class clusters with unit variance around centres at
/// distance [`DEFAULT_SEPARATION`] from the origin.
pub fn synth_classification(
    n_samples: usize,
    input_dim: usize,
    class_count: usize,
    seed: u64,
) -> Dataset {
    synth_classification_with(n_samples, input_dim, class_count, seed, DEFAULT_SEPARATION)
}

pub fn synth_classification_with(
    n_samples: usize,
    input_dim: usize,
    class_count: usize,
    seed: u64,
    separation: f64,
) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..class_count)
        .map(|_| {
            random_unit(input_dim, &mut rng)
                .into_iter()
                .map(|v| v * separation)
                .collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..n_samples).map(|i| i % class_count).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n_samples * input_dim);
    for &l in &labels {
        for c in &centres[l] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(c + z);
        }
    }
    let x = Matrix::from_vec(n_samples, input_dim, data).expect("sized buffer");
    Dataset {
        x,
        labels,
        class_count,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLabelPolicy {
    /// Every noise sample gets a uniformly random class label.
    #[default]
    UniformRandom,
    /// Labels follow the noise sub-cluster, a consistent but wrong mapping.
    ClusterAligned,
}

/// Geometry of the synthetic noise distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseShape {
    /// Distance of the noise centroid from the clean centroid.
    pub shift: f64,
    /// Distance of each noise sub-cluster from the noise centroid.
    pub spread: f64,
    /// Standard deviation inside each sub-cluster.
    pub scale: f64,
    pub policy: NoiseLabelPolicy,
}

impl Default for NoiseShape {
    fn default() -> Self {
        NoiseShape {
            shift: 4.0,
            spread: 2.0,
            scale: 1.0,
            policy: NoiseLabelPolicy::UniformRandom,
        }
    }
}

/// Samples from a shifted set of sub-clusters unrelated to the task classes,
/// labelled uniformly at random.
pub fn synth_noise(n_samples: usize, input_dim: usize, class_count: usize, seed: u64) -> Dataset {
    synth_noise_with(
        n_samples,
        input_dim,
        class_count,
        seed,
        &NoiseShape::default(),
    )
}

pub fn synth_noise_with(
    n_samples: usize,
    input_dim: usize,
    class_count: usize,
    seed: u64,
    shape: &NoiseShape,
) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6e6f_6973_6500_0000);
    let centroid: Vec<f64> = random_unit(input_dim, &mut rng)
        .into_iter()
        .map(|v| v * shape.shift)
        .collect();
    let centres: Vec<Vec<f64>> = (0..class_count)
        .map(|_| {
            random_unit(input_dim, &mut rng)
                .iter()
                .zip(&centroid)
                .map(|(u, c)| c + u * shape.spread)
                .collect()
        })
        .collect();
    let mut labels = Vec::with_capacity(n_samples);
    let mut data = Vec::with_capacity(n_samples * input_dim);
    for i in 0..n_samples {
        let cluster = i % class_count;
        for c in &centres[cluster] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(c + shape.scale * z);
        }
        labels.push(match shape.policy {
            NoiseLabelPolicy::UniformRandom => rng.gen_range(0..class_count),
            NoiseLabelPolicy::ClusterAligned => cluster,
        });
    }
    let x = Matrix::from_vec(n_samples, input_dim, data).expect("sized buffer");
    Dataset {
        x,
        labels,
        class_count,
    }
}

/// Geometry of decoy noise: sub-cluster `c` sits at `offset` along a random
/// direction plus `gain` times the clean mean of class `c + 1`, and is labelled `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoyShape {
    pub gain: f64,
    pub offset: f64,
    pub scale: f64,
}

impl Default for DecoyShape {
    fn default() -> Self {
        DecoyShape {
            gain: 3.0,
            offset: 4.0,
            scale: 1.0,
        }
    }
}

/// Noise that lies outside the clean support but whose labels contradict the
/// clean class geometry, so training on it rotates decision boundaries.
pub fn synth_decoy_noise(
    n_samples: usize,
    clean: &Dataset,
    shape: &DecoyShape,
    seed: u64,
) -> Result<Dataset> {
    if clean.is_empty() {
        return Err(DataError::Invalid(
            "decoy noise needs clean class means".into(),
        ));
    }
    let d = clean.input_dim();
    let k = clean.class_count;
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (row, &l) in clean.x.iter_rows().zip(&clean.labels) {
        counts[l] += 1;
        for (m, v) in means[l].iter_mut().zip(row) {
            *m += v;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6465_636f_7900_0000);
    let dir = random_unit(d, &mut rng);
    let centres: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            means[(c + 1) % k]
                .iter()
                .zip(&dir)
                .map(|(m, u)| shape.gain * m + shape.offset * u)
                .collect()
        })
        .collect();
    let mut labels = Vec::with_capacity(n_samples);
    let mut data = Vec::with_capacity(n_samples * d);
    for i in 0..n_samples {
        let c = i % k;
        for m in &centres[c] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(m + shape.scale * z);
        }
        labels.push(c);
    }
    let x = Matrix::from_vec(n_samples, d, data).expect("sized buffer");
    Ok(Dataset {
        x,
        labels,
        class_count: k,
    })
}

/// Zero-pads every sample to `target_dim` features.
pub fn pad_dimension(ds: &Dataset, target_dim: usize) -> Result<Dataset> {
    let d = ds.input_dim();
    if target_dim < d {
        return Err(DataError::Invalid(format!(
            "cannot pad {d}-dim data down to {target_dim}"
        )));
    }
    let mut x = Matrix::zeros(ds.len(), target_dim);
    for i in 0..ds.len() {
        x.row_mut(i)[..d].copy_from_slice(ds.x.row(i));
    }
    Ok(Dataset {
        x,
        labels: ds.labels.clone(),
        class_count: ds.class_count,
    })
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DataError::Format(format!("truncated header: missing {what}")))
}

/// Parses an IDX image file into `(rows, cols, pixels)`, one `rows*cols` block per image.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let size = rows * cols;
    let body = &bytes[16..];
    if body.len() != count * size {
        return Err(DataError::Format(format!(
            "expected {count} images of {size} bytes, found {} bytes",
            body.len()
        )));
    }
    let images = body
        .chunks(size.max(1))
        .take(count)
        .map(<[u8]>::to_vec)
        .collect();
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Format(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(DataError::Format(format!(
            "expected {count} labels, found {}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Builds a dataset from IDX image and label bytes, scaling pixels to `[0, 1]`.
pub fn idx_dataset(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (rows, cols, imgs) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if imgs.len() != labels.len() {
        return Err(DataError::Format(format!(
            "{} images but {} labels",
            imgs.len(),
            labels.len()
        )));
    }
    let dim = rows * cols;
    let data: Vec<f64> = imgs
        .iter()
        .flat_map(|img| img.iter().map(|&p| p as f64 / 255.0))
        .collect();
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let class_count = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(
        Matrix::from_vec(labels.len(), dim, data).expect("sized buffer"),
        labels,
        class_count,
    )
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    idx_dataset(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Per-feature min-max scaling to `[0, 1]` followed by mean centering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    min: Vec<f64>,
    range: Vec<f64>,
    mean: Vec<f64>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(DataError::Invalid(
                "cannot normalize an empty dataset".into(),
            ));
        }
        let d = ds.input_dim();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for row in ds.x.iter_rows() {
            for j in 0..d {
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
            }
        }
        let range: Vec<f64> = min.iter().zip(&max).map(|(a, b)| b - a).collect();
        let mut mean = vec![0.0; d];
        for row in ds.x.iter_rows() {
            for j in 0..d {
                mean[j] += scale(row[j], min[j], range[j]);
            }
        }
        mean.iter_mut().for_each(|m| *m /= ds.len() as f64);
        Ok(Normalizer { min, range, mean })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.input_dim() != self.min.len() && !ds.is_empty() {
            return Err(DataError::Invalid(format!(
                "normalizer fitted on {} features, data has {}",
                self.min.len(),
                ds.input_dim()
            )));
        }
        let mut x = ds.x.clone();
        for i in 0..x.rows() {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = scale(*v, self.min[j], self.range[j]) - self.mean[j];
            }
        }
        Ok(Dataset {
            x,
            labels: ds.labels.clone(),
            class_count: ds.class_count,
        })
    }
}

fn scale(v: f64, min: f64, range: f64) -> f64 {
    if range > 0.0 {
        (v - min) / range
    } else {
        0.0
    }
}

/// Fits a [`Normalizer`] on `ds` and applies it.
pub fn normalize_center(ds: &Dataset) -> Result<Dataset> {
    Normalizer::fit(ds)?.apply(ds)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionPlan {
    pub initiator_size: usize,
    pub initiator_test_size: usize,
    pub rp_count: usize,
    pub rp_size: usize,
    pub rp_test_size: usize,
    pub up_count: usize,
    pub up_clean_size: usize,
    pub up_noise_size: usize,
    pub up_test_clean_size: usize,
    pub up_test_noise_size: usize,
}

impl Default for PartitionPlan {
    fn default() -> Self {
        PartitionPlan {
            initiator_size: 200,
            initiator_test_size: 400,
            rp_count: 2,
            rp_size: 400,
            rp_test_size: 400,
            up_count: 1,
            up_clean_size: 200,
            up_noise_size: 200,
            up_test_clean_size: 200,
            up_test_noise_size: 200,
        }
    }
}

impl PartitionPlan {
    /// Full-size MNIST layout: 4 reliable and 2 unreliable participants.
    pub fn mnist_layout() -> Self {
        PartitionPlan {
            initiator_size: 10_000,
            initiator_test_size: 1_660,
            rp_count: 4,
            rp_size: 10_000,
            rp_test_size: 1_660,
            up_count: 2,
            up_clean_size: 5_000,
            up_noise_size: 5_000,
            up_test_clean_size: 850,
            up_test_noise_size: 810,
        }
    }

    /// Divides every shard size by `factor`, rounding down; party counts are kept.
    pub fn scaled_down(&self, factor: usize) -> Self {
        let f = factor.max(1);
        PartitionPlan {
            initiator_size: self.initiator_size / f,
            initiator_test_size: self.initiator_test_size / f,
            rp_count: self.rp_count,
            rp_size: self.rp_size / f,
            rp_test_size: self.rp_test_size / f,
            up_count: self.up_count,
            up_clean_size: self.up_clean_size / f,
            up_noise_size: self.up_noise_size / f,
            up_test_clean_size: self.up_test_clean_size / f,
            up_test_noise_size: self.up_test_noise_size / f,
        }
    }

    pub fn clean_total(&self) -> usize {
        self.initiator_size
            + self.initiator_test_size
            + self.rp_count * (self.rp_size + self.rp_test_size)
            + self.up_count * (self.up_clean_size + self.up_test_clean_size)
    }

    pub fn noise_total(&self) -> usize {
        self.up_count * (self.up_noise_size + self.up_test_noise_size)
    }

    pub fn party_count(&self) -> usize {
        1 + self.rp_count + self.up_count
    }

    pub fn validate(&self, clean_available: usize, noise_available: usize) -> Result<()> {
        if self.initiator_size == 0 {
            return Err(DataError::InfeasiblePlan(
                "initiator needs training data".into(),
            ));
        }
        if self.rp_count > 0 && self.rp_size == 0 {
            return Err(DataError::InfeasiblePlan(
                "reliable participants need training data".into(),
            ));
        }
        if self.up_count > 0 && self.up_clean_size + self.up_noise_size == 0 {
            return Err(DataError::InfeasiblePlan(
                "unreliable participants need training data".into(),
            ));
        }
        if self.clean_total() > clean_available {
            return Err(DataError::InfeasiblePlan(format!(
                "plan needs {} clean samples, {} available",
                self.clean_total(),
                clean_available
            )));
        }
        if self.noise_total() > noise_available {
            return Err(DataError::InfeasiblePlan(format!(
                "plan needs {} noise samples, {} available",
                self.noise_total(),
                noise_available
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartyRole {
    Initiator,
    Reliable,
    Unreliable,
}

/// One party's slice of the data, with the source indices it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyShard {
    pub id: u32,
    pub role: PartyRole,
    pub train: Dataset,
    pub test: Dataset,
    pub clean_train_idx: Vec<usize>,
    pub noise_train_idx: Vec<usize>,
    pub clean_test_idx: Vec<usize>,
    pub noise_test_idx: Vec<usize>,
}

impl PartyShard {
    pub fn label(&self) -> String {
        match self.role {
            PartyRole::Initiator => "initiator".to_string(),
            PartyRole::Reliable => format!("rp{}", self.id),
            PartyRole::Unreliable => format!("up{}", self.id),
        }
    }

    /// Clean part of the test shard.
    pub fn clean_test(&self) -> Dataset {
        self.test
            .subset(&(0..self.clean_test_idx.len()).collect::<Vec<_>>())
    }

    /// Clean part of the training shard.
    pub fn clean_train(&self) -> Dataset {
        self.train
            .subset(&(0..self.clean_train_idx.len()).collect::<Vec<_>>())
    }
}

/// Party shards ordered initiator (id 0), reliable, then unreliable participants.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardMap {
    pub parties: Vec<PartyShard>,
}

impl ShardMap {
    pub fn initiator(&self) -> &PartyShard {
        &self.parties[0]
    }

    pub fn participants(&self) -> &[PartyShard] {
        &self.parties[1..]
    }

    /// Every clean training sample across parties.
    pub fn pooled_clean_train(&self) -> Result<Dataset> {
        self.parties
            .iter()
            .try_fold(empty_like(&self.parties[0].train), |acc, p| {
                acc.concat(&p.clean_train())
            })
    }

    /// Every clean test sample across parties; the common evaluation set.
    pub fn pooled_clean_test(&self) -> Result<Dataset> {
        self.parties
            .iter()
            .try_fold(empty_like(&self.parties[0].test), |acc, p| {
                acc.concat(&p.clean_test())
            })
    }
}

fn empty_like(ds: &Dataset) -> Dataset {
    Dataset {
        x: Matrix::zeros(0, ds.input_dim()),
        labels: Vec::new(),
        class_count: ds.class_count,
    }
}

/// Splits clean and noise sources into disjoint party shards. Unreliable
/// training and test shards list their clean samples first, then noise.
pub fn partition(
    clean: &Dataset,
    noise: &Dataset,
    plan: &PartitionPlan,
    seed: u64,
) -> Result<ShardMap> {
    plan.validate(clean.len(), noise.len())?;
    if plan.noise_total() > 0 && noise.input_dim() != clean.input_dim() {
        return Err(DataError::InfeasiblePlan(format!(
            "noise has {} features, clean data {}",
            noise.input_dim(),
            clean.input_dim()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut clean_order: Vec<usize> = (0..clean.len()).collect();
    clean_order.shuffle(&mut rng);
    let mut noise_order: Vec<usize> = (0..noise.len()).collect();
    noise_order.shuffle(&mut rng);

    let mut clean_it = clean_order.into_iter();
    let mut noise_it = noise_order.into_iter();
    let take = |it: &mut std::vec::IntoIter<usize>, n: usize| -> Vec<usize> {
        it.by_ref().take(n).collect()
    };

    let mut parties = Vec::with_capacity(plan.party_count());
    let mut add = |id: u32,
                   role: PartyRole,
                   clean_train_idx: Vec<usize>,
                   clean_test_idx: Vec<usize>,
                   noise_train_idx: Vec<usize>,
                   noise_test_idx: Vec<usize>|
     -> Result<()> {
        let train = clean
            .subset(&clean_train_idx)
            .concat(&noise.subset(&noise_train_idx))?;
        let test = clean
            .subset(&clean_test_idx)
            .concat(&noise.subset(&noise_test_idx))?;
        parties.push(PartyShard {
            id,
            role,
            train,
            test,
            clean_train_idx,
            noise_train_idx,
            clean_test_idx,
            noise_test_idx,
        });
        Ok(())
    };

    let tr = take(&mut clean_it, plan.initiator_size);
    let te = take(&mut clean_it, plan.initiator_test_size);
    add(0, PartyRole::Initiator, tr, te, vec![], vec![])?;
    let mut next_id = 1u32;
    for _ in 0..plan.rp_count {
        let tr = take(&mut clean_it, plan.rp_size);
        let te = take(&mut clean_it, plan.rp_test_size);
        add(next_id, PartyRole::Reliable, tr, te, vec![], vec![])?;
        next_id += 1;
    }
    for _ in 0..plan.up_count {
        let tr = take(&mut clean_it, plan.up_clean_size);
        let te = take(&mut clean_it, plan.up_test_clean_size);
        let ntr = take(&mut noise_it, plan.up_noise_size);
        let nte = take(&mut noise_it, plan.up_test_noise_size);
        add(next_id, PartyRole::Unreliable, tr, te, ntr, nte)?;
        next_id += 1;
    }
    Ok(ShardMap { parties })
}
