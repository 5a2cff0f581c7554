//! Dataset ingestion and partitioning.
//!
//! Sources: big-endian IDX files (optionally gzip-compressed) and synthetic
//! isotropic Gaussian blobs. Client shards come from per-class
//! Dirichlet-multinomial assignment; the server pool is split into a
//! selection half (drives the loss-ordered aggregation) and an evaluation
//! half (centralized accuracy).

use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::SimError;
use crate::model::Dataset;
use crate::rng::{self, TAG_PARTITION, TAG_SERVER_SPLIT};
use crate::Result;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Per-client sample assignment produced by [`dirichlet_partition`].
///
/// Assignments are pairwise disjoint, cover the source index set exactly,
/// and every client holds at least one sample.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    /// Clients x classes count matrix, computed against the source dataset.
    pub fn class_counts(&self, data: &Dataset) -> Vec<Vec<usize>> {
        let c = data.num_classes();
        self.assignments
            .iter()
            .map(|idxs| {
                let mut row = vec![0usize; c];
                for &i in idxs {
                    row[data.label(i)] += 1;
                }
                row
            })
            .collect()
    }
}

/// The server pool split into disjoint halves.
#[derive(Debug, Clone)]
pub struct ServerSplit {
    /// Scores candidate models inside the aggregation rule.
    pub selection_set: Dataset,
    /// Reserved for the reported centralized accuracy.
    pub evaluation_set: Dataset,
}

struct IdxReader {
    path: PathBuf,
    bytes: Vec<u8>,
    pos: usize,
}

impl IdxReader {
    fn open(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| SimError::io(path, e))?;
        let is_gzip = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("gz") || e.eq_ignore_ascii_case("gzip"))
            .unwrap_or(false);
        let bytes = if is_gzip {
            let mut out = Vec::new();
            flate2::read::GzDecoder::new(&raw[..])
                .read_to_end(&mut out)
                .map_err(|e| SimError::io(path, e))?;
            out
        } else {
            raw
        };
        Ok(IdxReader {
            path: path.to_path_buf(),
            bytes,
            pos: 0,
        })
    }

    fn err(&self, message: impl Into<String>) -> SimError {
        SimError::IdxFormat {
            path: self.path.clone(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn read_u32(&mut self) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(self.err("truncated while reading a 32-bit field"));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn read_payload(&mut self, len: usize) -> Result<&[u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(self.err(format!(
                "truncated payload: need {len} bytes, have {}",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }
}

/// Loads an IDX image/label pair into a dataset.
///
/// Pixel bytes are scaled to `[0, 1]` by dividing by 255. The class count is
/// inferred as `max label + 1`; use [`Dataset::with_num_classes`] to
/// override. Files whose names end in a gzip suffix are decompressed
/// transparently.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut images = IdxReader::open(images_path)?;
    let magic = images.read_u32()?;
    if magic != IDX_IMAGES_MAGIC {
        images.pos -= 4;
        return Err(images.err(format!(
            "bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x} for images"
        )));
    }
    let n = images.read_u32()? as usize;
    let rows = images.read_u32()? as usize;
    let cols = images.read_u32()? as usize;
    let n_features = rows * cols;
    if n_features == 0 {
        return Err(images.err("image dimensions are zero"));
    }
    let pixels = images.read_payload(n * n_features)?;
    let features: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();

    let mut labels_file = IdxReader::open(labels_path)?;
    let magic = labels_file.read_u32()?;
    if magic != IDX_LABELS_MAGIC {
        labels_file.pos -= 4;
        return Err(labels_file.err(format!(
            "bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x} for labels"
        )));
    }
    let n_labels = labels_file.read_u32()? as usize;
    if n_labels != n {
        return Err(labels_file.err(format!(
            "label count {n_labels} does not match image count {n}"
        )));
    }
    let labels: Vec<usize> = labels_file
        .read_payload(n)?
        .iter()
        .map(|&b| b as usize)
        .collect();

    let num_classes = labels.iter().max().map(|&m| m + 1).unwrap_or(1);
    Dataset::new(features, n_features, labels, num_classes)
}

/// Synthetic isotropic Gaussian blobs with unit variance.
///
/// Class means are deterministic and seed-independent: when
/// `n_features >= n_classes` class `c` sits at `(separation / sqrt(2)) * e_c`,
/// so every pair of means is exactly `separation` apart; otherwise means are
/// spaced `separation` apart along the first axis. Labels are balanced up to
/// the remainder (`label = i mod n_classes`).
pub fn synthetic_blobs(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 || n_features == 0 || n_classes == 0 {
        return Err(SimError::InvalidInput(
            "blob counts must all be positive".into(),
        ));
    }
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| {
            let mut m = vec![0.0; n_features];
            if n_features >= n_classes {
                m[c] = class_separation / std::f64::consts::SQRT_2;
            } else {
                m[0] = c as f64 * class_separation;
            }
            m
        })
        .collect();

    let mut rng = rng::stream(seed, &[rng::TAG_BLOBS_TRAIN]);
    let mut features = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = i % n_classes;
        labels.push(label);
        for &mean in &means[label] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(mean + z);
        }
    }
    Dataset::new(features, n_features, labels, n_classes)
}

fn try_partition(
    data: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut rng = rng::stream(seed, &[TAG_PARTITION]);
    let mut assignments = vec![Vec::new(); n_clients];
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| SimError::Config(format!("invalid Dirichlet alpha {alpha}: {e}")))?;

    for class in 0..data.num_classes() {
        let class_indices: Vec<usize> =
            (0..data.len()).filter(|&i| data.label(i) == class).collect();
        if class_indices.is_empty() {
            continue;
        }
        // p ~ Dir(alpha * 1) via normalized Gamma draws.
        let mut props: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            for p in &mut props {
                *p /= total;
            }
        } else {
            props.fill(1.0 / n_clients as f64);
        }
        // Cumulative thresholds, then one categorical draw per sample.
        let mut cum = Vec::with_capacity(n_clients);
        let mut acc = 0.0;
        for &p in &props {
            acc += p;
            cum.push(acc);
        }
        for &idx in &class_indices {
            let u: f64 = rng.random();
            let client = cum.partition_point(|&c| c <= u).min(n_clients - 1);
            assignments[client].push(idx);
        }
    }
    Ok(assignments)
}

/// Splits sample indices across clients with a per-class symmetric
/// Dirichlet-multinomial draw.
///
/// For each class the client proportions come from `Dir(alpha * 1)` and the
/// class's samples are assigned multinomially. Plans leaving any client
/// empty are redrawn with `seed + 1`, up to 100 retries.
pub fn dirichlet_partition(
    data: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(SimError::InvalidInput("n_clients must be >= 1".into()));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(SimError::Config(format!(
            "Dirichlet alpha must be positive, got {alpha}"
        )));
    }
    const MAX_RETRIES: usize = 100;
    for attempt in 0..MAX_RETRIES {
        let attempt_seed = seed.wrapping_add(attempt as u64);
        let assignments = try_partition(data, n_clients, alpha, attempt_seed)?;
        if assignments.iter().all(|a| !a.is_empty()) {
            return Ok(PartitionPlan {
                assignments,
                alpha,
                seed: attempt_seed,
            });
        }
    }
    Err(SimError::PartitionInfeasible {
        alpha,
        n_clients,
        retries: MAX_RETRIES,
    })
}

/// Seeded shuffle, then first `ceil(n/2)` samples become the selection set
/// and the rest the evaluation set.
pub fn split_server_set(data: &Dataset, seed: u64) -> Result<ServerSplit> {
    let n = data.len();
    if n < 2 {
        return Err(SimError::InvalidInput(format!(
            "server split needs at least 2 samples, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, &[TAG_SERVER_SPLIT]);
    fisher_yates(&mut order, &mut rng);
    let cut = n.div_ceil(2);
    Ok(ServerSplit {
        selection_set: data.subset(&order[..cut]),
        evaluation_set: data.subset(&order[cut..]),
    })
}

fn fisher_yates(values: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..values.len()).rev() {
        let j = rng.random_range(0..=i);
        values.swap(i, j);
    }
}
