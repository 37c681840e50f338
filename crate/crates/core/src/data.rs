//! Dataset construction and non-IID partitioning: synthetic Gaussian
//! blobs, IDX-format ingestion, a stratified holdout split, per-class
//! Dirichlet allocation across clients, and seeded epoch batching.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Batch, FeatureShape};
use crate::seeds::rng_from;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    External(PathBuf),
}

/// An immutable labeled dataset; samples are stored row-major.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub shape: FeatureShape,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_size(&self) -> usize {
        self.shape.size()
    }

    /// Copies the rows named by `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let fs = self.feature_size();
        let mut inputs = Vec::with_capacity(indices.len() * fs);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(&self.inputs[i * fs..(i + 1) * fs]);
            labels.push(self.labels[i]);
        }
        Batch {
            inputs,
            shape: self.shape,
            labels,
        }
    }

    /// Batch over the whole dataset, in stored order.
    pub fn full_batch(&self) -> Batch {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }
}

/// Gaussian blobs, one unit-variance cluster per class, with cluster
/// means at pairwise distance `class_sep` (minimum pairwise distance
/// when `dim < num_classes`). Deterministic per seed.
pub fn synth_dataset(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    class_sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::config("synthetic dataset needs at least 2 classes"));
    }
    if dim < 2 {
        return Err(Error::config("synthetic dataset needs dim >= 2"));
    }
    if per_class < 1 {
        return Err(Error::config("synthetic dataset needs per_class >= 1"));
    }
    if !(class_sep.is_finite() && class_sep >= 0.0) {
        return Err(Error::config("class_sep must be finite and nonnegative"));
    }
    let mut rng = rng_from(seed);

    // Class means. With dim >= num_classes the scaled one-hot corners are
    // exactly equidistant; otherwise random directions rescaled so the
    // minimum pairwise distance equals class_sep.
    let mut means = vec![vec![0.0; dim]; num_classes];
    if dim >= num_classes {
        let scale = class_sep / 2.0f64.sqrt();
        for (c, m) in means.iter_mut().enumerate() {
            m[c] = scale;
        }
    } else {
        for m in means.iter_mut() {
            loop {
                let mut norm2 = 0.0;
                for v in m.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                    norm2 += *v * *v;
                }
                if norm2 > 1e-12 {
                    let norm = norm2.sqrt();
                    for v in m.iter_mut() {
                        *v /= norm;
                    }
                    break;
                }
            }
        }
        let mut min_dist = f64::INFINITY;
        for a in 0..num_classes {
            for b in (a + 1)..num_classes {
                let d2: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                min_dist = min_dist.min(d2.sqrt());
            }
        }
        if min_dist <= 1e-9 {
            return Err(Error::config(
                "degenerate class means; try a different seed",
            ));
        }
        let scale = class_sep / min_dist;
        for m in means.iter_mut() {
            for v in m.iter_mut() {
                *v *= scale;
            }
        }
    }

    let mut inputs = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for mv in mean {
                let noise: f64 = StandardNormal.sample(&mut rng);
                inputs.push(mv + noise);
            }
            labels.push(c as u32);
        }
    }
    Ok(Dataset {
        inputs,
        shape: FeatureShape::Flat(dim),
        labels,
        num_classes,
        provenance: Provenance::Synthetic,
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], off: usize, path: &Path, field: &str) -> Result<u32> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            detail: format!("truncated file while reading {field}"),
        });
    }
    Ok(u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]))
}

/// Loads an IDX image/label file pair (big-endian magic and dims, raw
/// unsigned-byte payload). Pixels are scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let magic = read_be_u32(&img_bytes, 0, images_path, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Ingestion {
            path: images_path.to_path_buf(),
            detail: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(&img_bytes, 4, images_path, "image count")? as usize;
    let h = read_be_u32(&img_bytes, 8, images_path, "image height")? as usize;
    let w = read_be_u32(&img_bytes, 12, images_path, "image width")? as usize;
    let expected = 16 + n * h * w;
    if img_bytes.len() < expected {
        return Err(Error::Ingestion {
            path: images_path.to_path_buf(),
            detail: format!(
                "truncated pixel payload: {} bytes, expected {expected}",
                img_bytes.len()
            ),
        });
    }

    let magic = read_be_u32(&lbl_bytes, 0, labels_path, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Ingestion {
            path: labels_path.to_path_buf(),
            detail: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n_labels = read_be_u32(&lbl_bytes, 4, labels_path, "label count")? as usize;
    if n_labels != n {
        return Err(Error::Ingestion {
            path: labels_path.to_path_buf(),
            detail: format!("label count {n_labels} != image count {n}"),
        });
    }
    if lbl_bytes.len() < 8 + n {
        return Err(Error::Ingestion {
            path: labels_path.to_path_buf(),
            detail: format!("truncated label payload: {} bytes", lbl_bytes.len()),
        });
    }
    if n == 0 {
        return Err(Error::Ingestion {
            path: images_path.to_path_buf(),
            detail: "empty dataset (image count is zero)".to_string(),
        });
    }

    let inputs: Vec<f64> = img_bytes[16..16 + n * h * w]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<u32> = lbl_bytes[8..8 + n].iter().map(|&b| b as u32).collect();
    let num_classes = labels.iter().copied().max().unwrap() as usize + 1;
    Ok(Dataset {
        inputs,
        shape: FeatureShape::Image {
            channels: 1,
            height: h,
            width: w,
        },
        labels,
        num_classes: num_classes.max(2),
        provenance: Provenance::External(images_path.to_path_buf()),
    })
}

/// Stratified train/test split: `fraction` of each class (rounded) goes
/// to the test set, at least one sample per class stays in train.
pub fn holdout_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config(format!(
            "holdout fraction {fraction} outside [0, 1)"
        )));
    }
    let mut rng = rng_from(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..ds.num_classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] as usize == c).collect();
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * fraction).round() as usize).min(idx.len().saturating_sub(1));
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((subset(ds, &train_idx), subset(ds, &test_idx)))
}

fn subset(ds: &Dataset, indices: &[usize]) -> Dataset {
    let b = ds.batch(indices);
    Dataset {
        inputs: b.inputs,
        shape: ds.shape,
        labels: b.labels,
        num_classes: ds.num_classes,
        provenance: ds.provenance.clone(),
    }
}

/// Per-client shards of dataset indices drawn by per-class Dirichlet
/// allocation.
#[derive(Debug, Clone)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }
}

const PARTITION_RETRIES: usize = 100;

/// For each class, draws client proportions from Dir(alpha) and splits
/// that class's (shuffled) indices at the cumulative boundaries, so
/// every sample is assigned. Redraws the whole partition until each
/// shard holds at least `min_shard` samples.
pub fn dirichlet_partition(
    ds: &Dataset,
    num_clients: usize,
    alpha: f64,
    min_shard: usize,
    seed: u64,
) -> Result<Partition> {
    if num_clients < 1 {
        return Err(Error::Partition("need at least one client".to_string()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Partition(format!("alpha {alpha} must be positive")));
    }
    if min_shard < 1 {
        return Err(Error::Partition("min_shard must be >= 1".to_string()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = rng_from(seed);
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::Partition(format!("invalid Dirichlet concentration: {e}")))?;

    for _ in 0..PARTITION_RETRIES {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        for class_idx in &by_class {
            if class_idx.is_empty() {
                continue;
            }
            let mut idx = class_idx.clone();
            idx.shuffle(&mut rng);
            let props = if num_clients == 1 {
                vec![1.0]
            } else {
                draw_proportions(&gamma, num_clients, &mut rng)
            };
            let n = idx.len();
            let mut cum = 0.0;
            let mut start = 0usize;
            for (k, p) in props.iter().enumerate() {
                cum += p;
                let end = if k + 1 == num_clients {
                    n
                } else {
                    ((cum * n as f64).round() as usize).min(n)
                };
                shards[k].extend_from_slice(&idx[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if shards.iter().all(|s| s.len() >= min_shard) {
            for s in shards.iter_mut() {
                s.sort_unstable();
            }
            return Ok(Partition {
                shards,
                alpha,
                seed,
            });
        }
    }
    Err(Error::Partition(format!(
        "could not satisfy min_shard {min_shard} for {num_clients} clients after \
         {PARTITION_RETRIES} draws; use a larger dataset or larger alpha"
    )))
}

fn draw_proportions(gamma: &Gamma<f64>, k: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    // Normalized Gamma draws; redraw on the (vanishingly rare) all-zero
    // underflow so the proportions always sum to 1.
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum.is_finite() && sum > 0.0 {
            return draws.iter().map(|g| g / sum).collect();
        }
    }
}

/// Aggregation weights proportional to shard sizes; sums to 1.
pub fn client_weights(partition: &Partition) -> Vec<f64> {
    let total: usize = partition.shards.iter().map(Vec::len).sum();
    partition
        .shards
        .iter()
        .map(|s| s.len() as f64 / total as f64)
        .collect()
}

/// One epoch of mini-batches over a shard: seeded shuffle, then chunks
/// of `batch_size` (last chunk may be short).
pub fn epoch_batches(shard: &[usize], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order = shard.to_vec();
    order.shuffle(&mut rng_from(seed));
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}
