//! Classification datasets and their heterogeneous partitioning across devices.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::{seed_stream, Purpose};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    features: Vec<T>,
    labels: Vec<usize>,
    feature_dim: usize,
    num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    /// Validates shapes and that every class in `0..num_classes` occurs.
    pub fn new(
        features: Vec<T>,
        labels: Vec<usize>,
        feature_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::config("dataset", "feature_dim and num_classes must be >= 1"));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(Error::config(
                "dataset",
                format!(
                    "{} feature values for {} rows of width {feature_dim}",
                    features.len(),
                    labels.len()
                ),
            ));
        }
        let mut seen = vec![false; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::config("dataset", format!("label {y} >= {num_classes}")));
            }
            seen[y] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::config("dataset", format!("class {missing} has no samples")));
        }
        Ok(Dataset {
            features,
            labels,
            feature_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Copies the selected rows into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Vec<T>, Vec<usize>) {
        let mut x = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for &i in indices {
            hist[self.labels[i]] += 1;
        }
        hist
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

/// Shannon entropy (nats) of a count histogram.
pub fn entropy(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::format(self.pos as u64, format!("{}: truncated header", self.what))
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }
}

fn parse_idx<'a>(bytes: &'a [u8], magic: u32, what: &'static str) -> Result<(Vec<usize>, &'a [u8])> {
    let mut cur = Cursor { bytes, pos: 0, what };
    let found = cur.u32()?;
    if found != magic {
        return Err(Error::format(
            0,
            format!("{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|_| cur.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let payload_len: usize = dims.iter().product();
    let payload = &bytes[cur.pos..];
    if payload.len() < payload_len {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "{what}: truncated payload, {} of {payload_len} bytes present",
                payload.len()
            ),
        ));
    }
    if payload.len() > payload_len {
        return Err(Error::format(
            (cur.pos + payload_len) as u64,
            format!("{what}: {} trailing bytes", payload.len() - payload_len),
        ));
    }
    Ok((dims, payload))
}

/// Decodes an IDX image/label pair held in memory. Pixels are scaled by 1/255.
pub fn decode_idx<T: Scalar>(images: &[u8], labels: &[u8]) -> Result<Dataset<T>> {
    let (img_dims, pixels) = parse_idx(images, IDX_IMAGES_MAGIC, "images")?;
    let (lbl_dims, raw_labels) = parse_idx(labels, IDX_LABELS_MAGIC, "labels")?;
    if img_dims[0] != lbl_dims[0] {
        return Err(Error::format(
            4,
            format!("count mismatch: {} images vs {} labels", img_dims[0], lbl_dims[0]),
        ));
    }
    let feature_dim = img_dims[1] * img_dims[2];
    let scale = T::from_f64_lossy(1.0 / 255.0);
    let features = pixels.iter().map(|&p| T::from_f64_lossy(p as f64) * scale).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&y| y as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(features, labels, feature_dim, num_classes)
}

/// Loads an MNIST-style IDX pair (`0x00000803` images, `0x00000801` labels).
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    decode_idx(&images, &labels)
}

/// Gaussian blobs around uniform random class centers in `[0,1]^dim`, clipped
/// to `[0,1]`, class-major order.
pub fn synth_clusters<T: Scalar>(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    Ok(synth_train_test(num_classes, dim, per_class, 0, spread, seed)?.0)
}

/// Train and test draws around the same class centers. The train split equals
/// [`synth_clusters`] for the same arguments.
pub fn synth_train_test<T: Scalar>(
    num_classes: usize,
    dim: usize,
    per_class_train: usize,
    per_class_test: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if num_classes == 0 || dim == 0 || per_class_train == 0 {
        return Err(Error::config("synth", "all counts must be >= 1"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::config("synth.spread", "must be finite and >= 0"));
    }
    let mut rng = seed_stream(seed, Purpose::Dataset, &[0]);
    let centers: Vec<f64> = (0..num_classes * dim).map(|_| rng.random::<f64>()).collect();
    let noise = Normal::new(0.0, spread).expect("spread validated");
    let draw = |stream: u64, per_class: usize| -> Result<Dataset<T>> {
        let mut rng = seed_stream(seed, Purpose::Dataset, &[stream]);
        let mut features = Vec::with_capacity(num_classes * per_class * dim);
        let mut labels = Vec::with_capacity(num_classes * per_class);
        for c in 0..num_classes {
            let center = &centers[c * dim..(c + 1) * dim];
            for _ in 0..per_class {
                features.extend(
                    center
                        .iter()
                        .map(|&m| T::from_f64_lossy((m + noise.sample(&mut rng)).clamp(0.0, 1.0))),
                );
                labels.push(c);
            }
        }
        Dataset::new(features, labels, dim, num_classes)
    };
    let train = draw(1, per_class_train)?;
    let test = if per_class_test > 0 {
        draw(2, per_class_test)?
    } else {
        Dataset {
            features: Vec::new(),
            labels: Vec::new(),
            feature_dim: dim,
            num_classes,
        }
    };
    Ok((train, test))
}

/// Disjoint per-device sample index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DevicePartition {
    assignments: Vec<Vec<usize>>,
}

impl DevicePartition {
    /// Checks disjointness, index range and that no device is empty.
    pub fn new(assignments: Vec<Vec<usize>>, num_samples: usize) -> Result<Self> {
        if assignments.is_empty() {
            return Err(Error::Partition("no devices".into()));
        }
        let mut seen = vec![false; num_samples];
        for (d, list) in assignments.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::Partition(format!("device {d} has no samples")));
            }
            for &i in list {
                if i >= num_samples {
                    return Err(Error::Partition(format!(
                        "device {d} holds index {i} >= {num_samples}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("sample {i} assigned twice")));
                }
            }
        }
        Ok(DevicePartition { assignments })
    }

    pub fn n_dev(&self) -> usize {
        self.assignments.len()
    }

    pub fn device(&self, d: usize) -> &[usize] {
        &self.assignments[d]
    }

    /// `n_l` for every device.
    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<usize, &Vec<usize>> = self.assignments.iter().enumerate().collect();
        Ok(serde_json::to_string(&map)?)
    }

    /// Parses the `device -> [indices]` JSON object. Device ids must be `0..n`.
    pub fn from_json(text: &str, num_samples: usize) -> Result<Self> {
        let map: BTreeMap<usize, Vec<usize>> = serde_json::from_str(text)?;
        if map.keys().copied().ne(0..map.len()) {
            return Err(Error::Partition("device ids must be contiguous from 0".into()));
        }
        DevicePartition::new(map.into_values().collect(), num_samples)
    }
}

fn budget_for(num_samples: usize, n_dev: usize) -> Result<usize> {
    if n_dev == 0 {
        return Err(Error::Partition("n_dev must be >= 1".into()));
    }
    let budget = num_samples / n_dev;
    if budget == 0 {
        return Err(Error::Partition(format!(
            "{num_samples} samples cannot cover {n_dev} devices"
        )));
    }
    Ok(budget)
}

/// `u`% of each device's budget from a shuffled IID pool, the rest as two
/// single-label shards from the label-sorted remainder.
pub fn partition_similarity<T: Scalar>(
    ds: &Dataset<T>,
    n_dev: usize,
    u: f64,
    seed: u64,
) -> Result<DevicePartition> {
    if !(0.0..=100.0).contains(&u) {
        return Err(Error::config("partition.u", format!("must lie in [0,100], got {u}")));
    }
    let budget = budget_for(ds.len(), n_dev)?;
    let mut rng = seed_stream(seed, Purpose::Partition, &[0]);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);

    let iid_per_dev = ((budget as f64) * u / 100.0).floor() as usize;
    let mut assignments: Vec<Vec<usize>> = order[..n_dev * iid_per_dev]
        .chunks(iid_per_dev.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    assignments.resize(n_dev, Vec::new());
    if iid_per_dev == budget {
        return DevicePartition::new(assignments, ds.len());
    }

    let classes = ds.num_classes();
    if (2 * n_dev) % classes != 0 {
        return Err(Error::Partition(format!(
            "shard scheme needs 2*n_dev divisible by num_classes (2*{n_dev} vs {classes})"
        )));
    }
    let shards_per_class = 2 * n_dev / classes;
    let mut pools = vec![Vec::new(); classes];
    for &i in &order[n_dev * iid_per_dev..] {
        pools[ds.labels()[i]].push(i);
    }
    let mut shards: Vec<Vec<usize>> = Vec::with_capacity(2 * n_dev);
    for (c, pool) in pools.iter().enumerate() {
        let size = pool.len() / shards_per_class;
        if size == 0 {
            return Err(Error::Partition(format!(
                "class {c} has {} pooled samples for {shards_per_class} shards",
                pool.len()
            )));
        }
        shards.extend(pool.chunks_exact(size).take(shards_per_class).map(<[usize]>::to_vec));
    }
    shards.shuffle(&mut rng);
    for (d, pair) in shards.chunks(2).enumerate() {
        for shard in pair {
            assignments[d].extend_from_slice(shard);
        }
    }
    DevicePartition::new(assignments, ds.len())
}

/// Largest-remainder rounding of `total * weights` to integers summing to `total`.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &d in order.iter().take(total.saturating_sub(assigned)) {
        counts[d] += 1;
    }
    counts
}

/// Per-class device proportions drawn from `Dir(alpha, ..., alpha)`.
pub fn partition_dirichlet<T: Scalar>(
    ds: &Dataset<T>,
    n_dev: usize,
    alpha: f64,
    seed: u64,
) -> Result<DevicePartition> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("partition.alpha", format!("must be > 0, got {alpha}")));
    }
    budget_for(ds.len(), n_dev)?;
    let mut rng = seed_stream(seed, Purpose::Partition, &[1]);
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated");
    let mut assignments = vec![Vec::new(); n_dev];
    for mut pool in ds.indices_by_class() {
        pool.shuffle(&mut rng);
        let mut weights: Vec<f64> = (0..n_dev).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = weights.iter().sum();
        if total > 0.0 && total.is_finite() {
            weights.iter_mut().for_each(|w| *w /= total);
        } else {
            // every gamma draw underflowed: all mass on one device
            weights.iter_mut().for_each(|w| *w = 0.0);
            weights[rng.random_range(0..n_dev)] = 1.0;
        }
        let counts = largest_remainder(pool.len(), &weights);
        let mut start = 0;
        for (d, count) in counts.into_iter().enumerate() {
            assignments[d].extend_from_slice(&pool[start..start + count]);
            start += count;
        }
    }
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let donor = (0..n_dev)
            .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
            .expect("n_dev >= 1");
        let moved = assignments[donor].pop().expect("donor holds >= 2 samples");
        assignments[empty].push(moved);
    }
    DevicePartition::new(assignments, ds.len())
}

/// Equal budgets filled label by label, at most `per_label_cap` samples of a
/// label per pick.
pub fn partition_nonbalance<T: Scalar>(
    ds: &Dataset<T>,
    n_dev: usize,
    per_label_cap: usize,
    seed: u64,
) -> Result<DevicePartition> {
    if per_label_cap == 0 {
        return Err(Error::config("partition.cap", "must be >= 1"));
    }
    let budget = budget_for(ds.len(), n_dev)?;
    let mut rng = seed_stream(seed, Purpose::Partition, &[2]);
    let mut pools = ds.indices_by_class();
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut assignments = Vec::with_capacity(n_dev);
    for d in 0..n_dev {
        let mut mine = Vec::with_capacity(budget);
        let mut used = BTreeSet::new();
        while mine.len() < budget {
            let fresh: Vec<usize> = (0..pools.len())
                .filter(|&c| !pools[c].is_empty() && !used.contains(&c))
                .collect();
            let candidates = if fresh.is_empty() {
                (0..pools.len()).filter(|&c| !pools[c].is_empty()).collect()
            } else {
                fresh
            };
            if candidates.is_empty() {
                return Err(Error::Partition(format!(
                    "label pools exhausted while filling device {d}"
                )));
            }
            let c = candidates[rng.random_range(0..candidates.len())];
            used.insert(c);
            let take = per_label_cap.min(pools[c].len()).min(budget - mine.len());
            let keep = pools[c].len() - take;
            mine.extend(pools[c].drain(keep..));
        }
        assignments.push(mine);
    }
    DevicePartition::new(assignments, ds.len())
}

/// Uniform draw without replacement of `min(batch_size, n_l)` of the device's
/// samples, returned as dataset indices.
pub fn batch_iter<R: Rng + ?Sized>(
    dp: &DevicePartition,
    device: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<usize> {
    let local = dp.device(device);
    let amount = batch_size.min(local.len());
    rand::seq::index::sample(rng, local.len(), amount)
        .into_iter()
        .map(|k| local[k])
        .collect()
}
