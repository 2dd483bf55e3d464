//! Datasets: IDX ingestion, synthetic Gaussian blobs, stratified splits and
//! the M-per-class batch sampler.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{seeds, Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Finite real inputs, contiguous labels `0..num_classes`, and disjoint
/// train / validation / test index lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Build from raw rows; labels are remapped to `0..C` in ascending order
    /// and every sample starts in the train split.
    pub fn new(dim: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("input dim must be positive".into()));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::shape("dataset inputs", labels.len() * dim, inputs.len()));
        }
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if inputs.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("dataset inputs must be finite".into()));
        }
        let mut ids: Vec<usize> = labels.clone();
        ids.sort_unstable();
        ids.dedup();
        let dense: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let labels: Vec<usize> = labels.iter().map(|l| dense[l]).collect();
        let n = labels.len();
        Ok(Dataset {
            dim,
            inputs,
            labels,
            num_classes: ids.len(),
            train: (0..n).collect(),
            val: Vec::new(),
            test: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major inputs of `indices`.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.input(i));
        }
        out
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Indices of `subset` grouped by class.
    pub fn by_class(&self, subset: &[usize]) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in subset {
            out.entry(self.labels[i]).or_default().push(i);
        }
        out
    }

    /// Append another dataset's samples as the test split.
    pub fn with_test_set(mut self, test: Dataset) -> Result<Self> {
        if test.dim != self.dim {
            return Err(Error::shape("test inputs", self.dim, test.dim));
        }
        if test.num_classes != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "test set has {} classes, train set {}",
                test.num_classes, self.num_classes
            )));
        }
        let offset = self.len();
        self.inputs.extend_from_slice(&test.inputs);
        self.labels.extend_from_slice(&test.labels);
        self.test = (offset..offset + test.len()).collect();
        Ok(self)
    }

    /// Shift and scale every feature to zero mean and unit variance over the
    /// train split. Constant features are only centered.
    pub fn standardize(mut self) -> Result<Self> {
        if self.train.is_empty() {
            return Err(Error::Empty("train split"));
        }
        let d = self.dim;
        let n = self.train.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in &self.train {
            for (m, x) in mean.iter_mut().zip(&self.inputs[i * d..(i + 1) * d]) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for &i in &self.train {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(&self.inputs[i * d..(i + 1) * d]) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        for row in self.inputs.chunks_mut(d) {
            for k in 0..d {
                row[k] = (row[k] - mean[k]) * scale[k];
            }
        }
        Ok(self)
    }

    /// Keep at most `max` samples per class within every split.
    pub fn limit_per_class(mut self, max: usize, seed: u64) -> Self {
        let mut rng = seeds::stream(seed, "limit");
        for split in [&mut self.train, &mut self.val, &mut self.test] {
            let labels = &self.labels;
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &i in split.iter() {
                groups.entry(labels[i]).or_default().push(i);
            }
            let mut kept = Vec::new();
            for members in groups.values() {
                if members.len() <= max {
                    kept.extend_from_slice(members);
                } else {
                    let pick = index::sample(&mut rng, members.len(), max);
                    kept.extend(pick.iter().map(|k| members[k]));
                }
            }
            kept.sort_unstable();
            *split = kept;
        }
        self
    }

    /// IDX image bytes (pixels `round(255·x)`) laid out as `rows × cols`.
    pub fn to_idx_images(&self, rows: usize, cols: usize) -> Result<Vec<u8>> {
        if rows * cols != self.dim {
            return Err(Error::shape("idx image size", self.dim, rows * cols));
        }
        let mut out = Vec::with_capacity(16 + self.inputs.len());
        for v in [IDX_IMAGES_MAGIC, self.len() as u32, rows as u32, cols as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend(self.inputs.iter().map(|x| (x * 255.0).round().clamp(0.0, 255.0) as u8));
        Ok(out)
    }

    pub fn to_idx_labels(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.len() as u32).to_be_bytes());
        out.extend(self.labels.iter().map(|&l| l as u8));
        out
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::file(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parse IDX image bytes into `(count, rows·cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::WrongMagic {
            path: path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((n, rows * cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::WrongMagic {
            path: path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| usize::from(b)).collect())
}

/// Load an IDX image/label file pair (e.g. MNIST).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, dim, pixels) = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if n != labels.len() {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    Dataset::new(dim, pixels, labels)
}

/// Distance of class means from the cube center `(0.5, …, 0.5)`.
pub const BLOB_MEAN_RADIUS: f64 = 0.35;

/// Gaussian blobs: class means uniform on a sphere of radius
/// [`BLOB_MEAN_RADIUS`] around the cube center, points `mean + spread·N(0, I)`
/// clamped to `[0, 1]`. Samples are stored class-major.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    synth_mixture(classes, 1, per_class, dim, spread, seed)
}

/// Like [`synth_blobs`] but each class is an equal mixture of `modes`
/// blobs with independent means; sample `j` of a class comes from mode
/// `j mod modes`.
pub fn synth_mixture(
    classes: usize,
    modes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || per_class < 2 || dim == 0 || modes == 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic blobs need >= 2 classes, >= 1 mode, >= 2 samples per class and dim > 0 \
             (got {classes}, {modes}, {per_class}, {dim})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument("spread must be finite and >= 0".into()));
    }
    let mut rng = seeds::stream(seed, seeds::DATA);
    let mut means = Vec::with_capacity(classes * modes);
    for _ in 0..classes * modes {
        let dir: Vec<f64> = loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = crate::dot(&v, &v).sqrt();
            if n > 1e-12 {
                break v.iter().map(|x| x / n).collect();
            }
        };
        means.push(dir.iter().map(|x| 0.5 + BLOB_MEAN_RADIUS * x).collect::<Vec<f64>>());
    }
    let mut inputs = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for j in 0..per_class {
            for m in &means[c * modes + j % modes] {
                let z: f64 = StandardNormal.sample(&mut rng);
                inputs.push((m + spread * z).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset::new(dim, inputs, labels)
}

/// Move `fraction` of each class (rounded) from `from` into a new list.
fn stratified_take(
    dataset: &Dataset,
    from: &[usize],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) || !fraction.is_finite() {
        return Err(Error::InvalidArgument(format!("split fraction {fraction} not in [0, 1)")));
    }
    let mut keep = Vec::new();
    let mut taken = Vec::new();
    for (class, members) in dataset.by_class(from) {
        let n = members.len();
        let k = (fraction * n as f64).round() as usize;
        if fraction > 0.0 && (k == 0 || k >= n) {
            return Err(Error::ClassTooSmall {
                class,
                available: n,
                required: 2,
            });
        }
        let picked = index::sample(rng, n, k).into_vec();
        let mut mask = vec![false; n];
        picked.iter().for_each(|&p| mask[p] = true);
        for (m, &i) in members.iter().enumerate() {
            if mask[m] {
                taken.push(i);
            } else {
                keep.push(i);
            }
        }
    }
    keep.sort_unstable();
    taken.sort_unstable();
    Ok((keep, taken))
}

/// Stratified train/validation split of the non-test samples.
pub fn split(mut dataset: Dataset, val_fraction: f64, seed: u64) -> Result<Dataset> {
    let mut rng = seeds::stream(seed, seeds::SPLIT);
    let mut pool: Vec<usize> = dataset.train.iter().chain(&dataset.val).copied().collect();
    pool.sort_unstable();
    let (train, val) = stratified_take(&dataset, &pool, val_fraction, &mut rng)?;
    dataset.train = train;
    dataset.val = val;
    Ok(dataset)
}

/// Stratified hold-out of a test split from the current train samples.
pub fn holdout_test(mut dataset: Dataset, test_fraction: f64, seed: u64) -> Result<Dataset> {
    let mut rng = seeds::stream(seed, "holdout");
    let (train, test) = stratified_take(&dataset, &dataset.train, test_fraction, &mut rng)?;
    dataset.train = train;
    dataset.test = test;
    Ok(dataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_size: 32,
            samples_per_class: 4,
            seed: 0,
        }
    }
}

/// Draws `B/M` distinct train classes, then `M` distinct samples of each.
#[derive(Debug, Clone)]
pub struct MPerClassSampler {
    classes: Vec<Vec<usize>>,
    classes_per_batch: usize,
    samples_per_class: usize,
    rng: ChaCha8Rng,
}

impl MPerClassSampler {
    pub fn new(dataset: &Dataset, config: SamplerConfig) -> Result<Self> {
        let SamplerConfig {
            batch_size,
            samples_per_class: m,
            seed,
        } = config;
        if m == 0 || batch_size == 0 || batch_size % m != 0 {
            return Err(Error::InvalidArgument(format!(
                "samples_per_class {m} must divide batch_size {batch_size}"
            )));
        }
        let groups = dataset.by_class(&dataset.train);
        let classes_per_batch = batch_size / m;
        if classes_per_batch > groups.len() {
            return Err(Error::InvalidArgument(format!(
                "batch needs {classes_per_batch} classes, train split has {}",
                groups.len()
            )));
        }
        for (&class, members) in &groups {
            if members.len() < m {
                return Err(Error::ClassTooSmall {
                    class,
                    available: members.len(),
                    required: m,
                });
            }
        }
        Ok(MPerClassSampler {
            classes: groups.into_values().collect(),
            classes_per_batch,
            samples_per_class: m,
            rng: seeds::stream(seed, seeds::SAMPLER),
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.classes_per_batch * self.samples_per_class);
        let chosen = index::sample(&mut self.rng, self.classes.len(), self.classes_per_batch);
        for c in chosen.iter() {
            let members = &self.classes[c];
            let picks = index::sample(&mut self.rng, members.len(), self.samples_per_class);
            batch.extend(picks.iter().map(|k| members[k]));
        }
        batch
    }
}

/// `count` distinct members of each class of `subset`, drawn uniformly.
pub fn sample_per_class<R: Rng + ?Sized>(
    dataset: &Dataset,
    subset: &[usize],
    count: usize,
    rng: &mut R,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for (class, members) in dataset.by_class(subset) {
        if members.len() < count {
            return Err(Error::ClassTooSmall {
                class,
                available: members.len(),
                required: count,
            });
        }
        let picks = index::sample(rng, members.len(), count);
        out.insert(class, picks.iter().map(|k| members[k]).collect());
    }
    Ok(out)
}
