//! Synthetic datasets and their on-disk format.
//!
//! Dataset files are little-endian:
//!
//! ```text
//! "AKDD" | u32 version=1 | u8 rank (1 or 3) | u32 dims[rank] | u32 N | u32 K
//! | f32 features[N * prod(dims)] | u32 labels[N]
//! ```
//!
//! Generated features are rounded to `f32` so a write/read cycle is exact.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adapter::TeacherBundle;
use crate::error::{Error, Result};
use crate::io::Reader;
use crate::tensor::Tensor;
use crate::trainer::{self, TeacherTraining};

pub const DATASET_MAGIC: &[u8; 4] = b"AKDD";
pub const DATASET_VERSION: u32 = 1;

/// Labelled examples with a shared per-example shape. May be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: Vec<usize>,
    values: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rank() < 2 {
            return Err(Error::Data(format!(
                "features must be [N, ...], got {:?}",
                features.dims()
            )));
        }
        if features.dims()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                features.dims()[0],
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            shape: features.dims()[1..].to_vec(),
            values: features.values().to_vec(),
            labels,
            num_classes,
        })
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

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// All examples as one `[N, ...]` tensor.
    ///
    /// # Panics
    /// If the dataset is empty.
    pub fn features(&self) -> Tensor {
        assert!(!self.is_empty(), "empty dataset has no feature tensor");
        self.gather(&(0..self.len()).collect::<Vec<_>>()).0
    }

    /// Flat feature values in example order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Shape of one example.
    pub fn example_shape(&self) -> &[usize] {
        &self.shape
    }

    fn example_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Stacks the selected examples into a batch.
    ///
    /// # Panics
    /// If `indices` is empty.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let len = self.example_len();
        let src = &self.values;
        let mut values = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            values.extend_from_slice(&src[i * len..(i + 1) * len]);
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(self.example_shape());
        let batch = Tensor::new(dims, values).expect("gathered batch is well-formed");
        (batch, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let len = self.example_len();
        let mut values = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            values.extend_from_slice(&self.values[i * len..(i + 1) * len]);
        }
        Dataset {
            shape: self.shape.clone(),
            values,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Consecutive batches in dataset order: `(first index, batch, labels)`.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = (usize, Tensor, Vec<usize>)> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
            let (b, l) = self.gather(&idx);
            (start, b, l)
        })
    }

    /// Replaces labels, keeping features.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        if labels.len() != self.len() {
            return Err(Error::Data(format!(
                "{} examples but {} labels",
                self.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(Dataset {
            shape: self.shape.clone(),
            values: self.values.clone(),
            labels,
            num_classes: self.num_classes,
        })
    }

    /// Deterministic shuffled split into `(first, second)` where `first`
    /// holds `round(fraction * N)` examples.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * fraction).round() as usize;
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }

    /// Splits class-major generator output so the first `per_class` examples
    /// of every class go to the first set.
    pub fn split_per_class(&self, per_class: usize) -> (Dataset, Dataset) {
        let mut seen = vec![0usize; self.num_classes];
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            if seen[l] < per_class {
                a.push(i);
            } else {
                b.push(i);
            }
            seen[l] += 1;
        }
        (self.subset(&a), self.subset(&b))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.is_empty() {
            return Err(Error::Data("cannot store an empty dataset".into()));
        }
        let shape = self.example_shape();
        if shape.len() != 1 && shape.len() != 3 {
            return Err(Error::Data(format!("cannot store example shape {shape:?}")));
        }
        let mut out = Vec::with_capacity(32 + self.values.len() * 4 + self.len() * 4);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&u32_of(d)?.to_le_bytes());
        }
        out.extend_from_slice(&u32_of(self.len())?.to_le_bytes());
        out.extend_from_slice(&u32_of(self.num_classes)?.to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&u32_of(l)?.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let rank_at = r.offset();
        let rank = r.u8()? as usize;
        if rank != 1 && rank != 3 {
            return Err(Error::Format {
                offset: rank_at,
                reason: format!("rank must be 1 or 3, got {rank}"),
            });
        }
        let mut dims = Vec::with_capacity(rank + 1);
        for _ in 0..rank {
            let at = r.offset();
            match r.u32()? as usize {
                0 => {
                    return Err(Error::Format {
                        offset: at,
                        reason: "zero-sized dimension".into(),
                    })
                }
                d => dims.push(d),
            }
        }
        let n_at = r.offset();
        let n = r.u32()? as usize;
        let k_at = r.offset();
        let k = r.u32()? as usize;
        if n == 0 {
            return Err(Error::Format {
                offset: n_at,
                reason: "dataset has no examples".into(),
            });
        }
        if k == 0 {
            return Err(Error::Format {
                offset: k_at,
                reason: "dataset has no classes".into(),
            });
        }
        let per = dims.iter().product::<usize>();
        let payload = n
            .checked_mul(per)
            .and_then(|v| v.checked_add(n))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format {
                offset: n_at,
                reason: "declared size overflows".into(),
            })?;
        r.expect_exact(payload)?;
        let values = (0..n * per)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            let l = r.u32()? as usize;
            if l >= k {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("label {l} out of range for {k} classes"),
                });
            }
            labels.push(l);
        }
        let mut full = vec![n];
        full.extend(dims);
        Dataset::new(Tensor::new(full, values)?, labels, k)
    }
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit in u32")))
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    std::fs::write(path, ds.to_bytes()?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

/// Gaussian clusters around seeded random centers, class-major order.
///
/// Centers are drawn uniformly from a cube sized so that `K` points at
/// pairwise distance `separation` fit comfortably; each center gets up to
/// 1000 placement attempts.
pub fn gen_blobs(
    classes: usize,
    samples_per_class: usize,
    dim: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Generation(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if !(separation.is_finite() && separation > 0.0)
        || !(noise.is_finite() && noise >= 0.0)
        || dim == 0
        || samples_per_class == 0
    {
        return Err(Error::Generation(format!(
            "invalid blob spec: dim={dim}, per_class={samples_per_class}, separation={separation}, noise={noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = separation * (classes as f64).powf(1.0 / dim as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for k in 0..classes {
        let mut placed = false;
        for _ in 0..1000 {
            let c: Vec<f64> = (0..dim).map(|_| round32(rng.random_range(-half..half))).collect();
            let clear = centers
                .iter()
                .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= separation);
            if clear {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place center {k} at separation {separation} after 1000 attempts"
            )));
        }
    }
    let n = classes * samples_per_class;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_class {
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(round32(c + noise * z));
            }
            labels.push(k);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], values)?, labels, classes)
}

/// Class-conditional sinusoidal textures plus Gaussian noise, class-major.
///
/// Class `k` gets its own vertical/horizontal frequency pair and one phase
/// per channel.
pub fn gen_tiny_images(
    classes: usize,
    samples_per_class: usize,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Dataset> {
    const NOISE: f64 = 0.5;
    if classes == 0 || samples_per_class == 0 || channels == 0 || height == 0 || width == 0 {
        return Err(Error::Generation("image generator sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let patterns: Vec<(f64, f64, Vec<f64>)> = (0..classes)
        .map(|_| {
            let fy = rng.random_range(0.5..2.5);
            let fx = rng.random_range(0.5..2.5);
            let phases = (0..channels).map(|_| rng.random_range(0.0..tau)).collect();
            (fy, fx, phases)
        })
        .collect();
    let per = channels * height * width;
    let n = classes * samples_per_class;
    let mut values = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for (k, (fy, fx, phases)) in patterns.iter().enumerate() {
        for _ in 0..samples_per_class {
            for phase in phases {
                for y in 0..height {
                    for x in 0..width {
                        let arg = tau * (fy * y as f64 / height as f64 + fx * x as f64 / width as f64);
                        let z: f64 = StandardNormal.sample(&mut rng);
                        values.push(round32((arg + phase).sin() + NOISE * z));
                    }
                }
            }
            labels.push(k);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, channels, height, width], values)?,
        labels,
        classes,
    )
}

/// Partition of the classes into one reliable subset per teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSplitSpec {
    pub subsets: Vec<Vec<usize>>,
}

impl ExpertSplitSpec {
    /// Splits `0..classes` into `teachers` contiguous near-equal subsets.
    pub fn contiguous(classes: usize, teachers: usize) -> Result<Self> {
        let ends = crate::nn::partition(classes, teachers).map_err(|_| {
            Error::Spec(format!(
                "cannot split {classes} classes among {teachers} teachers"
            ))
        })?;
        let mut start = 0;
        let subsets = ends
            .into_iter()
            .map(|end| {
                let s = (start..end).collect();
                start = end;
                s
            })
            .collect();
        Ok(ExpertSplitSpec { subsets })
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let mut owner = vec![None; classes];
        for (t, subset) in self.subsets.iter().enumerate() {
            if subset.is_empty() {
                return Err(Error::Spec(format!("teacher {t} has an empty class subset")));
            }
            for &c in subset {
                if c >= classes {
                    return Err(Error::Spec(format!(
                        "class {c} out of range for {classes} classes"
                    )));
                }
                if let Some(prev) = owner[c].replace(t) {
                    return Err(Error::Spec(format!(
                        "class {c} assigned to teachers {prev} and {t}"
                    )));
                }
            }
        }
        if let Some(c) = owner.iter().position(Option::is_none) {
            return Err(Error::Spec(format!("class {c} is not covered by any teacher")));
        }
        Ok(())
    }
}

/// Replaces labels outside `keep` with uniform random labels over all classes.
pub fn noise_labels(ds: &Dataset, keep: &[usize], seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = ds.num_classes();
    let labels = ds
        .labels()
        .iter()
        .map(|&l| {
            if keep.contains(&l) {
                l
            } else {
                rng.random_range(0..k)
            }
        })
        .collect();
    ds.with_labels(labels)
}

/// Top-1 accuracy restricted to examples whose label is in `classes`.
pub fn accuracy_on_classes(model: &crate::nn::Model, ds: &Dataset, classes: &[usize]) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&i| classes.contains(&ds.labels()[i]))
        .collect();
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    trainer::evaluate(model, &ds.subset(&idx))
}

/// Trains one teacher per subset: labels inside the subset stay intact and
/// every other label is replaced by a uniform random class. Each teacher
/// must beat its off-subset accuracy by at least 20 points on `base`.
pub fn make_expert_teachers(
    spec: &ExpertSplitSpec,
    base: &Dataset,
    arch: &str,
    training: &TeacherTraining,
    seed: u64,
) -> Result<TeacherBundle> {
    spec.validate(base.num_classes())?;
    let mut models = Vec::with_capacity(spec.subsets.len());
    let mut val_accuracy = Vec::with_capacity(spec.subsets.len());
    for (t, subset) in spec.subsets.iter().enumerate() {
        let teacher_seed = seed.wrapping_add(1000 * t as u64 + 1);
        let noisy = noise_labels(base, subset, teacher_seed ^ 0x5eed)?;
        let (model, _) = trainer::train_teacher(arch, &noisy, training, teacher_seed)?;
        let (_, val) = base.split(0.9, teacher_seed);
        let acc = trainer::evaluate(&model, &val)?;

        let off: Vec<usize> = (0..base.num_classes()).filter(|c| !subset.contains(c)).collect();
        if !off.is_empty() {
            let on_acc = accuracy_on_classes(&model, base, subset)?;
            let off_acc = accuracy_on_classes(&model, base, &off)?;
            if on_acc - off_acc < 0.2 {
                return Err(Error::Generation(format!(
                    "teacher {t} is not an expert: {:.1}% on its classes vs {:.1}% elsewhere",
                    100.0 * on_acc,
                    100.0 * off_acc
                )));
            }
        }
        models.push(model);
        val_accuracy.push(acc);
    }
    TeacherBundle::new(models, val_accuracy)
}
