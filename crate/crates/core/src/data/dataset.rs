//! Labelled frame collections, class weighting and stratified splitting.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::image::{load_preprocessed, PreprocConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// File in a dataset root that overrides class order: a JSON list of names.
pub const CLASS_MANIFEST: &str = "classes.json";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub label: usize,
}

/// Ordered `(path, class)` samples with per-class counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
    counts: Vec<usize>,
}

impl Dataset {
    /// Every class must have at least one sample.
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        let mut counts = vec![0usize; class_names.len()];
        for s in &samples {
            match counts.get_mut(s.label) {
                Some(c) => *c += 1,
                None => {
                    return Err(Error::contract(format!(
                        "{}: label {} out of range for {} classes",
                        s.path.display(),
                        s.label,
                        class_names.len()
                    )))
                }
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::contract(format!(
                "class {:?} has no samples",
                class_names[empty]
            )));
        }
        Ok(Dataset {
            samples,
            class_names,
            counts,
        })
    }

    /// Reads `root/<class>/*.{png,jpg,jpeg}`.
    ///
    /// Class order is `selected` when given, otherwise the list in
    /// `root/classes.json` when present, otherwise lexicographic directory
    /// order. Files within a class are sorted by name.
    pub fn from_dir(root: impl AsRef<Path>, selected: Option<&[String]>) -> Result<Self> {
        let root = root.as_ref();
        let class_names = match selected {
            Some(names) => names.to_vec(),
            None => discover_classes(root)?,
        };
        if class_names.is_empty() {
            return Err(Error::contract(format!("{}: no class directories", root.display())));
        }
        let mut samples = Vec::new();
        for (label, name) in class_names.iter().enumerate() {
            let dir = root.join(name);
            if !dir.is_dir() {
                return Err(Error::contract(format!(
                    "class directory {} does not exist",
                    dir.display()
                )));
            }
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image_file(p))
                .collect();
            files.sort();
            samples.extend(files.into_iter().map(|path| Sample { path, label }));
        }
        Self::new(samples, class_names)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Samples per class.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Stratified split into `(train, val, test)`.
    ///
    /// For each class the samples are shuffled with a seeded generator and
    /// cut at `round(r₀·n)` and `round((r₀+r₁)·n)`. Partitions keep the
    /// original sample order.
    pub fn split(&self, ratios: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
        if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "split ratios {ratios:?} must be positive and sum to 1"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut parts: [Vec<usize>; 3] = Default::default();
        for class in 0..self.num_classes() {
            let mut idx: Vec<usize> = (0..self.samples.len())
                .filter(|&i| self.samples[i].label == class)
                .collect();
            idx.shuffle(&mut rng);
            let n = idx.len() as f64;
            let a = (ratios[0] * n).round() as usize;
            let b = ((ratios[0] + ratios[1]) * n).round() as usize;
            let b = b.min(idx.len());
            if a == 0 || b <= a || b >= idx.len() {
                return Err(Error::contract(format!(
                    "class {:?} has {} samples, too few for a {ratios:?} split",
                    self.class_names[class],
                    idx.len()
                )));
            }
            parts[0].extend_from_slice(&idx[..a]);
            parts[1].extend_from_slice(&idx[a..b]);
            parts[2].extend_from_slice(&idx[b..]);
        }
        let build = |mut ix: Vec<usize>| {
            ix.sort_unstable();
            Dataset::new(
                ix.into_iter().map(|i| self.samples[i].clone()).collect(),
                self.class_names.clone(),
            )
        };
        let [tr, va, te] = parts;
        Ok((build(tr)?, build(va)?, build(te)?))
    }

    /// Subsamples every class to the size of the smallest one, choosing
    /// which samples to keep with a seeded shuffle. Original order is kept.
    pub fn balanced(&self, seed: u64) -> Result<Dataset> {
        let keep = *self.counts.iter().min().expect("at least one class");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = Vec::with_capacity(keep * self.num_classes());
        for class in 0..self.num_classes() {
            let mut idx: Vec<usize> = (0..self.samples.len())
                .filter(|&i| self.samples[i].label == class)
                .collect();
            idx.shuffle(&mut rng);
            chosen.extend_from_slice(&idx[..keep]);
        }
        chosen.sort_unstable();
        Dataset::new(
            chosen.into_iter().map(|i| self.samples[i].clone()).collect(),
            self.class_names.clone(),
        )
    }

    /// Loads and preprocesses every sample in order.
    pub fn load(&self, cfg: &PreprocConfig) -> Result<ImageSet> {
        let images = self
            .samples
            .iter()
            .map(|s| load_preprocessed(&s.path, cfg))
            .collect::<Result<Vec<_>>>()?;
        ImageSet::new(
            images,
            self.samples.iter().map(|s| s.label).collect(),
            self.class_names.clone(),
        )
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn discover_classes(root: &Path) -> Result<Vec<String>> {
    let manifest = root.join(CLASS_MANIFEST);
    if manifest.is_file() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        return Ok(serde_json::from_str(&text)?);
    }
    let mut names: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    Ok(names)
}

/// Per-class loss weights `min(counts) / counts[c]`: the rarest class gets
/// weight 1 and every other class proportionally less.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::contract("class_weights needs at least one class"));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::contract(format!("class {c} has zero samples")));
    }
    let min = *counts.iter().min().expect("non-empty") as f64;
    Ok(counts.iter().map(|&n| min / n as f64).collect())
}

/// Preprocessed images held in memory with their labels.
#[derive(Clone, Debug)]
pub struct ImageSet {
    images: Vec<Tensor<f32>>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl ImageSet {
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::dim("image set", &[images.len()], &[labels.len()]));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::dim("image set", first.shape(), bad.shape()));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::contract(format!("label {l} out of range")));
        }
        Ok(ImageSet {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Stacks the images at `indices` into a `[B × C × H × W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let first = self.images.get(*indices.first().ok_or_else(|| Error::contract("empty batch"))?)
            .ok_or_else(|| Error::contract("batch index out of range"))?;
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(indices.len() * first.numel());
        for &i in indices {
            let img = self.images.get(i).ok_or_else(|| Error::contract("batch index out of range"))?;
            data.extend_from_slice(img.data());
        }
        Tensor::new(shape, data)
    }

    /// Subset with the given sample indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        ImageSet {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}
