//! Datasets: synthetic generators, stratified splitting, symmetric label
//! noise, pad-and-crop augmentation and the on-disk formats.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{component_rng, tag};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"AWDDATA1";

/// Inputs in `[0, 1]` with one class index per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        let ds = Self {
            inputs,
            labels,
            num_classes,
            name: name.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.shape().len() < 2 || self.inputs.shape()[0] != self.labels.len() {
            return Err(Error::Input(format!(
                "inputs {:?} do not match {} labels",
                self.inputs.shape(),
                self.labels.len()
            )));
        }
        if let Some((i, &y)) = self.labels.iter().enumerate().find(|(_, &y)| y >= self.num_classes) {
            return Err(Error::Input(format!(
                "label {y} of example {i} outside [0, {})",
                self.num_classes
            )));
        }
        if self.inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("inputs must be finite and within [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one example.
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn example_len(&self) -> usize {
        self.example_shape().iter().product()
    }

    /// Gathers the given examples into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * d..(i + 1) * d]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.example_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered batch is consistent"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (inputs, labels) = self.batch(indices);
        Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(self.inputs.clone(), labels, self.num_classes, self.name.clone())
    }

    /// Inputs reshaped to `N×D`, for vector models.
    pub fn flattened(&self) -> Dataset {
        let n = self.len();
        let d = self.example_len();
        Dataset {
            inputs: self.inputs.reshaped(vec![n, d]).expect("same element count"),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }
}

/// Record of a symmetric flip; enough to restore the clean labels.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub rate: f64,
    pub seed: u64,
    /// `(index, original label)` for every flipped example, ascending by index.
    pub flipped: Vec<(usize, usize)>,
}

impl NoiseSpec {
    pub fn restore(&self, noisy: &[usize]) -> Vec<usize> {
        let mut clean = noisy.to_vec();
        for &(i, original) in &self.flipped {
            clean[i] = original;
        }
        clean
    }

    pub fn is_flipped(&self, len: usize) -> Vec<bool> {
        let mut mask = vec![false; len];
        for &(i, _) in &self.flipped {
            mask[i] = true;
        }
        mask
    }
}

/// With probability `rate`, each label independently moves to a uniformly
/// chosen *different* class.
pub fn flip_labels_symmetric(
    labels: &[usize],
    num_classes: usize,
    rate: f64,
    seed: u64,
) -> Result<(Vec<usize>, NoiseSpec)> {
    if num_classes < 2 {
        return Err(Error::config("noise", "symmetric flipping needs at least 2 classes"));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config("noise.rate", format!("must be in [0, 1], got {rate}")));
    }
    let mut rng = component_rng(seed, tag::NOISE);
    let mut noisy = labels.to_vec();
    let mut flipped = Vec::new();
    for (i, y) in noisy.iter_mut().enumerate() {
        let u: f64 = rng.random();
        if u < rate {
            // uniform over the other C−1 classes
            let mut k = rng.random_range(0..num_classes - 1);
            if k >= *y {
                k += 1;
            }
            flipped.push((i, *y));
            *y = k;
        }
    }
    Ok((
        noisy,
        NoiseSpec {
            rate,
            seed,
            flipped,
        },
    ))
}

/// `classes` isotropic unit-variance Gaussian clusters whose means sit on a
/// regular simplex with pairwise distance `separation`, mapped into `[0, 1]`.
pub fn synth_clusters(classes: usize, dim: usize, per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim < classes {
        return Err(Error::config("dataset.dim", "need at least 2 classes and dim >= classes"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::config("dataset.separation", "must be >= 0"));
    }
    let mut rng = component_rng(seed, tag::DATA);
    let radius = separation / std::f64::consts::SQRT_2;
    let half_range = radius + 4.0;
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for d in 0..dim {
            let mean = if d == c { radius } else { 0.0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push((0.5 + (mean + z) / (2.0 * half_range)).clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes, "synth_clusters")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageOptions {
    pub channels: usize,
    /// Peak stripe amplitude around mid-gray, in `[0, 1]`.
    pub contrast: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Maximum random translation of the pattern, in pixels.
    pub max_shift: usize,
    /// Peak of a Gaussian blob whose position depends on the class; 0 disables it.
    pub blob: f64,
}

impl Default for ImageOptions {
    fn default() -> Self {
        Self {
            channels: 1,
            contrast: 0.5,
            noise: 0.2,
            max_shift: 1,
            blob: 0.0,
        }
    }
}

/// Class-conditional oriented stripe images. Class `c` uses orientation
/// `π c / C` and, for odd classes, a half-period phase shift; each example
/// has a random amplitude, a small random translation and Gaussian pixel noise.
/// With `blob > 0` a bright spot is added at a class-specific point on a
/// circle around the image center, shifted together with the stripes.
pub fn synth_images(
    classes: usize,
    height: usize,
    width: usize,
    per_class: usize,
    options: ImageOptions,
    seed: u64,
) -> Result<Dataset> {
    if height < 8 || width < 8 {
        return Err(Error::config("dataset.height", "images must be at least 8×8"));
    }
    if classes < 2 || options.channels == 0 {
        return Err(Error::config("dataset.classes", "need at least 2 classes and 1 channel"));
    }
    let mut rng = component_rng(seed, tag::DATA);
    let ch = options.channels;
    let n = classes * per_class;
    let plane = height * width;
    let mut data = Vec::with_capacity(n * ch * plane);
    let mut labels = Vec::with_capacity(n);
    let freq = 2.0 / height.min(width) as f64;
    let shift = options.max_shift as i64;
    let spot = |c: usize| {
        let a = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
        let r = height.min(width) as f64 / 4.0;
        let cy = (height as f64 - 1.0) / 2.0 + r * a.sin();
        let cx = (width as f64 - 1.0) / 2.0 + r * a.cos();
        (cy, cx)
    };
    let spread = 2.0 * (height.min(width) as f64 / 8.0).powi(2);
    for i in 0..n {
        let c = i % classes;
        let angle = std::f64::consts::PI * c as f64 / classes as f64;
        let phase = if c % 2 == 1 { std::f64::consts::PI } else { 0.0 };
        let amplitude: f64 = rng.random_range(0.5..1.0);
        let dy = rng.random_range(-shift..=shift) as f64;
        let dx = rng.random_range(-shift..=shift) as f64;
        for k in 0..ch {
            let channel_gain = 1.0 - 0.2 * k as f64 / ch as f64;
            for y in 0..height {
                for x in 0..width {
                    let (py, px) = (y as f64 + dy, x as f64 + dx);
                    let t = 2.0 * std::f64::consts::PI * freq * (px * angle.cos() + py * angle.sin()) + phase;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let mut v = 0.5 + 0.5 * options.contrast * amplitude * channel_gain * t.cos() + options.noise * z;
                    if options.blob > 0.0 {
                        let (cy, cx) = spot(c);
                        let d2 = (py - cy).powi(2) + (px - cx).powi(2);
                        v += options.blob * amplitude * (-d2 / spread).exp();
                    }
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(c);
    }
    Dataset::new(
        Tensor::new(vec![n, ch, height, width], data)?,
        labels,
        classes,
        "synth_images",
    )
}

/// Disjoint, class-stratified `(train, val)` index sets.
pub fn split_indices(labels: &[usize], num_classes: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config("dataset.val_fraction", format!("must be in (0, 1), got {val_fraction}")));
    }
    let mut rng = component_rng(seed, tag::SPLIT);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..num_classes {
        let mut members: Vec<usize> = labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Input(format!("class {c} has fewer than 2 examples; cannot stratify")));
        }
        members.shuffle(&mut rng);
        // every class keeps at least one example on each side
        let k = ((val_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        val.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn split_train_val(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(&dataset.labels, dataset.num_classes, val_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

/// Zero-pads each `N×C×H×W` image by `pad`, crops a random `H×W` window
/// and, when `flip` is set, mirrors horizontally with probability ½.
pub fn pad_and_crop(x: &Tensor, pad: usize, flip: bool, seed: u64) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("pad_and_crop needs N×C×H×W, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut rng = component_rng(seed, tag::AUGMENT);
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let oy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let ox = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let mirror = flip && rng.random_bool(0.5);
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for i in 0..h {
                let si = i as isize + oy;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let jj = if mirror { w - 1 - j } else { j };
                    let sj = jj as isize + ox;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    out[base + i * w + j] = x.data()[base + si as usize * w + sj as usize];
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Writes the `AWDDATA1` binary format (inputs stored as `f32`).
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + dataset.inputs.len() * 4 + dataset.len() * 4);
    buf.extend_from_slice(DATASET_MAGIC);
    let dims = dataset.example_shape();
    for v in [dataset.len(), dataset.num_classes, dims.len()].into_iter().chain(dims.iter().copied()) {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in dataset.inputs.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &y in &dataset.labels {
        buf.extend_from_slice(&(y as u32).to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!("{} is not an AWDDATA1 file", path.display())));
    }
    let n = read_u32(&mut r)? as usize;
    let classes = read_u32(&mut r)? as usize;
    let rank = read_u32(&mut r)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(&mut r)? as usize);
    }
    let d: usize = dims.iter().product();
    let mut raw = vec![0u8; n * d * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(read_u32(&mut r)? as usize);
    }
    let mut shape = vec![n];
    shape.extend(dims);
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(Tensor::new(shape, data)?, labels, classes, name)
}

/// Vector data from CSV: a header row, feature columns, integer label last.
pub fn read_csv_dataset(path: &Path) -> Result<Dataset> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (lineno, line) in r.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 || *width.get_or_insert(fields.len()) != fields.len() {
            return Err(Error::Format(format!("line {}: inconsistent column count", lineno + 1)));
        }
        for f in &fields[..fields.len() - 1] {
            data.push(
                f.parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?,
            );
        }
        labels.push(
            fields[fields.len() - 1]
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("line {}: label: {e}", lineno + 1)))?,
        );
    }
    let width = width.ok_or_else(|| Error::Format("CSV has no data rows".into()))?;
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let n = labels.len();
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(Tensor::new(vec![n, width - 1], data)?, labels, classes, name)
}
