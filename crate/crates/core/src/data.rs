//! Datasets, IDX parsing, synthetic generators and seeded batch order.

use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Holdout,
}

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
    norm: Option<NormStats>,
}

impl Dataset {
    /// `inputs` is `[count, ...sample_shape]`.
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if inputs.shape().len() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::shape("dataset", inputs.shape(), &[labels.len()]));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange { index, label, classes });
        }
        Ok(Dataset { inputs, labels, classes, split, norm: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Widens the class count (e.g. to the model's head size).
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if let Some((index, &label)) = self.labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange { index, label, classes });
        }
        self.classes = classes;
        Ok(self)
    }

    /// Reinterprets every sample with `shape` (same element count).
    pub fn reshape_samples(mut self, shape: &[usize]) -> Result<Self> {
        let mut full = vec![self.len()];
        full.extend(shape);
        self.inputs = self.inputs.reshaped(&full)?;
        Ok(self)
    }

    fn sample_width(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Samples `range` in file order.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::invalid(format!("slice {range:?} of dataset with {} samples", self.len())));
        }
        let w = self.sample_width();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = range.len();
        let inputs = Tensor::new(shape, self.inputs.data()[range.start * w..range.end * w].to_vec())?;
        Ok(Dataset {
            inputs,
            labels: self.labels[range].to_vec(),
            classes: self.classes,
            split: self.split,
            norm: self.norm.clone(),
        })
    }

    /// First `limit` samples.
    pub fn take(&self, limit: usize) -> Result<Self> {
        self.slice(0..limit.min(self.len()))
    }

    /// Splits off the last `fraction` of samples (file order) as a holdout set.
    pub fn split_holdout(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid(format!("holdout fraction {fraction} is outside (0, 1)")));
        }
        let held = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len().saturating_sub(1));
        if held == 0 || held >= self.len() {
            return Err(Error::invalid("dataset too small to carve a holdout split"));
        }
        let cut = self.len() - held;
        let train = self.slice(0..cut)?;
        let holdout = self.slice(cut..self.len())?.with_split(Split::Holdout);
        Ok((train, holdout))
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let w = self.sample_width();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * w..(i + 1) * w]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    /// Mean and standard deviation per channel (axis 1).
    pub fn compute_norm_stats(&self) -> NormStats {
        let shape = self.inputs.shape();
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        for (i, &v) in self.inputs.data().iter().enumerate() {
            let c = (i / inner) % channels;
            sum[c] += v as f64;
            sq[c] += (v as f64) * (v as f64);
        }
        let n = (self.len() * inner) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt() as f32
                } else {
                    1.0
                }
            })
            .collect();
        NormStats { mean: mean.into_iter().map(|m| m as f32).collect(), std }
    }

    /// Applies `(x - mean) / std` per channel. Refuses to run twice.
    pub fn standardize(&mut self, stats: &NormStats) -> Result<()> {
        if self.norm.is_some() {
            return Err(Error::invalid("dataset is already standardized"));
        }
        let shape = self.inputs.shape().to_vec();
        let channels = shape[1];
        if stats.mean.len() != channels || stats.std.len() != channels {
            return Err(Error::shape("standardize", &[channels], &[stats.mean.len()]));
        }
        let inner: usize = shape[2..].iter().product();
        for (i, v) in self.inputs.data_mut().iter_mut().enumerate() {
            let c = (i / inner) % channels;
            *v = (*v - stats.mean[c]) / stats.std[c];
        }
        self.norm = Some(stats.clone());
        Ok(())
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::UnexpectedEof)
}

fn parse_idx(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: magic, found });
    }
    let shape = (0..dims)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * dims;
    let n: usize = shape.iter().product();
    let payload = bytes.get(header..header + n).ok_or(Error::UnexpectedEof)?;
    if bytes.len() != header + n {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after IDX payload",
            path.display(),
            bytes.len() - header - n
        )));
    }
    Ok((shape, payload.to_vec()))
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`; samples have
/// shape `[1, rows, cols]`. Standardization is left to the caller so that
/// statistics can come from the training split.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let img_bytes = std::fs::read(images).map_err(|e| Error::from(e).context(images.display().to_string()))?;
    let lbl_bytes = std::fs::read(labels).map_err(|e| Error::from(e).context(labels.display().to_string()))?;
    let (ishape, pixels) = parse_idx(&img_bytes, images, IDX_IMAGES_MAGIC, 3)?;
    let (lshape, raw_labels) = parse_idx(&lbl_bytes, labels, IDX_LABELS_MAGIC, 1)?;
    if ishape[0] != lshape[0] {
        return Err(Error::Format(format!(
            "image file has {} samples but label file has {}",
            ishape[0], lshape[0]
        )));
    }
    let count = limit.map_or(ishape[0], |l| l.min(ishape[0]));
    if count == 0 {
        return Err(Error::invalid("IDX files contain no samples"));
    }
    let (rows, cols) = (ishape[1], ishape[2]);
    let data = pixels[..count * rows * cols].iter().map(|&p| p as f32 / 255.0).collect();
    let inputs = Tensor::new(vec![count, 1, rows, cols], data)?;
    let labels: Vec<usize> = raw_labels[..count].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(inputs, labels, classes, Split::Train)
}

/// IDX image file bytes for `count` images of `rows x cols`.
pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), count * rows * cols);
    let mut out = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [count, rows, cols] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Gaussian clusters centred on a circle of radius 3.
    Blobs,
    /// Interleaved Archimedean arms with radial noise.
    Spirals,
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Spirals => "spirals",
        })
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "blobs" => Ok(SyntheticKind::Blobs),
            "spirals" => Ok(SyntheticKind::Spirals),
            other => Err(Error::Config(format!("unknown synthetic dataset `{other}`"))),
        }
    }
}

/// Two-dimensional synthetic classification data; sample `i` has class `i % classes`.
pub fn make_synthetic(kind: SyntheticKind, n: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::invalid(format!("need n >= classes >= 2, got n={n}, classes={classes}")));
    }
    let mut rng = rng::stream(seed, 0x5eed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let base = TAU * k as f64 / classes as f64;
        let (x, y) = match kind {
            SyntheticKind::Blobs => {
                let dx: f64 = StandardNormal.sample(&mut rng);
                let dy: f64 = StandardNormal.sample(&mut rng);
                (3.0 * base.cos() + noise * dx, 3.0 * base.sin() + noise * dy)
            }
            SyntheticKind::Spirals => {
                let t: f64 = rng.random_range(0.0..1.0);
                let dr: f64 = StandardNormal.sample(&mut rng);
                let theta = base + TAU * t;
                let r = 0.3 + 2.7 * t + noise * dr;
                (r * theta.cos(), r * theta.sin())
            }
        };
        data.push(x as f32);
        data.push(y as f32);
        labels.push(k);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, classes, Split::Train)
}

/// Deterministic mini-batch order for one particle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchStream {
    pub len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, epochs: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch_size == 0 {
            return Err(Error::invalid("batch stream needs a non-empty dataset and batch size"));
        }
        Ok(BatchStream { len, batch_size, epochs, seed })
    }

    /// Batches per epoch, counting the final partial batch.
    pub fn steps_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.epochs
    }

    /// Fisher-Yates permutation keyed by `(seed, epoch)`.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.len).collect();
        let mut rng = rng::stream(self.seed, epoch as u64);
        for i in (1..self.len).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        perm
    }

    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        self.order(epoch).chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn idx_roundtrip_and_limit() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..5 * 4).map(|i| (i * 12) as u8).collect();
        let img = write(dir.path(), "img", &encode_idx_images(5, 2, 2, &pixels));
        let lbl = write(dir.path(), "lbl", &encode_idx_labels(&[0, 1, 2, 1, 0]));
        assert_eq!(&std::fs::read(&img).unwrap()[..4], &[0, 0, 8, 3]);

        let all = load_idx(&img, &lbl, None).unwrap();
        assert_eq!(all.len(), 5);
        assert_eq!(all.sample_shape(), &[1, 2, 2]);
        assert_eq!(all.classes(), 3);
        assert_eq!(all.inputs().data()[1], 12.0 / 255.0);

        let two = load_idx(&img, &lbl, Some(2)).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two.labels(), &[0, 1]);
        assert_eq!(two.inputs().data(), &all.inputs().data()[..8]);
    }

    #[test]
    fn idx_rejects_label_magic_on_images() {
        let dir = tempfile::tempdir().unwrap();
        let lbl = write(dir.path(), "lbl", &encode_idx_labels(&[0, 1]));
        match load_idx(&lbl, &lbl, None) {
            Err(Error::BadMagic { found, expected, .. }) => {
                assert_eq!(found, IDX_LABELS_MAGIC);
                assert_eq!(expected, IDX_IMAGES_MAGIC);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &encode_idx_images(3, 1, 1, &[1, 2, 3]));
        let lbl = write(dir.path(), "lbl", &encode_idx_labels(&[0, 1]));
        assert!(load_idx(&img, &lbl, None).unwrap_err().to_string().contains("3 samples"));

        let mut bytes = encode_idx_images(3, 1, 1, &[1, 2, 3]);
        bytes.pop();
        let short = write(dir.path(), "short", &bytes);
        let lbl3 = write(dir.path(), "lbl3", &encode_idx_labels(&[0, 1, 1]));
        assert!(matches!(load_idx(&short, &lbl3, None), Err(Error::UnexpectedEof)));
    }

    #[test]
    fn synthetic_is_deterministic() {
        for kind in [SyntheticKind::Blobs, SyntheticKind::Spirals] {
            let a = make_synthetic(kind, 50, 3, 0.2, 4).unwrap();
            let b = make_synthetic(kind, 50, 3, 0.2, 4).unwrap();
            assert_eq!(a.inputs(), b.inputs());
            assert_eq!(a.labels(), b.labels());
        }
    }

    #[test]
    fn synthetic_degenerate_two_points() {
        let d = make_synthetic(SyntheticKind::Blobs, 2, 2, 0.0, 1).unwrap();
        assert_eq!(d.labels(), &[0, 1]);
        // noise-free blobs sit exactly on the circle
        assert!((d.inputs().data()[0] - 3.0).abs() < 1e-6);
        assert!(make_synthetic(SyntheticKind::Blobs, 1, 2, 0.0, 1).is_err());
    }

    #[test]
    fn standardize_once() {
        let mut d = make_synthetic(SyntheticKind::Blobs, 100, 4, 0.5, 2).unwrap();
        let stats = d.compute_norm_stats();
        d.standardize(&stats).unwrap();
        let again = d.compute_norm_stats();
        for c in 0..2 {
            assert!(again.mean[c].abs() < 1e-5);
            assert!((again.std[c] - 1.0).abs() < 1e-4);
        }
        assert!(d.standardize(&stats).is_err());
    }

    #[test]
    fn holdout_is_tail_in_file_order() {
        let d = make_synthetic(SyntheticKind::Blobs, 100, 4, 0.5, 2).unwrap();
        let (train, hold) = d.split_holdout(0.1).unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(hold.len(), 10);
        assert_eq!(hold.split(), Split::Holdout);
        assert_eq!(hold.inputs().data(), &d.inputs().data()[180..]);
    }

    #[test]
    fn batch_order_properties() {
        let s1 = BatchStream::new(37, 8, 10, 1).unwrap();
        let s1b = BatchStream::new(37, 8, 10, 1).unwrap();
        let s2 = BatchStream::new(37, 8, 10, 2).unwrap();
        assert!((0..10).all(|e| s1.order(e) == s1b.order(e)));
        assert!((0..10).any(|e| s1.order(e) != s2.order(e)));
        let batches = s1.batches(0);
        assert_eq!(batches.len(), 5);
        assert_eq!(batches[4].len(), 5, "last partial batch kept");
        assert_eq!(s1.total_steps(), 50);
        let one = BatchStream::new(1, 4, 3, 9).unwrap();
        assert!((0..3).all(|e| one.order(e) == vec![0]));
    }

    proptest! {
        #[test]
        fn epoch_covers_every_index(len in 1usize..300, bs in 1usize..64, seed: u64, epoch in 0usize..20) {
            let s = BatchStream::new(len, bs, 20, seed).unwrap();
            let mut seen: Vec<usize> = s.batches(epoch).concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..len).collect::<Vec<_>>());
        }
    }
}
