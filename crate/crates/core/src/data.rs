//! Datasets: IDX archives (MNIST / Fashion-MNIST), CIFAR-10 binary batches,
//! and seeded Gaussian blobs for desk-scale experiments. Pixel bytes are
//! scaled by 1/255 and nothing else.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const CIFAR_RECORD_LEN: usize = 3073;
const CIFAR_CLASSES: usize = 10;
const IDX_CLASSES: usize = 10;
/// Half-width of the box blob centers are drawn from.
const BLOB_BOX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Images (count x example shape, values in [0, 1]) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
    source: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split, source: impl Into<String>) -> Result<Self> {
        if images.shape().len() < 2 || images.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} images vs {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("image values must lie in [0, 1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
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

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Copies the selected examples into one contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let row = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.example_shape());
        (Tensor::from_parts_unchecked(shape, data), labels)
    }

    pub fn subset(&self, indices: &[usize], split: Split, source: impl Into<String>) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset("empty subset".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("index {i} outside dataset of {}", self.len())));
        }
        let (images, labels) = self.gather(indices);
        Ok(Dataset {
            images,
            labels,
            classes: self.classes,
            split,
            source: source.into(),
        })
    }

    /// First `n` examples (or all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split, self.source.clone())
    }

    /// Splits off a seeded validation fraction; returns (train, validation).
    pub fn holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0 < fraction && fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("holdout fraction {fraction} outside (0, 1)")));
        }
        let n_val = ((self.len() as f64 * fraction).round() as usize).max(1);
        if n_val >= self.len() {
            return Err(Error::EmptyDataset(format!(
                "{} examples are too few to hold out a validation set",
                self.len()
            )));
        }
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.shuffle(&mut rng::stream_rng(seed, stream::HOLDOUT, 0));
        let mut val: Vec<usize> = perm[..n_val].to_vec();
        let mut train: Vec<usize> = perm[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Ok((
            self.subset(&train, Split::Train, format!("{}[train]", self.source))?,
            self.subset(&val, Split::Validation, format!("{}[validation]", self.source))?,
        ))
    }

    pub(crate) fn from_parts(images: Tensor, labels: Vec<usize>, classes: usize, split: Split, source: String) -> Self {
        Dataset {
            images,
            labels,
            classes,
            split,
            source,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: (at + 4) as u64,
            found: bytes.len() as u64,
        })
}

fn check_payload(bytes: &[u8], header: usize, payload: usize, path: &Path) -> Result<()> {
    let expected = header + payload;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes after payload", bytes.len() - expected),
        });
    }
    Ok(())
}

fn split_from_name(path: &Path, test_marker: &str) -> Split {
    let name = path.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
    if name.contains(test_marker) {
        Split::Test
    } else {
        Split::Train
    }
}

/// Parses a big-endian IDX image file (magic 2051) and label file (magic 2049).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read(ip)?;
    let magic = be_u32(&img, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: ip.to_path_buf(),
            detail: format!("image magic {magic}, expected {IDX_IMAGES_MAGIC}"),
        });
    }
    let count = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    check_payload(&img, 16, count * rows * cols, ip)?;

    let lab = read(lp)?;
    let magic = be_u32(&lab, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: lp.to_path_buf(),
            detail: format!("label magic {magic}, expected {IDX_LABELS_MAGIC}"),
        });
    }
    let n_labels = be_u32(&lab, 4, lp)? as usize;
    check_payload(&lab, 8, n_labels, lp)?;
    if n_labels != count {
        return Err(Error::Format {
            path: lp.to_path_buf(),
            detail: format!("{n_labels} labels for {count} images"),
        });
    }
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::EmptyDataset(ip.display().to_string()));
    }
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    if let Some(pos) = labels.iter().position(|&l| l >= IDX_CLASSES) {
        return Err(Error::Format {
            path: lp.to_path_buf(),
            detail: format!("label {} at record {pos} outside 0..{IDX_CLASSES}", labels[pos]),
        });
    }
    let data = img[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let images = Tensor::from_parts_unchecked(vec![count, 1, rows, cols], data);
    Ok(Dataset::from_parts(
        images,
        labels,
        IDX_CLASSES,
        split_from_name(ip, "t10k"),
        ip.display().to_string(),
    ))
}

/// Parses CIFAR-10 binary batches: 3073-byte records, one label byte then
/// 32x32 R, G and B planes.
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<Dataset> {
    if batch_paths.is_empty() {
        return Err(Error::EmptyDataset("no CIFAR-10 batch files given".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut all_test = true;
    for p in batch_paths {
        let p = p.as_ref();
        let bytes = read(p)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::Format {
                path: p.to_path_buf(),
                detail: format!("size {} is not a positive multiple of {CIFAR_RECORD_LEN}", bytes.len()),
            });
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::Format {
                    path: p.to_path_buf(),
                    detail: format!("label {label} at record {r} outside 0..{CIFAR_CLASSES}"),
                });
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
        all_test &= split_from_name(p, "test") == Split::Test;
    }
    let n = labels.len();
    let source = batch_paths
        .iter()
        .map(|p| p.as_ref().display().to_string())
        .collect::<Vec<_>>()
        .join(",");
    Ok(Dataset::from_parts(
        Tensor::from_parts_unchecked(vec![n, 3, 32, 32], data),
        labels,
        CIFAR_CLASSES,
        if all_test { Split::Test } else { Split::Train },
        source,
    ))
}

/// Gaussian clusters (unit variance) around seeded centers drawn from
/// `[-10, 10]^dims` with pairwise distance at least `separation`. Each class
/// contributes `per_class * 4 / 5` training and the rest test examples;
/// coordinates are then mapped affinely (one scale for all axes) into [0, 1].
pub fn synth_blobs(classes: usize, per_class: usize, dims: usize, separation: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::InvalidArgument("synthetic blobs need at least 2 classes".into()));
    }
    if !(separation > 0.0) || dims == 0 {
        return Err(Error::InvalidArgument("separation and dims must be positive".into()));
    }
    let n_train = per_class * 4 / 5;
    if n_train == 0 || n_train == per_class {
        return Err(Error::InvalidArgument(format!(
            "per_class {per_class} is too small for an 80/20 split"
        )));
    }
    let centers = place_centers(classes, dims, separation, seed)?;

    let mut rng = rng::stream_rng(seed, stream::BLOBS, 1);
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(classes * per_class);
    for center in &centers {
        for _ in 0..per_class {
            points.push(
                center
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c + z
                    })
                    .collect(),
            );
        }
    }
    let lo = points.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = points.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;

    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..classes {
        train_idx.extend(c * per_class..c * per_class + n_train);
        test_idx.extend(c * per_class + n_train..(c + 1) * per_class);
    }
    train_idx.shuffle(&mut rng::stream_rng(seed, stream::BLOBS, 2));
    test_idx.shuffle(&mut rng::stream_rng(seed, stream::BLOBS, 3));

    let build = |idx: &[usize], split: Split| {
        let mut data = Vec::with_capacity(idx.len() * dims);
        for &i in idx {
            data.extend(points[i].iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)));
        }
        let labels = idx.iter().map(|&i| i / per_class).collect();
        Dataset::from_parts(
            Tensor::from_parts_unchecked(vec![idx.len(), dims], data),
            labels,
            classes,
            split,
            format!("blobs(classes={classes},per_class={per_class},dims={dims},separation={separation},seed={seed})"),
        )
    };
    Ok((build(&train_idx, Split::Train), build(&test_idx, Split::Test)))
}

fn place_centers(classes: usize, dims: usize, separation: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    const ATTEMPTS_PER_CENTER: usize = 2_000;
    const RESTARTS: u64 = 20;
    let uniform = Uniform::new_inclusive(-BLOB_BOX, BLOB_BOX).expect("valid range");
    for restart in 0..RESTARTS {
        let mut rng = rng::stream_rng(seed, stream::BLOBS, 100 + restart);
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
        'place: for _ in 0..classes {
            for _ in 0..ATTEMPTS_PER_CENTER {
                let cand: Vec<f64> = (0..dims).map(|_| uniform.sample(&mut rng)).collect();
                let far = centers.iter().all(|c| {
                    c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= separation
                });
                if far {
                    centers.push(cand);
                    continue 'place;
                }
            }
            break;
        }
        if centers.len() == classes {
            return Ok(centers);
        }
    }
    Err(Error::InfeasibleSeparation {
        classes,
        dims,
        separation,
    })
}

/// Resolves a possibly relative path against a data directory.
pub fn resolve(data_dir: Option<&Path>, path: &Path) -> PathBuf {
    match data_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    fn idx_images(count: u32, rows: u32, cols: u32, payload: usize) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..payload).map(|i| (i % 256) as u8));
        b
    }

    fn idx_labels(magic: u32, labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&magic.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ip = write(dir.path(), "train-images", &idx_images(3, 2, 2, 12));
        assert_eq!(&fs::read(&ip).unwrap()[..4], &[0, 0, 8, 3]);
        let lp = write(dir.path(), "train-labels", &idx_labels(IDX_LABELS_MAGIC, &[0, 9, 4]));
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.example_shape(), &[1, 2, 2]);
        assert_eq!(ds.labels(), &[0, 9, 4]);
        assert_eq!(ds.images().data()[5], 5.0 / 255.0);
        assert!(ds.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn idx_wrong_label_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = write(dir.path(), "i", &idx_images(1, 1, 1, 1));
        let lp = write(dir.path(), "l", &idx_labels(2050, &[1]));
        match load_idx(&ip, &lp) {
            Err(Error::Format { detail, .. }) => assert!(detail.contains("2050")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn idx_short_payload_is_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let ip = write(dir.path(), "i", &idx_images(60000, 28, 28, 1000));
        let lp = write(dir.path(), "l", &idx_labels(IDX_LABELS_MAGIC, &[1]));
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Truncated { expected, .. }) if expected == 16 + 60000 * 784));
    }

    fn cifar_records(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for &l in labels {
            b.push(l);
            b.extend((0..3072).map(|i| (i % 251) as u8));
        }
        b
    }

    #[test]
    fn cifar_counts_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "data_batch_1.bin", &cifar_records(&[3, 0, 9]));
        let ds = load_cifar10(&[&p]).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.example_shape(), &[3, 32, 32]);
        assert_eq!(ds.split(), Split::Train);
        // green plane starts at byte 1024 of the pixel block
        assert_eq!(ds.images().row(0)[1024], f64::from((1024 % 251) as u8) / 255.0);
    }

    #[test]
    fn cifar_rejects_bad_label_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "b.bin", &cifar_records(&[11]));
        assert!(matches!(load_cifar10(&[&p]), Err(Error::Format { .. })));
        let mut bytes = cifar_records(&[1]);
        bytes.push(0);
        let p = write(dir.path(), "c.bin", &bytes);
        assert!(matches!(load_cifar10(&[&p]), Err(Error::Format { .. })));
    }

    #[test]
    fn blobs_split_and_determinism() {
        let (tr, te) = synth_blobs(2, 50, 3, 5.0, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));
        for c in 0..2 {
            assert_eq!(tr.labels().iter().filter(|&&l| l == c).count(), 40);
            assert_eq!(te.labels().iter().filter(|&&l| l == c).count(), 10);
        }
        let (tr2, te2) = synth_blobs(2, 50, 3, 5.0, 4).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
        assert!(tr.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blobs_infeasible_separation() {
        assert!(matches!(
            synth_blobs(10, 10, 1, 10.0, 0),
            Err(Error::InfeasibleSeparation { .. })
        ));
    }

    #[test]
    fn holdout_is_seeded_partition() {
        let (tr, _) = synth_blobs(3, 100, 2, 3.0, 1).unwrap();
        let (a, v) = tr.holdout(0.1, 5).unwrap();
        assert_eq!(a.len() + v.len(), tr.len());
        assert_eq!(v.len(), 24);
        let (a2, v2) = tr.holdout(0.1, 5).unwrap();
        assert_eq!((a, v), (a2, v2));
    }
}
