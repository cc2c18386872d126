//! Benchmark data: MNIST in IDX format and the 8x8 DIGITS set as CSV.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const DIGITS_FEATURES: usize = 64;
const DIGITS_MAX_VALUE: u32 = 16;
const N_DIGIT_CLASSES: usize = 10;

/// Bundled DIGITS train/test sizes.
pub const DIGITS_TRAIN_SIZE: usize = 1439;
pub const DIGITS_TEST_SIZE: usize = 358;

/// Borrowed view of labeled rows: `features` is row-major with
/// `labels.len()` rows.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f64], labels: &'a [usize]) -> Self {
        Self { features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Immutable labeled dataset with features scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    n_features: usize,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, n_features: usize, n_classes: usize) -> Result<Self> {
        if n_features == 0 || n_classes == 0 {
            return Err(Error::domain("dataset needs at least one feature and one class"));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::Shape(format!(
                "{} feature values for {} rows of width {n_features}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(v) = features.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("feature value {v} outside [0, 1]")));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::domain(format!("label {y} outside [0, {n_classes})")));
        }
        Ok(Self {
            features,
            labels,
            n_features,
            n_classes,
        })
    }

    pub fn n_examples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn as_batch(&self) -> Batch<'_> {
        Batch::new(&self.features, &self.labels)
    }
}

/// A fixed-size minibatch of distinct rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub indices: Vec<usize>,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Minibatch {
    pub fn as_batch(&self) -> Batch<'_> {
        Batch::new(&self.features, &self.labels)
    }
}

/// Draws `batch_size` distinct indices uniformly without replacement.
pub fn sample_minibatch<R: Rng + ?Sized>(dataset: &Dataset, batch_size: usize, rng: &mut R) -> Result<Minibatch> {
    let n = dataset.n_examples();
    if batch_size == 0 || batch_size > n {
        return Err(Error::domain(format!(
            "batch size must lie in [1, {n}], got {batch_size}"
        )));
    }
    let indices = index::sample(rng, n, batch_size).into_vec();
    let mut features = Vec::with_capacity(batch_size * dataset.n_features);
    for &i in &indices {
        features.extend_from_slice(dataset.row(i));
    }
    let labels = indices.iter().map(|&i| dataset.labels[i]).collect();
    Ok(Minibatch {
        indices,
        features,
        labels,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("truncated header: missing {field}")))
}

fn check_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path, "magic")?;
    if magic != want {
        return Err(Error::format(
            path,
            format!("bad magic 0x{magic:08x}, expected 0x{want:08x}"),
        ));
    }
    Ok(())
}

/// Parses an IDX image file and its label file. Pixels are scaled by 1/255
/// and images flattened row-major.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read(ip)?;
    let labels = read(lp)?;

    check_magic(&images, IDX_IMAGE_MAGIC, ip)?;
    let n_images = be_u32(&images, 4, ip, "image count")? as usize;
    let rows = be_u32(&images, 8, ip, "row count")? as usize;
    let cols = be_u32(&images, 12, ip, "column count")? as usize;
    let d = rows * cols;
    let payload = &images[16..];
    if payload.len() != n_images * d {
        return Err(Error::format(
            ip,
            format!(
                "payload has {} bytes, header declares {n_images} images of {rows}x{cols}",
                payload.len()
            ),
        ));
    }

    check_magic(&labels, IDX_LABEL_MAGIC, lp)?;
    let n_labels = be_u32(&labels, 4, lp, "label count")? as usize;
    let label_bytes = &labels[8..];
    if label_bytes.len() != n_labels {
        return Err(Error::format(
            lp,
            format!("payload has {} bytes, header declares {n_labels} labels", label_bytes.len()),
        ));
    }
    if n_labels != n_images {
        return Err(Error::format(
            lp,
            format!("label count {n_labels} does not match image count {n_images}"),
        ));
    }
    if let Some(pos) = label_bytes.iter().position(|&b| b as usize >= N_DIGIT_CLASSES) {
        return Err(Error::format(lp, format!("label {} at index {pos} is not a digit", label_bytes[pos])));
    }

    let features = payload.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = label_bytes.iter().map(|&b| b as usize).collect();
    Dataset::new(features, labels, d, N_DIGIT_CLASSES)
}

/// Parses one DIGITS CSV file: 64 integer features in `[0, 16]` followed by
/// a label in `[0, 9]` per line, no header. Features are scaled by 1/16.
pub fn load_digits_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != DIGITS_FEATURES + 1 {
            return Err(Error::format(
                path,
                format!("row {row}: expected {} columns, found {}", DIGITS_FEATURES + 1, fields.len()),
            ));
        }
        for (col, field) in fields[..DIGITS_FEATURES].iter().enumerate() {
            let v: u32 = field
                .parse()
                .map_err(|_| Error::format(path, format!("row {row}, column {}: {field:?} is not an integer", col + 1)))?;
            if v > DIGITS_MAX_VALUE {
                return Err(Error::format(
                    path,
                    format!("row {row}, column {}: feature {v} outside [0, {DIGITS_MAX_VALUE}]", col + 1),
                ));
            }
            features.push(f64::from(v) / f64::from(DIGITS_MAX_VALUE));
        }
        let label_field = fields[DIGITS_FEATURES];
        let label: usize = label_field
            .parse()
            .map_err(|_| Error::format(path, format!("row {row}: label {label_field:?} is not an integer")))?;
        if label >= N_DIGIT_CLASSES {
            return Err(Error::format(path, format!("row {row}: label {label} outside [0, 9]")));
        }
        labels.push(label);
    }
    Dataset::new(features, labels, DIGITS_FEATURES, N_DIGIT_CLASSES)
}

pub fn load_digits_csv(train_path: impl AsRef<Path>, test_path: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    Ok((load_digits_file(train_path)?, load_digits_file(test_path)?))
}
