//! IDX ingestion, synthetic blobs and mini-batch iteration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::nn::DatasetSpec;
use crate::tensor::Tensor;

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "RNLAB_DATA_DIR";

/// Standard deviation of every synthetic blob.
pub const SYNTH_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "test" => Ok(Split::Val),
            other => Err(Error::Unknown {
                kind: "split",
                value: other.to_string(),
            }),
        }
    }
}

/// Element type of an IDX file. Only unsigned bytes are supported.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl IdxArray {
    /// Pixel bytes scaled by 1/255.
    pub fn to_unit(&self) -> Vec<f64> {
        self.bytes.iter().map(|&b| b as f64 / 255.0).collect()
    }
}

/// Parses an unsigned-byte IDX file: a big-endian header `0x0000 08 <rank>`,
/// `rank` big-endian u32 dimensions, then the payload.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Idx(format!(
            "header truncated: expected at least 4 bytes, got {}",
            bytes.len()
        )));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(Error::Idx(format!(
            "bad magic 0x{:02x}{:02x}{:02x}{:02x}: expected 0x00000801 or 0x00000803",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let rank = bytes[3] as usize;
    if rank != 1 && rank != 3 {
        return Err(Error::Idx(format!(
            "bad magic 0x000008{rank:02x}: expected 0x00000801 or 0x00000803"
        )));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Idx(format!(
            "header truncated: expected {header} bytes, got {}",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Idx(format!(
            "payload length mismatch: expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    Ok(IdxArray {
        dims,
        bytes: bytes[header..].to_vec(),
    })
}

/// Labelled images with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let name = name.into();
        if images.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "dataset",
                reason: format!("images must be [N, C, H, W], got {:?}", images.shape()),
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter(format!("{name}: pixel values outside [0, 1]")));
        }
        Ok(Dataset {
            name,
            split,
            images,
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

    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            name: self.name.clone(),
            input_shape: self.images.shape()[1..].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name.clone(),
            split: self.split,
            images: self.images.slice_rows(0, n).expect("in range"),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        let labels = rows
            .iter()
            .map(|&r| {
                self.labels.get(r).copied().ok_or_else(|| Error::InvalidShape {
                    op: "select",
                    reason: format!("row {r} out of range for {} samples", self.len()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            name: self.name.clone(),
            split: self.split,
            images: self.images.select_rows(rows)?,
            labels,
            num_classes: self.num_classes,
        })
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Loads an IDX image/label pair into a dataset.
pub fn dataset_from_idx(name: &str, split: Split, images: &[u8], labels: &[u8], num_classes: usize) -> Result<Dataset> {
    let img = parse_idx(images)?;
    let lab = parse_idx(labels)?;
    if img.dims.len() != 3 {
        return Err(Error::Idx(format!("image file has rank {}, expected 3", img.dims.len())));
    }
    if lab.dims.len() != 1 {
        return Err(Error::Idx(format!("label file has rank {}, expected 1", lab.dims.len())));
    }
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != n {
        return Err(Error::Idx(format!("{n} images but {} labels", lab.dims[0])));
    }
    let images = Tensor::new(vec![n, 1, h, w], img.to_unit())?;
    let labels = lab.bytes.iter().map(|&b| b as usize).collect();
    Dataset::new(name, split, images, labels, num_classes)
}

fn idx_file_names(split: Split) -> (&'static str, &'static str) {
    match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Val => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
}

/// Directory holding the IDX files of `dataset`: `$RNLAB_DATA_DIR/<dataset>`
/// if that exists, else `$RNLAB_DATA_DIR` itself, else `data/<dataset>`.
pub fn resolve_data_dir(dataset: &str) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) => {
            let root = PathBuf::from(root);
            let nested = root.join(dataset);
            if nested.is_dir() {
                nested
            } else {
                root
            }
        }
        None => Path::new("data").join(dataset),
    }
}

/// Loads an MNIST-format split (also used for Fashion-MNIST) from `dir`.
pub fn load_idx_split(dir: &Path, name: &str, split: Split) -> Result<Dataset> {
    let (img_name, lab_name) = idx_file_names(split);
    let read = |f: &str| {
        let path = dir.join(f);
        std::fs::read(&path).map_err(|e| Error::io(path, e))
    };
    dataset_from_idx(name, split, &read(img_name)?, &read(lab_name)?, 10)
}

/// Gaussian blobs: `per_class` samples for each of `k` classes, each class
/// centred on its own mean drawn uniformly from `[0.25, 0.75]^D`, spread
/// `SYNTH_SIGMA`, clamped to `[0, 1]`. Samples are interleaved by class.
pub fn synth_blobs(k: usize, per_class: usize, dims: [usize; 3], seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::InvalidParameter("synth_blobs needs at least two classes".into()));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidParameter("synth_blobs dimensions must be positive".into()));
    }
    let d: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = Uniform::new(0.25, 0.75).expect("valid range");
    let means: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| centre.sample(&mut rng)).collect()).collect();
    let noise = Normal::new(0.0, SYNTH_SIGMA).expect("valid sigma");
    let n = k * per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        labels.push(class);
        data.extend(means[class].iter().map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)));
    }
    let images = Tensor::new(vec![n, dims[0], dims[1], dims[2]], data)?;
    Dataset::new("synth", Split::Train, images, labels, k)
}

/// Iterator over `(images, labels)` mini-batches. The final batch may be
/// smaller than `batch_size`.
#[derive(Debug)]
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    /// Row order used by this iteration.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let rows = &self.order[self.pos..end];
        self.pos = end;
        let contiguous = rows.windows(2).all(|w| w[1] == w[0] + 1);
        let x = if contiguous {
            self.data.images.slice_rows(rows[0], rows[0] + rows.len())
        } else {
            self.data.images.select_rows(rows)
        }
        .expect("rows in range");
        let y = rows.iter().map(|&r| self.data.labels[r]).collect();
        Some((x, y))
    }
}

/// Splits `data` into mini-batches, optionally in a seeded random order.
pub fn batches(data: &Dataset, batch_size: usize, shuffle: bool, seed: u64) -> Result<Batches<'_>> {
    if batch_size < 1 {
        return Err(Error::InvalidParameter("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches {
        data,
        order,
        batch_size,
        pos: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(magic_rank: u8, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, magic_rank];
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn labels_parse() {
        let a = parse_idx(&idx(1, &[3], &[7, 2, 1])).unwrap();
        assert_eq!(a.dims, vec![3]);
        assert_eq!(a.bytes, vec![7, 2, 1]);
    }

    #[test]
    fn byte_255_is_one() {
        let a = parse_idx(&idx(3, &[1, 1, 2], &[255, 0])).unwrap();
        assert_eq!(a.to_unit(), vec![1.0, 0.0]);
    }

    #[test]
    fn truncated_file_names_lengths() {
        let err = parse_idx(&idx(1, &[3], &[7, 2])).unwrap_err().to_string();
        assert!(err.contains("expected 11") && err.contains("got 10"), "{err}");
    }

    #[test]
    fn bad_magic() {
        let mut b = idx(1, &[1], &[0]);
        b[2] = 0x0d;
        assert!(matches!(parse_idx(&b), Err(Error::Idx(_))));
        assert!(matches!(parse_idx(&idx(2, &[1, 1], &[0])), Err(Error::Idx(_))));
    }

    #[test]
    fn dataset_from_idx_pairs() {
        let imgs = idx(3, &[2, 2, 2], &[0, 51, 102, 255, 255, 0, 0, 0]);
        let labs = idx(1, &[2], &[3, 9]);
        let d = dataset_from_idx("mnist", Split::Train, &imgs, &labs, 10).unwrap();
        assert_eq!(d.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(d.images.data()[1], 0.2);
        assert_eq!(d.labels, vec![3, 9]);
        let short = idx(1, &[1], &[3]);
        assert!(dataset_from_idx("mnist", Split::Train, &imgs, &short, 10).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_in_range() {
        let a = synth_blobs(3, 20, [1, 2, 2], 11).unwrap();
        let b = synth_blobs(3, 20, [1, 2, 2], 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 60);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.label_histogram(), vec![20, 20, 20]);
    }

    #[test]
    fn batch_sizes() {
        let d = synth_blobs(2, 5, [1, 1, 1], 0).unwrap();
        let sizes: Vec<usize> = batches(&d, 4, false, 0).unwrap().map(|(_, y)| y.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(batches(&d, 0, false, 0).is_err());
    }

    #[test]
    fn unshuffled_keeps_order_and_shuffle_is_seeded() {
        let d = synth_blobs(2, 5, [1, 1, 1], 0).unwrap();
        let plain = batches(&d, 3, false, 0).unwrap();
        assert_eq!(plain.order(), &(0..10).collect::<Vec<_>>()[..]);
        let a = batches(&d, 3, true, 7).unwrap().order().to_vec();
        let b = batches(&d, 3, true, 7).unwrap().order().to_vec();
        let c = batches(&d, 3, true, 8).unwrap().order().to_vec();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn concatenated_batches_reproduce_dataset() {
        let d = synth_blobs(3, 7, [1, 2, 2], 4).unwrap();
        let parts: Vec<(Tensor, Vec<usize>)> = batches(&d, 4, false, 0).unwrap().collect();
        let refs: Vec<&Tensor> = parts.iter().map(|(x, _)| x).collect();
        let all = Tensor::concat_rows(&refs).unwrap();
        assert_eq!(all, d.images);
        let labels: Vec<usize> = parts.iter().flat_map(|(_, y)| y.clone()).collect();
        assert_eq!(labels, d.labels);
    }
}
