//! MNIST / CIFAR-10 loaders, splits and deterministic batching.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{substream, SHUFFLE, SPLIT};
use crate::tensor::{Real, Tensor};

pub const DATA_DIR_ENV: &str = "AUTOPRUNE_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset<T: Real = f32> {
    /// `[N, C, H, W]`, normalized.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl<T: Real> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape("dataset", images.shape(), &[labels.len()]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (images, labels) = self.batch(indices)?;
        Dataset::new(images, labels, self.num_classes, split)
    }

    /// Per-class label counts.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Per-channel normalization constants, computed on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Mean and (population) standard deviation of each channel of
    /// `pixels`, laid out as `[N, channels, plane]`.
    pub fn fit(pixels: &[f64], channels: usize, plane: usize) -> Result<Self> {
        if pixels.is_empty() || channels == 0 || plane == 0 || !pixels.len().is_multiple_of(channels * plane) {
            return Err(Error::EmptyDataset);
        }
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for (i, ch) in pixels.chunks(plane).enumerate() {
            let c = i % channels;
            for &v in ch {
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        let n = (pixels.len() / channels) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        Ok(Normalization { mean, std })
    }
}

/// SHA-256 of a raw input file, recorded in run manifests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug)]
pub struct DataSplits<T: Real = f32> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub normalization: Normalization,
    pub checksums: Vec<FileChecksum>,
}

/// `flag`, else `$AUTOPRUNE_DATA_DIR`, else `fallback`.
pub fn resolve_data_dir(flag: Option<&Path>, fallback: &Path) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| fallback.to_path_buf())
}

/// Reads `path`, or `path.gz` decompressed when only that exists.
fn read_raw(path: &Path, sums: &mut Vec<FileChecksum>) -> Result<Vec<u8>> {
    let gz = PathBuf::from(format!("{}.gz", path.display()));
    let (bytes, used) = if path.exists() {
        (
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?,
            path,
        )
    } else if gz.exists() {
        let raw = fs::read(&gz).map_err(|e| Error::io(format!("reading {}", gz.display()), e))?;
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(format!("decompressing {}", gz.display()), e))?;
        (out, gz.as_path())
    } else {
        return Err(Error::io(
            format!("missing data file {}", path.display()),
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    };
    sums.push(FileChecksum {
        file: used
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: hex(&Sha256::digest(&bytes)),
    });
    Ok(bytes)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// IDX image file: magic 0x00000803, then count, rows, cols (big-endian).
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(format_err(path, "truncated header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != 0x0000_0803 {
        return Err(format_err(
            path,
            format!("bad magic {magic:#010x}, expected 0x00000803"),
        ));
    }
    let (n, rows, cols) = (
        be_u32(bytes, 4) as usize,
        be_u32(bytes, 8) as usize,
        be_u32(bytes, 12) as usize,
    );
    let want = n * rows * cols;
    if bytes.len() - 16 != want {
        return Err(format_err(
            path,
            format!(
                "expected {want} pixel bytes for {n}x{rows}x{cols}, found {}",
                bytes.len() - 16
            ),
        ));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// IDX label file: magic 0x00000801, then count (big-endian).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(format_err(path, "truncated header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != 0x0000_0801 {
        return Err(format_err(
            path,
            format!("bad magic {magic:#010x}, expected 0x00000801"),
        ));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() - 8 != n {
        return Err(format_err(
            path,
            format!("expected {n} labels, found {}", bytes.len() - 8),
        ));
    }
    Ok(bytes[8..].to_vec())
}

fn to_dataset<T: Real>(
    pixels: &[u8],
    labels: Vec<u8>,
    shape: [usize; 3],
    norm: &Normalization,
    split: Split,
) -> Result<Dataset<T>> {
    let plane = shape[1] * shape[2];
    let image = shape[0] * plane;
    let n = labels.len();
    let data = pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = (i % image) / plane;
            T::of((p as f64 / 255.0 - norm.mean[c]) / norm.std[c])
        })
        .collect();
    let images = Tensor::new([n, shape[0], shape[1], shape[2]], data)?;
    Dataset::new(images, labels.into_iter().map(usize::from).collect(), 10, split)
}

fn fit_u8(pixels: &[u8], shape: [usize; 3]) -> Result<Normalization> {
    let scaled: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Normalization::fit(&scaled, shape[0], shape[1] * shape[2])
}

/// Loads the four MNIST IDX files (optionally gzipped) from `dir`.
pub fn load_mnist<T: Real>(dir: &Path) -> Result<DataSplits<T>> {
    let mut sums = Vec::new();
    let mut load = |images: &str, labels: &str| -> Result<(Vec<u8>, Vec<u8>, [usize; 3])> {
        let (ip, lp) = (dir.join(images), dir.join(labels));
        let (n, rows, cols, pixels) = parse_idx_images(&read_raw(&ip, &mut sums)?, &ip)?;
        let labels = parse_idx_labels(&read_raw(&lp, &mut sums)?, &lp)?;
        if labels.len() != n {
            return Err(format_err(&lp, format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
            return Err(format_err(&lp, format!("label {bad} outside 0..=9")));
        }
        Ok((pixels, labels, [1, rows, cols]))
    };
    let (train_px, train_lb, shape) = load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let (test_px, test_lb, test_shape) = load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    if shape != test_shape {
        return Err(format_err(
            dir,
            format!("train images are {shape:?}, test images {test_shape:?}"),
        ));
    }
    let norm = fit_u8(&train_px, shape)?;
    Ok(DataSplits {
        train: to_dataset(&train_px, train_lb, shape, &norm, Split::Train)?,
        test: to_dataset(&test_px, test_lb, shape, &norm, Split::Test)?,
        normalization: norm,
        checksums: sums,
    })
}

pub const CIFAR_RECORD: usize = 3073;

/// Splits CIFAR-10 binary records into labels and channel-major pixels.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(format_err(
            path,
            format!("size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * 3072);
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(format_err(path, format!("label byte {} outside 0..=9", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir` or from
/// its `cifar-10-batches-bin` subdirectory.
pub fn load_cifar10<T: Real>(dir: &Path) -> Result<DataSplits<T>> {
    let nested = dir.join("cifar-10-batches-bin");
    let root = if dir.join("test_batch.bin").exists() || !nested.exists() {
        dir.to_path_buf()
    } else {
        nested
    };
    let mut sums = Vec::new();
    let mut read = |name: &str| -> Result<(Vec<u8>, Vec<u8>)> {
        let p = root.join(name);
        parse_cifar_batch(&read_raw(&p, &mut sums)?, &p)
    };
    let (mut train_lb, mut train_px) = (Vec::new(), Vec::new());
    for i in 1..=5 {
        let (l, p) = read(&format!("data_batch_{i}.bin"))?;
        train_lb.extend(l);
        train_px.extend(p);
    }
    let (test_lb, test_px) = read("test_batch.bin")?;
    let shape = [3, 32, 32];
    let norm = fit_u8(&train_px, shape)?;
    Ok(DataSplits {
        train: to_dataset(&train_px, train_lb, shape, &norm, Split::Train)?,
        test: to_dataset(&test_px, test_lb, shape, &norm, Split::Test)?,
        normalization: norm,
        checksums: sums,
    })
}

/// Seeded disjoint split: `round(fraction * N)` images go to validation.
pub fn split_validation<T: Real>(train: &Dataset<T>, fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {fraction} outside (0, 1)"
        )));
    }
    let (keep, held) = split_indices(train.len(), fraction, seed);
    if keep.is_empty() || held.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((
        train.subset(&keep, Split::Train)?,
        train.subset(&held, Split::Validation)?,
    ))
}

/// Index sets `(train, validation)` of [`split_validation`], each ascending.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, SPLIT));
    let n_val = ((n as f64) * fraction).round() as usize;
    let (mut val, mut keep) = (idx[..n_val].to_vec(), idx[n_val..].to_vec());
    val.sort_unstable();
    keep.sort_unstable();
    (keep, val)
}

/// Batches of one epoch: a permutation seeded by `seed ^ epoch`, cut into
/// runs of `batch_size` with the final partial batch kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed ^ epoch as u64, SHUFFLE));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Random horizontal flips and zero-padded random crops, for longer runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    pub flip: bool,
    pub crop_pad: usize,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.crop_pad == 0
    }

    /// Transforms each image of `images` (`[N, C, H, W]`) in place.
    pub fn apply<T: Real>(&self, images: &mut Tensor<T>, rng: &mut impl Rng) {
        if self.is_identity() {
            return;
        }
        let s = images.shape().to_vec();
        let (c, h, w) = (s[1], s[2], s[3]);
        let pad = self.crop_pad as isize;
        for img in images.data_mut().chunks_mut(c * h * w) {
            let flip = self.flip && rng.random_bool(0.5);
            let (dy, dx) = if pad > 0 {
                (
                    rng.random_range(-pad as i64..=pad as i64) as isize,
                    rng.random_range(-pad as i64..=pad as i64) as isize,
                )
            } else {
                (0, 0)
            };
            let src = img.to_vec();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize + dy;
                        let sx0 = x as isize + dx;
                        let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                        let inside = (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx);
                        img[(ch * h + y) * w + x] = if inside {
                            src[(ch * h + sy as usize) * w + sx as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}
